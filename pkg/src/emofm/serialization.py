"""Single-file model bundle container.

Layout, all integers little-endian::

    bytes 0..7    magic b"EMOFMBDL"
    bytes 8..15   u64 header length H
    next H bytes  UTF-8 JSON header (keys sorted)
    remainder     float64 LE parameter blocks, back to back

The header lists every stored parameter as ``{"member", "name", "shape",
"offset"}`` with ``offset`` counted in float64 elements from the start of
the block area, in declaration order.  AM's embedding tables are not stored;
``am_source`` names the member whose tables AM reads.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .errors import BundleError
from .models import AM, ModelBundle, ModelConfig, build_predictor

MAGIC = b"EMOFMBDL"
FORMAT_VERSION = 1


def _stored_params(name: str, model):
    for pname, p in model.named_parameters():
        if name == "am" and pname.startswith("embedding."):
            continue
        yield pname, p


def bundle_bytes(bundle: ModelBundle) -> bytes:
    if "am" in bundle.members and bundle.am_source not in bundle.members:
        raise BundleError(f"AM embedding source {bundle.am_source!r} is not in the bundle")
    manifest, blocks, offset = [], [], 0
    members = []
    for name in bundle.member_names():
        model = bundle.members[name]
        members.append({"name": name, "kind": model.kind, "seed": int(bundle.seeds[name])})
        for pname, p in _stored_params(name, model):
            manifest.append({"member": name, "name": pname, "shape": list(p.shape), "offset": offset})
            blocks.append(np.ascontiguousarray(p.data, dtype="<f8").tobytes())
            offset += p.size
    header = {
        "format": FORMAT_VERSION,
        "config": bundle.config.to_dict(),
        "train_config": bundle.train_config,
        "members": members,
        "am_source": bundle.am_source,
        "last_train_day": bundle.last_train_day,
        "params": manifest,
    }
    raw = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return b"".join([MAGIC, struct.pack("<Q", len(raw)), raw, *blocks])


def save_bundle(bundle: ModelBundle, path) -> str:
    """Write the bundle; returns the file's sha256 hex digest."""
    data = bundle_bytes(bundle)
    Path(path).write_bytes(data)
    return hashlib.sha256(data).hexdigest()


def read_header(path) -> dict:
    with open(path, "rb") as fh:
        return _header(fh.read(16 + _peek_len(path)))[0]


def _peek_len(path) -> int:
    with open(path, "rb") as fh:
        head = fh.read(16)
    if len(head) < 16 or head[:8] != MAGIC:
        raise BundleError(f"{path} is not a model bundle")
    return struct.unpack("<Q", head[8:])[0]


def _header(data: bytes) -> tuple[dict, int]:
    if len(data) < 16 or data[:8] != MAGIC:
        raise BundleError("not a model bundle (bad magic)")
    (hlen,) = struct.unpack("<Q", data[8:16])
    if len(data) < 16 + hlen:
        raise BundleError("truncated bundle header")
    try:
        header = json.loads(data[16:16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise BundleError(f"corrupt bundle header: {exc}") from None
    if header.get("format") != FORMAT_VERSION:
        raise BundleError(f"unsupported bundle format {header.get('format')!r}")
    return header, 16 + hlen


def bundle_from_bytes(data: bytes) -> ModelBundle:
    header, start = _header(data)
    values = np.frombuffer(data, dtype="<f8", offset=start) if len(data) > start else np.empty(0)
    config = ModelConfig.from_dict(header["config"])
    bundle = ModelBundle(config, am_source=header["am_source"], last_train_day=header["last_train_day"],
                         train_config=header["train_config"])
    by_member: dict[str, dict] = {}
    for entry in header["params"]:
        by_member.setdefault(entry["member"], {})[entry["name"]] = entry
    for m in header["members"]:
        name, kind, seed = m["name"], m["kind"], m["seed"]
        if kind == "am":
            src = bundle.members.get(bundle.am_source)
            if src is None:
                raise BundleError(f"AM embedding source {bundle.am_source!r} missing")
            model = AM(config, src.embedding, seed)
        else:
            model = build_predictor(kind, config, seed)
        stored = by_member.get(name, {})
        expected = dict(_stored_params(name, model))
        if set(stored) != set(expected):
            raise BundleError(f"parameter set of {name!r} does not match its architecture")
        for pname, p in expected.items():
            e = stored[pname]
            if tuple(e["shape"]) != p.shape:
                raise BundleError(f"{name}.{pname}: stored shape {e['shape']} != {list(p.shape)}")
            end = e["offset"] + p.size
            if end > values.size:
                raise BundleError("truncated parameter block")
            p.data[...] = values[e["offset"]:end].reshape(p.shape)
        bundle.members[name] = model
        bundle.seeds[name] = seed
    return bundle


def load_bundle(path) -> ModelBundle:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise BundleError(f"cannot read bundle {path}: {exc}") from None
    return bundle_from_bytes(data)


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
