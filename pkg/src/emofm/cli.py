"""``emofm generate|train|eval|plot``.

Exit codes: 0 success, 2 usage or sequencing error, 3 data/schema/bundle
error, 4 numeric abort.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from . import __version__
from .dataio import SyntheticSpec, generate, load_records, split_by_day, write_records
from .errors import DataError, EmofmError, SequencingError, UsageError
from .metrics import evaluate
from .models import AM, MEMBER_NAMES, ModelBundle, ModelConfig, build_predictor
from .plotting import plot_traces
from .serialization import file_sha256, load_bundle, save_bundle
from .training import TrainConfig, read_trace, train_am, train_predictor, write_trace

log = logging.getLogger("emofm")

# members trained per --model choice: (member name, kind, index into the seed pair)
_PLAN = {
    "wm": [("wm", "wm", 0)],
    "hm": [("hm0", "hm", 0), ("hm1", "hm", 1)],
    "hmm": [("hmm0", "hmm", 0), ("hmm1", "hmm", 1)],
}
_PLAN["all"] = _PLAN["wm"] + _PLAN["hm"] + _PLAN["hmm"]
# preferred embedding source for AM, first present wins
AM_SOURCE_ORDER = ("hmm0", "hm0", "wm", "hmm1", "hm1")


def _write_manifest(out: Path, command: str, config: dict, inputs: list[Path], outputs: list[Path]) -> Path:
    manifest = {
        "command": command,
        "version": __version__,
        "config": config,
        "inputs": {str(p): file_sha256(p) for p in inputs},
        "outputs": {str(p): file_sha256(p) for p in outputs},
    }
    path = out.with_name(out.name + ".manifest.json")
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def _read_json(path) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(data, dict):
        raise DataError(f"{path}: expected a JSON object")
    return data


def _load(path) -> object:
    try:
        return load_records(path)
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from None


# --------------------------------------------------------------------- generate

def cmd_generate(args) -> int:
    spec_dict = _read_json(args.spec) if args.spec else {}
    if args.n_records is not None:
        spec_dict["n_records"] = args.n_records
    if args.mode is not None:
        spec_dict["mode"] = args.mode
    spec = SyntheticSpec.from_dict(spec_dict)
    out = Path(args.out)
    records = generate(spec, args.seed)
    write_records(records, out)
    inputs = [Path(args.spec)] if args.spec else []
    _write_manifest(out, "generate", {"spec": spec.to_dict(), "seed": args.seed}, inputs, [out])
    print(f"wrote {len(records)} records to {out}")
    return 0


# --------------------------------------------------------------------- train

def _split_config(d: dict) -> tuple[ModelConfig, TrainConfig]:
    mkeys = set(ModelConfig.__dataclass_fields__)
    tkeys = set(TrainConfig.__dataclass_fields__)
    unknown = set(d) - mkeys - tkeys
    if unknown:
        raise UsageError(f"unknown config fields {sorted(unknown)}")
    try:
        mc = ModelConfig.from_dict({k: v for k, v in d.items() if k in mkeys})
        tc = TrainConfig.from_dict({k: v for k, v in d.items() if k in tkeys})
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid config: {exc}") from None
    return mc, tc


def _train_member(kind: str, config: ModelConfig, tconfig: TrainConfig, seed: int, train):
    model = build_predictor(kind, config, seed)
    result = train_predictor(model, train, tconfig, seed)
    return model, result.trace, result.seconds


def _thread_cap() -> int:
    raw = os.environ.get("EMOFM_THREADS", "1")
    try:
        cap = int(raw)
    except ValueError:
        raise UsageError(f"EMOFM_THREADS must be an integer, got {raw!r}") from None
    if cap < 1:
        raise UsageError("EMOFM_THREADS must be >= 1")
    return cap


def cmd_train(args) -> int:
    if args.resume:
        raise UsageError("resuming a run is not supported; start a fresh one-epoch run instead")
    file_cfg = _read_json(args.config) if args.config else {}
    if args.seeds is not None:
        file_cfg["seeds"] = list(args.seeds)
    if args.shuffle is not None:
        file_cfg["shuffle"] = args.shuffle
    mconfig, tconfig = _split_config(file_cfg)
    if len(tconfig.seeds) != 2:
        raise UsageError("exactly two seeds are required")
    out = Path(args.out or args.bundle or "bundle.emofm")
    trace_dir = Path(args.trace_dir) if args.trace_dir else out.parent
    trace_dir.mkdir(parents=True, exist_ok=True)

    records = _load(args.data)
    train, test = split_by_day(records)
    if len(train) == 0:
        raise DataError("no training records (days 1..29) in the data file")

    inputs = [Path(args.data)] + ([Path(args.config)] if args.config else [])
    if args.bundle:
        bundle = load_bundle(args.bundle)
        if bundle.config != mconfig and args.config:
            raise UsageError("--config does not match the configuration stored in --bundle")
        mconfig = bundle.config
        inputs.append(Path(args.bundle))
    elif args.model == "am":
        raise SequencingError("training AM needs a predictor bundle; pass --bundle from a prior train run")
    else:
        bundle = ModelBundle(mconfig)
    bundle.train_config = tconfig.to_dict()

    outputs = []
    plan = _PLAN.get(args.model, [])
    jobs = min(args.jobs, _thread_cap(), max(1, len(plan)))
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = [pool.submit(_train_member, kind, mconfig, tconfig, tconfig.seeds[i], train)
                       for _, kind, i in plan]
            results = [f.result() for f in futures]
    else:
        results = [_train_member(kind, mconfig, tconfig, tconfig.seeds[i], train) for _, kind, i in plan]
    for (name, _, i), (model, trace, seconds) in zip(plan, results):
        bundle.members[name] = model
        bundle.seeds[name] = tconfig.seeds[i]
        path = trace_dir / f"trace_{name}.csv"
        write_trace(trace, path)
        outputs.append(path)
        log.info("%s: %d records, %.1fs, final running AUC %.4f", name, len(train), seconds,
                 trace[-1].auc if trace else float("nan"))

    if args.model in ("am", "all"):
        source = next((n for n in AM_SOURCE_ORDER if n in bundle.members), None)
        if source is None:
            raise SequencingError("bundle holds no trained predictor to take AM embeddings from")
        seed = tconfig.seeds[0]
        am = AM(mconfig, bundle.members[source].embedding, seed)
        result = train_am(am, train, tconfig, seed)
        bundle.members["am"] = am
        bundle.seeds["am"] = seed
        bundle.am_source = source
        path = trace_dir / "trace_am.csv"
        write_trace(result.trace, path)
        outputs.append(path)
        log.info("am: %.1fs, running accuracy %.4f", result.seconds, result.trace[-1].auc)

    save_bundle(bundle, out)
    outputs.insert(0, out)
    print(f"wrote bundle {out} with members {', '.join(bundle.member_names())}")
    complete = all(n in bundle.members for n in (*MEMBER_NAMES, "am"))
    if complete and len(test) and not args.no_report:
        report = evaluate(bundle, test)
        rpath = out.with_name(out.name + ".report.json")
        rpath.write_text(report.to_json() + "\n", encoding="utf-8")
        outputs.append(rpath)
        print(report.table())
    config = {"model": mconfig.to_dict(), "train": tconfig.to_dict(), "members": args.model}
    _write_manifest(out, "train", config, inputs, outputs)
    return 0


# --------------------------------------------------------------------- eval

def cmd_eval(args) -> int:
    if args.no_ftype and args.true_type:
        raise UsageError("--no-ftype and --true-type conflict: the first removes the type pathway")
    if args.soft and (args.true_type or args.no_ftype):
        raise UsageError("--soft applies to AM routing only")
    bundle = load_bundle(args.bundle)
    records = _load(args.data)
    if not args.all_days:
        _, records = split_by_day(records)
        if len(records) == 0:
            raise DataError("no test records (day 30) in the data file; use --all-days")
    routing = "true" if args.true_type else ("soft" if args.soft else "am")
    report = evaluate(bundle, records, routing=routing, type_wise=not args.no_type_wise,
                      use_ftype=not args.no_ftype)
    print(report.table())
    if args.json:
        out = Path(args.json)
        out.write_text(report.to_json() + "\n", encoding="utf-8")
        _write_manifest(out, "eval", report.flags, [Path(args.bundle), Path(args.data)], [out])
    return 0


# --------------------------------------------------------------------- plot

def cmd_plot(args) -> int:
    paths = [Path(p) for p in args.trace]
    if args.trace_dir:
        paths += sorted(Path(args.trace_dir).glob("trace_*.csv"))
    paths = [p for p in paths if args.include_am or p.stem != "trace_am"]
    if not paths:
        raise UsageError("no trace files given")
    traces = {}
    for p in paths:
        try:
            traces[p.stem.removeprefix("trace_")] = read_trace(p)
        except (OSError, KeyError, ValueError) as exc:
            raise DataError(f"cannot read trace {p}: {exc}") from None
    out = Path(args.out)
    plot_traces(traces, out, title=args.title)
    _write_manifest(out, "plot", {"title": args.title}, paths, [out])
    print(f"wrote {out}")
    return 0


# --------------------------------------------------------------------- entry

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(2, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="emofm", description="Train and evaluate the EMOFM CTR ensemble.")
    p.add_argument("--version", action="version", version=f"emofm {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("generate", help="write a synthetic CSV dataset")
    g.add_argument("--spec", help="JSON file with SyntheticSpec fields")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--n-records", type=int)
    g.add_argument("--mode", choices=("planted", "null"))
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="one-epoch training of predictors and/or AM")
    t.add_argument("--data", required=True)
    t.add_argument("--model", choices=("wm", "hm", "hmm", "am", "all"), default="all")
    t.add_argument("--config", help="flat JSON of ModelConfig/TrainConfig fields")
    t.add_argument("--seeds", type=int, nargs=2, metavar=("SEED1", "SEED2"))
    t.add_argument("--shuffle", choices=("uniform", "day"))
    t.add_argument("--bundle", help="existing bundle to extend (required for --model am)")
    t.add_argument("--out", help="bundle path to write (default: --bundle or bundle.emofm)")
    t.add_argument("--trace-dir", help="directory for trace_<member>.csv (default: next to the bundle)")
    t.add_argument("--jobs", type=int, default=1, help="parallel member processes, capped by EMOFM_THREADS")
    t.add_argument("--no-report", action="store_true", help="skip the day-30 report after --model all")
    t.add_argument("--resume", action="store_true", help=argparse.SUPPRESS)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="score a bundle on the day-30 split")
    e.add_argument("--bundle", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--no-type-wise", action="store_true", help="uni-predictors only")
    e.add_argument("--no-ftype", action="store_true", help="drop the type pathway entirely")
    e.add_argument("--true-type", action="store_true", help="route by the file's type column instead of AM")
    e.add_argument("--soft", action="store_true", help="AM-probability weighted routing")
    e.add_argument("--all-days", action="store_true", help="score every record, not just day 30")
    e.add_argument("--json", help="also write the report as JSON")
    e.set_defaults(func=cmd_eval)

    pl = sub.add_parser("plot", help="SVG of AUC/Logloss traces")
    pl.add_argument("--trace", nargs="*", default=[])
    pl.add_argument("--trace-dir")
    pl.add_argument("--include-am", action="store_true")
    pl.add_argument("--title")
    pl.add_argument("--out", required=True)
    pl.set_defaults(func=cmd_plot)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s", stream=sys.stderr)
    start = time.perf_counter()
    try:
        code = args.func(args)
    except EmofmError as exc:
        print(f"emofm: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"emofm: error: {exc}", file=sys.stderr)
        return DataError.exit_code
    log.info("%s finished in %.1fs", args.command, time.perf_counter() - start)
    return code


if __name__ == "__main__":
    sys.exit(main())
