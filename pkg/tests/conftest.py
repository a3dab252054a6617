import numpy as np
import pytest

from emofm import numerics as nx
from emofm.dataio import SyntheticSpec, generate
from emofm.models import ModelConfig

FD_STEP = 1e-5
FD_REL_TOL = 1e-4
_EPS = np.finfo(np.float64).eps


def tiny_config(**overrides) -> ModelConfig:
    """Same architecture as the defaults with narrow layers and small tables."""
    base = dict(
        wm_dims=[12, 6, 1],
        hm_stage1_dims={"user": [6, 5], "scene": [4, 3], "ad": [6, 4], "session": [4, 3]},
        hm_stage2_dims=[6, 1],
        enrichment_dim=5,
        embed_dims={"user": 3, "scene": 3, "ad": 3, "session": 3, "type": 4, "time": 4},
        vocab_sizes={"user": 53, "scene": 53, "ad": 53, "session": 53, "type": 8, "time": 31},
        stage2_mixer_blocks=[0, 1],
    )
    base.update(overrides)
    return ModelConfig(**base)


def fd_tolerance(g_analytic: float, loss: float) -> float:
    # relative bound plus the resolution of a central difference on a float64 loss
    return FD_REL_TOL * abs(g_analytic) + 64 * _EPS * max(abs(loss), 1.0) / FD_STEP


def check_gradients(loss_fn, params, rng, per_tensor: int = 1, min_abs: float = 1e-8):
    """Compare tape gradients with central differences on sampled coordinates.

    ``loss_fn`` rebuilds the scalar loss from the current parameter values.
    Returns (worst relative error, number of coordinates checked, failures).
    """
    with nx.GradTape() as tape:
        loss = loss_fn()
    grads = tape.gradient(loss)
    base = loss.item()
    worst, checked, failures = 0.0, 0, []
    for name, p in params:
        g = grads[p]
        cand = np.flatnonzero(np.abs(g).ravel() > min_abs)
        if cand.size == 0:
            continue
        for flat in rng.choice(cand, size=min(per_tensor, cand.size), replace=False):
            idx = np.unravel_index(flat, p.shape)
            old = p.data[idx]
            p.data[idx] = old + FD_STEP
            lp = loss_fn().item()
            p.data[idx] = old - FD_STEP
            lm = loss_fn().item()
            p.data[idx] = old
            fd = (lp - lm) / (2 * FD_STEP)
            err = abs(fd - g[idx])
            worst = max(worst, err / max(abs(g[idx]), abs(fd)))
            checked += 1
            if err > fd_tolerance(g[idx], base):
                failures.append((name, idx, g[idx], fd))
    return worst, checked, failures


@pytest.fixture(scope="session")
def small_records():
    return generate(SyntheticSpec(n_records=3000), 11)


@pytest.fixture
def tiny():
    return tiny_config()
