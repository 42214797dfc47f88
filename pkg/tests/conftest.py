import numpy as np
import pytest

from xlstm_desk.model import ModelConfig, init_params


def numeric_grad(f, x, step=1e-5):
    """Central finite differences of scalar ``f()`` w.r.t. every entry of ``x`` (mutated in place)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + step
        fp = f()
        x[i] = old - step
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * step)
    return g


def rel_err(a, b, floor=1e-8):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), floor))


def tiny_config(**kw):
    base = dict(vocab_size=11, num_blocks=2, d_model=8, num_heads=2, ff_multiple=4, precision="float64")
    base.update(kw)
    return ModelConfig(**base)


def random_params(cfg, seed=0, scale=0.5):
    """Initialized parameters with perturbed gates so that every path carries gradient."""
    rng = np.random.default_rng(seed)
    p = init_params(cfg, seed)
    for name, arr in p.items():
        if name.endswith(("w_i", "w_f", "b_i", "b_f", "b_q", "b_k", "b_v", "b_o")) or name.endswith("scale"):
            p[name] = (arr + scale * rng.standard_normal(arr.shape)).astype(arr.dtype)
    return p


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
