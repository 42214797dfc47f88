"""Elementwise and normalization primitives with hand-written derivatives.

Every forward op ``f`` has a matching ``f_backward`` that takes the upstream
gradient plus the forward inputs and returns the input/parameter gradients.
Arrays are plain :class:`numpy.ndarray`; the precision mode is the dtype
(float32 or float64).
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass

import numpy as np

DTYPES = {"float32": np.float32, "float64": np.float64}

_CHECKED = False


class NonFiniteError(FloatingPointError):
    """Raised in checked mode when an array holds NaN or Inf."""


def set_checked(flag: bool) -> None:
    global _CHECKED
    _CHECKED = bool(flag)


def is_checked() -> bool:
    return _CHECKED


@contextlib.contextmanager
def checked_mode(flag: bool = True):
    """Temporarily enable (or disable) NaN/Inf rejection."""
    prev = _CHECKED
    set_checked(flag)
    try:
        yield
    finally:
        set_checked(prev)


def check_finite(name: str, x: np.ndarray) -> np.ndarray:
    if _CHECKED and not np.all(np.isfinite(x)):
        raise NonFiniteError(f"{name} contains non-finite entries")
    return x


def as_tensor(data, precision: str = "float64") -> np.ndarray:
    """Convert ``data`` to an array in the requested precision mode."""
    if precision not in DTYPES:
        raise ValueError(f"unknown precision {precision!r}; expected one of {sorted(DTYPES)}")
    arr = np.asarray(data, dtype=DTYPES[precision])
    return check_finite("tensor", arr)


@dataclass
class NormParams:
    scale: np.ndarray
    shift: np.ndarray | None = None
    eps: float = 1e-6

    def __post_init__(self):
        if self.eps < 0:
            raise ValueError("norm epsilon must be non-negative")
        if self.shift is not None and np.shape(self.shift) != np.shape(self.scale):
            raise ValueError("shift must match scale shape")


def reduce_to(g: np.ndarray, shape) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    shape = tuple(shape)
    g = g.sum(axis=tuple(range(g.ndim - len(shape)))) if g.ndim > len(shape) else g
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    return g.sum(axis=axes, keepdims=True) if axes else g


def _check_norm_shape(x: np.ndarray, p: NormParams) -> None:
    if x.shape[-1:] != np.shape(p.scale)[-1:]:
        raise ValueError(
            f"normalized axis extent {x.shape[-1:]} does not match scale {np.shape(p.scale)}"
        )


# --- activations -----------------------------------------------------------


def sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def logsigmoid(x: np.ndarray) -> np.ndarray:
    """log(sigmoid(x)); exact 0 at +inf and -inf at -inf."""
    return -np.logaddexp(0.0, -x)


def softcap(x: np.ndarray, a: float) -> np.ndarray:
    """Bounded squashing ``a * tanh(x / a)``."""
    if not a > 0:
        raise ValueError(f"softcap value must be positive, got {a}")
    y = a * np.tanh(x / a)
    # tanh rounds to exactly 1 for large inputs; keep the bound strict
    top = np.nextafter(np.asarray(a, dtype=y.dtype), 0)
    return np.clip(y, -top, top)


def softcap_backward(dout: np.ndarray, x: np.ndarray, a: float) -> np.ndarray:
    t = np.tanh(x / a)
    return dout * (1.0 - t * t)


def swish(z: np.ndarray) -> np.ndarray:
    return z * sigmoid(z)


def swish_backward(dout: np.ndarray, z: np.ndarray) -> np.ndarray:
    s = sigmoid(z)
    return dout * (s + z * s * (1.0 - s))


# --- normalization ---------------------------------------------------------


def rmsnorm(x: np.ndarray, p: NormParams) -> np.ndarray:
    _check_norm_shape(x, p)
    r = 1.0 / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + p.eps)
    out = x * r * p.scale
    if p.shift is not None:
        out = out + p.shift
    return out


def rmsnorm_backward(dout: np.ndarray, x: np.ndarray, p: NormParams):
    """Return ``(dx, dscale, dshift)``; ``dshift`` is None without a shift."""
    d = x.shape[-1]
    r = 1.0 / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + p.eps)
    xhat = x * r
    dscale = reduce_to(dout * xhat, np.shape(p.scale))
    dshift = reduce_to(dout, np.shape(p.shift)) if p.shift is not None else None
    g = dout * p.scale
    dx = r * (g - xhat * np.sum(g * xhat, axis=-1, keepdims=True) / d)
    return dx, dscale, dshift


def layernorm(x: np.ndarray, p: NormParams) -> np.ndarray:
    _check_norm_shape(x, p)
    mu = np.mean(x, axis=-1, keepdims=True)
    xc = x - mu
    r = 1.0 / np.sqrt(np.mean(xc * xc, axis=-1, keepdims=True) + p.eps)
    out = xc * r * p.scale
    if p.shift is not None:
        out = out + p.shift
    return out


def layernorm_backward(dout: np.ndarray, x: np.ndarray, p: NormParams):
    """Return ``(dx, dscale, dshift)``; ``dshift`` is None without a shift."""
    d = x.shape[-1]
    xc = x - np.mean(x, axis=-1, keepdims=True)
    r = 1.0 / np.sqrt(np.mean(xc * xc, axis=-1, keepdims=True) + p.eps)
    xhat = xc * r
    dscale = reduce_to(dout * xhat, np.shape(p.scale))
    dshift = reduce_to(dout, np.shape(p.shift)) if p.shift is not None else None
    g = dout * p.scale
    dx = r * (
        g
        - np.mean(g, axis=-1, keepdims=True)
        - xhat * np.sum(g * xhat, axis=-1, keepdims=True) / d
    )
    return dx, dscale, dshift


NORMS = {"rms": (rmsnorm, rmsnorm_backward), "layer": (layernorm, layernorm_backward)}


# --- feed-forward ----------------------------------------------------------


def swiglu_mlp(x, w_gate, w_up, w_down):
    """Gated MLP: ``(swish(x @ w_gate) * (x @ w_up)) @ w_down``."""
    if w_gate.shape != w_up.shape or x.shape[-1] != w_gate.shape[0] or w_down.shape != w_gate.shape[::-1]:
        raise ValueError(
            f"swiglu dimension mismatch: x {x.shape}, gate {w_gate.shape}, "
            f"up {w_up.shape}, down {w_down.shape}"
        )
    return (swish(x @ w_gate) * (x @ w_up)) @ w_down


def swiglu_mlp_backward(dout, x, w_gate, w_up, w_down):
    """Return ``(dx, dw_gate, dw_up, dw_down)``."""
    zg = x @ w_gate
    zu = x @ w_up
    sg = swish(zg)
    hid = sg * zu
    x2 = x.reshape(-1, x.shape[-1])
    dw_down = hid.reshape(-1, hid.shape[-1]).T @ dout.reshape(-1, dout.shape[-1])
    dhid = dout @ w_down.T
    dzu = dhid * sg
    dzg = swish_backward(dhid * zu, zg)
    dw_gate = x2.T @ dzg.reshape(-1, dzg.shape[-1])
    dw_up = x2.T @ dzu.reshape(-1, dzu.shape[-1])
    dx = dzg @ w_gate.T + dzu @ w_up.T
    return dx, dw_gate, dw_up, dw_down


# --- loss --------------------------------------------------------------------


def cross_entropy(logits: np.ndarray, targets: np.ndarray, mask: np.ndarray | None = None):
    """Mean token cross-entropy and its gradient w.r.t. ``logits``.

    ``mask`` selects which targets count (e.g. excludes padding).
    """
    z = logits - np.max(logits, axis=-1, keepdims=True)
    logz = np.log(np.sum(np.exp(z), axis=-1, keepdims=True))
    logp = z - logz
    nll = -np.take_along_axis(logp, targets[..., None], axis=-1)[..., 0]
    w = np.ones(targets.shape, dtype=logits.dtype) if mask is None else mask.astype(logits.dtype)
    count = max(float(w.sum()), 1.0)
    loss = float(np.sum(nll * w) / count)
    dlogits = np.exp(logp)
    np.put_along_axis(
        dlogits, targets[..., None],
        np.take_along_axis(dlogits, targets[..., None], axis=-1) - 1.0, axis=-1,
    )
    dlogits *= (w / count)[..., None]
    return loss, dlogits
