"""Single-head mLSTM cell in its recurrent (token-by-token) form.

All functions broadcast over leading batch/head axes: ``q, k`` are
``(..., T, d_qk)``, ``v`` is ``(..., T, d_hv)`` and the gate pre-activations
are ``(..., T)``. A :class:`CellState` holds ``C (..., d_qk, d_hv)``,
``n (..., d_qk)`` and ``m (...)``.

Gate pre-activations arrive already soft-capped. A forget pre-activation of
``-inf`` is the document-reset sentinel: sigma(-inf) = 0 zeroes the memory.

The max state ``m`` only rescales ``C`` and ``n`` and cancels in the output,
so the backward passes treat it as a constant; the gradient w.r.t. the
initial ``m`` is recovered from the initial ``C`` and ``n``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .numerics import check_finite, logsigmoid, sigmoid


@dataclass
class CellState:
    C: np.ndarray
    n: np.ndarray
    m: np.ndarray

    @classmethod
    def zeros(cls, d_qk: int, d_hv: int, batch_shape=(), dtype=np.float64) -> "CellState":
        batch_shape = tuple(batch_shape)
        return cls(
            C=np.zeros(batch_shape + (d_qk, d_hv), dtype=dtype),
            n=np.zeros(batch_shape + (d_qk,), dtype=dtype),
            m=np.zeros(batch_shape, dtype=dtype),
        )

    def copy(self) -> "CellState":
        return CellState(self.C.copy(), self.n.copy(), np.array(self.m, copy=True))

    @property
    def nbytes(self) -> int:
        return self.C.nbytes + self.n.nbytes + np.asarray(self.m).nbytes


@dataclass
class StepInput:
    q: np.ndarray
    k: np.ndarray
    v: np.ndarray
    i_pre: float | np.ndarray
    f_pre: float | np.ndarray


def reset_state(state: CellState) -> CellState:
    return CellState(np.zeros_like(state.C), np.zeros_like(state.n), np.zeros_like(state.m))


def _check_dims(q, k, v, state: CellState) -> None:
    dk, dv = state.C.shape[-2:]
    if q.shape[-1] != dk or k.shape[-1] != dk or v.shape[-1] != dv or state.n.shape[-1] != dk:
        raise ValueError(
            f"dimension mismatch: q {q.shape}, k {k.shape}, v {v.shape}, C {state.C.shape}"
        )


def _step(q, k, v, i_pre, f_pre, C, n, m):
    dk = q.shape[-1]
    m_new = np.maximum(logsigmoid(f_pre) + m, i_pre)
    f = np.exp(logsigmoid(f_pre) + m - m_new)
    i = np.exp(i_pre - m_new)
    C_new = f[..., None, None] * C + i[..., None, None] * (k[..., :, None] * v[..., None, :])
    n_new = f[..., None] * n + i[..., None] * k
    qs = q / math.sqrt(dk)
    num = np.einsum("...kv,...k->...v", C_new, qs)
    den = np.maximum(np.abs(np.einsum("...k,...k->...", n_new, qs)), np.exp(-m_new))
    h = num / den[..., None]
    return h, C_new, n_new, m_new


def cell_step(s: StepInput, state: CellState) -> tuple[np.ndarray, CellState]:
    """Advance the cell by one token; returns ``(h_tilde, new_state)``."""
    q, k, v = (np.asarray(a) for a in (s.q, s.k, s.v))
    _check_dims(q, k, v, state)
    h, C, n, m = _step(
        q, k, v, np.asarray(s.i_pre, dtype=q.dtype), np.asarray(s.f_pre, dtype=q.dtype),
        state.C, state.n, state.m,
    )
    check_finite("cell output", h)
    return h, CellState(C, n, m)


@dataclass
class RecurrentCache:
    q: np.ndarray
    k: np.ndarray
    v: np.ndarray
    i_pre: np.ndarray
    f_pre: np.ndarray
    H: np.ndarray
    Cs: np.ndarray  # states after each step, (..., T, dk, dv)
    ns: np.ndarray
    ms: np.ndarray
    init: CellState


def recurrent_forward_with_cache(q, k, v, i_pre, f_pre, state: CellState | None = None):
    """Fold :func:`cell_step` over the time axis, keeping every state for BPTT."""
    q, k, v = np.asarray(q), np.asarray(k), np.asarray(v)
    i_pre, f_pre = np.asarray(i_pre, dtype=q.dtype), np.asarray(f_pre, dtype=q.dtype)
    dk, dv = q.shape[-1], v.shape[-1]
    if state is None:
        state = CellState.zeros(dk, dv, q.shape[:-2], q.dtype)
    _check_dims(q, k, v, state)
    T = q.shape[-2]
    batch = np.broadcast_shapes(q.shape[:-2], state.m.shape)
    H = np.empty(batch + (T, dv), dtype=q.dtype)
    Cs = np.empty(batch + (T, dk, dv), dtype=q.dtype)
    ns = np.empty(batch + (T, dk), dtype=q.dtype)
    ms = np.empty(batch + (T,), dtype=q.dtype)
    C, n, m = state.C, state.n, state.m
    for t in range(T):
        h, C, n, m = _step(
            q[..., t, :], k[..., t, :], v[..., t, :], i_pre[..., t], f_pre[..., t], C, n, m
        )
        H[..., t, :] = h
        Cs[..., t, :, :] = C
        ns[..., t, :] = n
        ms[..., t] = m
    check_finite("cell output", H)
    final = CellState(C, n, m) if T else state
    return H, final, RecurrentCache(q, k, v, i_pre, f_pre, H, Cs, ns, ms, state)


def recurrent_forward(q, k, v, i_pre, f_pre, state: CellState | None = None):
    """Sequential reference mode; returns ``(H_tilde (..., T, d_hv), final_state)``."""
    H, final, _ = recurrent_forward_with_cache(q, k, v, i_pre, f_pre, state)
    return H, final


def stack_steps(steps: list[StepInput]):
    """Turn a list of :class:`StepInput` into the array arguments of :func:`recurrent_forward`."""
    return (
        np.stack([s.q for s in steps], axis=-2),
        np.stack([s.k for s in steps], axis=-2),
        np.stack([s.v for s in steps], axis=-2),
        np.stack([np.asarray(s.i_pre) for s in steps], axis=-1),
        np.stack([np.asarray(s.f_pre) for s in steps], axis=-1),
    )


def initial_m_grad(dC0, dn0, init: CellState):
    # C0, n0 are stored divided by exp(m0)
    return np.sum(dC0 * init.C, axis=(-2, -1)) + np.sum(dn0 * init.n, axis=-1)


def recurrent_backward(dH, cache: RecurrentCache, dstate: CellState | None = None):
    """Backprop-through-time of :func:`recurrent_forward`.

    ``dstate`` optionally carries gradients w.r.t. the final ``C`` and ``n``.
    Returns a dict with ``q, k, v, i_pre, f_pre`` and ``C0, n0, m0``.
    """
    c = cache
    T = c.q.shape[-2]
    dk = c.q.shape[-1]
    scale = 1.0 / math.sqrt(dk)
    batch = c.H.shape[:-2]
    dq = np.zeros(batch + c.q.shape[-2:], dtype=c.q.dtype)
    dkk = np.zeros(batch + c.k.shape[-2:], dtype=c.q.dtype)
    dv = np.zeros(batch + c.v.shape[-2:], dtype=c.q.dtype)
    di = np.zeros(batch + (T,), dtype=c.q.dtype)
    df = np.zeros(batch + (T,), dtype=c.q.dtype)
    dC = np.zeros(batch + c.init.C.shape[-2:], dtype=c.q.dtype)
    dn = np.zeros(batch + c.init.n.shape[-1:], dtype=c.q.dtype)
    if dstate is not None:
        dC = dC + dstate.C
        dn = dn + dstate.n
    for t in range(T - 1, -1, -1):
        q, k, v = c.q[..., t, :], c.k[..., t, :], c.v[..., t, :]
        C, n, m = c.Cs[..., t, :, :], c.ns[..., t, :], c.ms[..., t]
        if t > 0:
            C0, n0, m0 = c.Cs[..., t - 1, :, :], c.ns[..., t - 1, :], c.ms[..., t - 1]
        else:
            C0, n0, m0 = c.init.C, c.init.n, c.init.m
        a = logsigmoid(c.f_pre[..., t])
        fg = np.exp(a + m0 - m)
        ig = np.exp(c.i_pre[..., t] - m)
        qs = q * scale
        raw = np.einsum("...k,...k->...", n, qs)
        floor = np.exp(-m)
        den = np.maximum(np.abs(raw), floor)
        h = c.H[..., t, :]
        dh = dH[..., t, :]
        dnum = dh / den[..., None]
        dden = -np.sum(dh * h, axis=-1) / den
        draw = dden * np.sign(raw) * (np.abs(raw) >= floor)
        dC = dC + qs[..., :, None] * dnum[..., None, :]
        dn = dn + draw[..., None] * qs
        dqs = np.einsum("...kv,...v->...k", C, dnum) + draw[..., None] * n
        dq[..., t, :] = dqs * scale
        dfg = np.sum(dC * C0, axis=(-2, -1)) + np.sum(dn * n0, axis=-1)
        dCv = np.einsum("...kv,...v->...k", dC, v)
        dig = np.sum(dCv * k, axis=-1) + np.sum(dn * k, axis=-1)
        dkk[..., t, :] = ig[..., None] * (dCv + dn)
        dv[..., t, :] = ig[..., None] * np.einsum("...kv,...k->...v", dC, k)
        di[..., t] = dig * ig
        # d logsigmoid(x)/dx = sigmoid(-x)
        df[..., t] = dfg * fg * sigmoid(-c.f_pre[..., t])
        dC = fg[..., None, None] * dC
        dn = fg[..., None] * dn
    return {
        "q": dq, "k": dkk, "v": dv, "i_pre": di, "f_pre": df,
        "C0": dC, "n0": dn, "m0": initial_m_grad(dC, dn, c.init),
    }
