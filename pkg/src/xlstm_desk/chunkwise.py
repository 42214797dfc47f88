"""Chunkwise-parallel mLSTM: the training-mode form of the recurrence.

The sequence is cut into chunks of ``chunk_size`` tokens. Memory states
``(C, n, m)`` are materialized only at chunk boundaries (inter-chunk
recurrence); inside a chunk the outputs come from a causally masked,
gate-decayed ``L x L`` matrix (intra-chunk parallel part). Both parts share
the per-position max state, and the ``max(|n.q|, exp(-m))`` denominator is
applied once when the two contributions are combined.

Log-forget decays are built with a segment sum (cumulative sums over a
masked matrix) rather than differences of prefix sums, so ``-inf`` reset
sentinels never produce ``inf - inf``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .cell import CellState, initial_m_grad
from .numerics import check_finite, logsigmoid, sigmoid

DEFAULT_CHUNK_SIZE = 64


@dataclass(frozen=True)
class ChunkConfig:
    chunk_size: int = DEFAULT_CHUNK_SIZE

    def __post_init__(self):
        if int(self.chunk_size) < 1:
            raise ValueError(f"chunk_size must be >= 1, got {self.chunk_size}")


@dataclass
class MacCounter:
    """Counts multiply-accumulates of the chunkwise matmuls, split by part."""

    intra: int = 0
    inter: int = 0

    def add(self, part: str, n: int) -> None:
        setattr(self, part, getattr(self, part) + int(n))


def segsum(a: np.ndarray) -> np.ndarray:
    """``S[..., i, j] = sum(a[..., j+1 : i+1])`` for ``i >= j``, ``-inf`` above the diagonal."""
    L = a.shape[-1]
    rows = np.broadcast_to(a[..., :, None], a.shape + (L,))
    below = np.tril(np.ones((L, L), dtype=bool), k=-1)
    S = np.cumsum(np.where(below, rows, 0.0), axis=-2)
    return np.where(np.tril(np.ones((L, L), dtype=bool)), S, -np.inf)


def _segsum_backward(dS: np.ndarray) -> np.ndarray:
    # da[k] = sum_{i >= k, j < k} dS[i, j]
    L = dS.shape[-1]
    excl = np.cumsum(dS, axis=-1) - dS  # sum_{j < k} dS[i, j] at column k
    lower = np.tril(np.ones((L, L), dtype=bool))
    return np.sum(np.where(lower, excl, 0.0), axis=-2)


@dataclass
class ChunkCache:
    chunk_size: int
    T: int
    q: np.ndarray  # padded & chunked, (..., NC, L, dk)
    k: np.ndarray
    v: np.ndarray
    f_pre: np.ndarray  # (..., NC, L)
    i_pre: np.ndarray
    a: np.ndarray
    S: np.ndarray
    D: np.ndarray  # (..., NC, L, L)
    g: np.ndarray  # (..., NC, L) decay from chunk start, stabilized
    m: np.ndarray  # (..., NC, L)
    P: np.ndarray  # q k^T, (..., NC, L, L)
    A: np.ndarray  # P * D
    raw: np.ndarray  # signed denominator before the floor
    den: np.ndarray
    H: np.ndarray  # (..., NC, L, dv)
    C_prev: np.ndarray  # (..., NC, dk, dv) boundary states entering each chunk
    n_prev: np.ndarray
    m_prev: np.ndarray
    init: CellState
    boundary: list = field(default_factory=list)


def _pad_and_chunk(q, k, v, i_pre, f_pre, L):
    T = q.shape[-2]
    nc = max(1, -(-T // L))
    pad = nc * L - T
    if pad:
        def padr(x, val, axis):
            width = [(0, 0)] * x.ndim
            width[axis] = (0, pad)
            return np.pad(x, width, constant_values=val)
        q, k, v = padr(q, 0.0, -2), padr(k, 0.0, -2), padr(v, 0.0, -2)
        # padded tokens write nothing (i = -inf) and keep the state (log f = 0)
        i_pre = padr(i_pre, -np.inf, -1)
        f_pre = padr(f_pre, np.inf, -1)

    def chunk(x, vec):
        if vec:
            return x.reshape(x.shape[:-1] + (nc, L))
        return x.reshape(x.shape[:-2] + (nc, L, x.shape[-1]))

    return (chunk(q, False), chunk(k, False), chunk(v, False),
            chunk(i_pre, True), chunk(f_pre, True), nc)


def chunkwise_forward_with_cache(
    q, k, v, i_pre, f_pre, state: CellState | None = None,
    chunk_size: int | ChunkConfig = DEFAULT_CHUNK_SIZE, counter: MacCounter | None = None,
):
    if isinstance(chunk_size, ChunkConfig):
        chunk_size = chunk_size.chunk_size
    L = int(ChunkConfig(int(chunk_size)).chunk_size)
    q, k, v = np.asarray(q), np.asarray(k), np.asarray(v)
    dtype = q.dtype
    i_pre, f_pre = np.asarray(i_pre, dtype=dtype), np.asarray(f_pre, dtype=dtype)
    T, dk, dv = q.shape[-2], q.shape[-1], v.shape[-1]
    if k.shape[-1] != dk or k.shape[-2] != T or v.shape[-2] != T:
        raise ValueError(f"dimension mismatch: q {q.shape}, k {k.shape}, v {v.shape}")
    if i_pre.shape[-1] != T or f_pre.shape[-1] != T:
        raise ValueError("gate pre-activations must have one entry per time step")
    batch = np.broadcast_shapes(q.shape[:-2], k.shape[:-2], v.shape[:-2], i_pre.shape[:-1], f_pre.shape[:-1])
    if state is None:
        state = CellState.zeros(dk, dv, batch, dtype)
    if state.C.shape[-2:] != (dk, dv) or state.n.shape[-1] != dk:
        raise ValueError(f"state shape {state.C.shape} does not match q/v dims ({dk}, {dv})")
    batch = np.broadcast_shapes(batch, state.m.shape)
    if T == 0:
        H = np.zeros(batch + (0, dv), dtype=dtype)
        return H, state, None

    qc, kc, vc, ic, fc, nc = _pad_and_chunk(q, k, v, i_pre, f_pre, L)
    scale = 1.0 / math.sqrt(dk)
    qs = qc * scale

    # chunkwise gates
    a = logsigmoid(fc)
    b = np.cumsum(a, axis=-1)
    S = segsum(a)
    logD = S + ic[..., None, :]
    rowmax = np.max(logD, axis=-1)
    # decay of each position to the chunk end, and that row's max
    w_log = logD[..., -1, :]
    w_max = rowmax[..., -1]

    # inter-chunk recurrence over boundary states
    C = np.broadcast_to(state.C, batch + (dk, dv))
    n = np.broadcast_to(state.n, batch + (dk,))
    m = np.broadcast_to(state.m, batch)
    C_prev = np.empty(batch + (nc, dk, dv), dtype=dtype)
    n_prev = np.empty(batch + (nc, dk), dtype=dtype)
    m_prev = np.empty(batch + (nc,), dtype=dtype)
    boundary = []
    for c in range(nc):
        C_prev[..., c, :, :] = C
        n_prev[..., c, :] = n
        m_prev[..., c] = m
        bL = b[..., c, -1]
        m_new = np.maximum(bL + m, w_max[..., c])
        gL = np.exp(bL + m - m_new)
        w = np.exp(w_log[..., c, :] - m_new[..., None])
        kw = kc[..., c, :, :] * w[..., None]
        C = gL[..., None, None] * C + np.einsum("...lk,...lv->...kv", kw, vc[..., c, :, :])
        n = gL[..., None] * n + np.sum(kw, axis=-2)
        m = m_new
        boundary.append(CellState(C, n, m))
    if counter is not None:
        counter.add("inter", int(np.prod(batch)) * nc * L * dk * dv)

    # intra-chunk parallel part and output combination
    mpos = np.maximum(b + m_prev[..., None], rowmax)
    D = np.exp(logD - mpos[..., None])
    g = np.exp(b + m_prev[..., None] - mpos)
    P = np.einsum("...ik,...jk->...ij", qs, kc)
    A = P * D
    num = g[..., None] * np.einsum("...ik,...kv->...iv", qs, C_prev) + np.einsum("...ij,...jv->...iv", A, vc)
    raw = g * np.einsum("...ik,...k->...i", qs, n_prev) + np.sum(A, axis=-1)
    den = np.maximum(np.abs(raw), np.exp(-mpos))
    Hc = num / den[..., None]
    if counter is not None:
        nb = int(np.prod(batch)) * nc
        counter.add("intra", nb * L * L * (dk + dv))
        counter.add("inter", nb * L * dk * dv)

    H = Hc.reshape(batch + (nc * L, dv))[..., :T, :]
    check_finite("chunkwise output", H)
    final = CellState(C, n, m)
    cache = ChunkCache(
        L, T, qc, kc, vc, fc, ic, a, S, D, g, mpos, P, A, raw, den, Hc,
        C_prev, n_prev, m_prev, state, boundary,
    )
    return H, final, cache


def chunkwise_forward(q, k, v, i_pre, f_pre, state: CellState | None = None,
                      chunk_size: int | ChunkConfig = DEFAULT_CHUNK_SIZE,
                      counter: MacCounter | None = None):
    """Chunkwise-parallel mLSTM; returns ``(H_tilde (..., T, d_hv), final_state)``.

    Numerically equivalent to :func:`xlstm_desk.cell.recurrent_forward`.
    A ``chunk_size`` larger than ``T`` gives one padded chunk.
    """
    H, final, _ = chunkwise_forward_with_cache(q, k, v, i_pre, f_pre, state, chunk_size, counter)
    return H, final


def chunkwise_backward(dH, cache: ChunkCache, dstate: CellState | None = None):
    """Gradients of :func:`chunkwise_forward`.

    Returns a dict with ``q, k, v, i_pre, f_pre`` (unpadded) and the initial
    state gradients ``C0, n0, m0``.
    """
    c = cache
    if c is None:
        raise ValueError("no cache: forward was called on an empty sequence")
    L, T = c.chunk_size, c.T
    nc = c.q.shape[-3]
    dk = c.q.shape[-1]
    scale = 1.0 / math.sqrt(dk)
    batch = c.H.shape[:-3]
    dtype = c.H.dtype

    dHc = np.zeros(batch + (nc * L, c.v.shape[-1]), dtype=dtype)
    dHc[..., :T, :] = dH
    dHc = dHc.reshape(batch + (nc, L, c.v.shape[-1]))
    qs = c.q * scale

    dnum = dHc / c.den[..., None]
    dden = -np.sum(dHc * c.H, axis=-1) / c.den
    floor = np.exp(-c.m)
    draw = dden * np.sign(c.raw) * (np.abs(c.raw) >= floor)

    qC = np.einsum("...ik,...kv->...iv", qs, c.C_prev)
    qn = np.einsum("...ik,...k->...i", qs, c.n_prev)
    dg = np.sum(dnum * qC, axis=-1) + draw * qn
    dqs = c.g[..., None] * (np.einsum("...iv,...kv->...ik", dnum, c.C_prev) + draw[..., None] * c.n_prev[..., None, :])
    # gradients into the state entering each chunk from the output readout
    dC_read = np.einsum("...ik,...iv->...kv", c.g[..., None] * qs, dnum)
    dn_read = np.einsum("...ik,...i->...k", qs, c.g * draw)
    dA = np.einsum("...iv,...jv->...ij", dnum, c.v) + draw[..., None]
    dv = np.einsum("...ij,...iv->...jv", c.A, dnum)

    dP = dA * c.D
    dD = dA * c.P
    dqs = dqs + np.einsum("...ij,...jk->...ik", dP, c.k)
    dk_ = np.einsum("...ij,...ik->...jk", dP, qs)

    # reverse inter-chunk recurrence
    dC = np.zeros(batch + (dk, c.v.shape[-1]), dtype=dtype)
    dn = np.zeros(batch + (dk,), dtype=dtype)
    if dstate is not None:
        dC = dC + dstate.C
        dn = dn + dstate.n
    dgL = np.zeros(batch + (nc,), dtype=dtype)
    dw = np.zeros(batch + (nc, L), dtype=dtype)
    for ci in range(nc - 1, -1, -1):
        # the last row of the chunk carries the boundary-state weights
        gL = c.g[..., ci, -1]
        w = c.D[..., ci, -1, :]
        kk, vv = c.k[..., ci, :, :], c.v[..., ci, :, :]
        kdC = np.einsum("...lk,...kv->...lv", kk, dC)
        dw[..., ci, :] = np.sum(kdC * vv, axis=-1) + np.einsum("...lk,...k->...l", kk, dn)
        dk_[..., ci, :, :] += w[..., None] * (np.einsum("...lv,...kv->...lk", vv, dC) + dn[..., None, :])
        dv[..., ci, :, :] += w[..., None] * kdC
        Cp, np_ = c.C_prev[..., ci, :, :], c.n_prev[..., ci, :]
        dgL[..., ci] = (np.sum(dC * Cp, axis=(-2, -1)) + np.sum(dn * np_, axis=-1)) * gL
        dw[..., ci, :] *= w
        dC = gL[..., None, None] * dC + dC_read[..., ci, :, :]
        dn = gL[..., None] * dn + dn_read[..., ci, :]

    # back through the decays; m is held constant
    dlogD = dD * c.D
    dlogD[..., -1, :] += dw
    db = dg * c.g
    db[..., -1] += dgL
    di = np.sum(dlogD, axis=-2)
    da = _segsum_backward(dlogD) + np.flip(np.cumsum(np.flip(db, -1), axis=-1), -1)
    df = da * sigmoid(-c.f_pre)

    def unchunk(x, vec):
        if vec:
            return x.reshape(batch + (nc * L,))[..., :T]
        return x.reshape(batch + (nc * L, x.shape[-1]))[..., :T, :]

    return {
        "q": unchunk(dqs * scale, False), "k": unchunk(dk_, False), "v": unchunk(dv, False),
        "i_pre": unchunk(di, True), "f_pre": unchunk(df, True),
        "C0": dC, "n0": dn, "m0": initial_m_grad(dC, dn, c.init),
    }
