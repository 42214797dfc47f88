import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from xlstm_desk.cell import CellState, recurrent_backward, recurrent_forward, recurrent_forward_with_cache
from xlstm_desk.chunkwise import (
    ChunkConfig, MacCounter, chunkwise_backward, chunkwise_forward, chunkwise_forward_with_cache, segsum,
)

from conftest import numeric_grad, rel_err


def capped_seq(rng, T, dk=4, dv=6, batch=(), dtype=np.float64):
    cap = lambda x: 15 * np.tanh(x / 15)
    return tuple(a.astype(dtype) for a in (
        rng.normal(size=batch + (T, dk)), rng.normal(size=batch + (T, dk)), rng.normal(size=batch + (T, dv)),
        cap(rng.normal(scale=6, size=batch + (T,))), cap(rng.normal(loc=3, scale=4, size=batch + (T,))),
    ))


def start_state(rng, dk=4, dv=6, batch=()):
    return CellState(rng.normal(size=batch + (dk, dv)) * 0.3, np.abs(rng.normal(size=batch + (dk,))),
                     rng.uniform(-1, 2, batch))


def max_state_diff(a: CellState, b: CellState):
    return max(np.max(np.abs(a.C - b.C)), np.max(np.abs(a.n - b.n)), np.max(np.abs(a.m - b.m)))


def test_segsum_matches_definition(rng):
    a = rng.normal(size=6)
    S = segsum(a)
    for i in range(6):
        for j in range(6):
            expect = a[j + 1:i + 1].sum() if i >= j else -np.inf
            assert S[i, j] == pytest.approx(expect, abs=1e-14) if i >= j else S[i, j] == -np.inf


def test_segsum_with_neg_inf_has_no_nan():
    S = segsum(np.array([0.0, -np.inf, -0.5, -0.1]))
    assert not np.any(np.isnan(S))


def test_single_chunk_matches_recurrent(rng):
    args = capped_seq(rng, 40)
    H, _ = chunkwise_forward(*args, chunk_size=40)
    Hr, _ = recurrent_forward(*args)
    assert np.max(np.abs(H - Hr)) < 1e-12


def test_unit_chunks_match_recurrent(rng):
    # a different summation order than the per-token fold, so equality is to rounding, not bitwise
    args = capped_seq(rng, 33)
    H, fin = chunkwise_forward(*args, chunk_size=1)
    Hr, finr = recurrent_forward(*args)
    assert np.max(np.abs(H - Hr)) < 1e-13
    assert max_state_diff(fin, finr) < 1e-13


def test_sixteen_token_chunks_float64(rng):
    args = capped_seq(rng, 64)
    H, _ = chunkwise_forward(*args, chunk_size=16)
    Hr, _ = recurrent_forward(*args)
    assert np.max(np.abs(H - Hr)) < 1e-11


@pytest.mark.xfail(strict=True, reason=(
    "standard-normal q/k give outputs up to |h| ~ 25 through a near-cancelling normalizer; "
    "float32 rounding in the recurrent oracle alone is ~5e-5, so an absolute 1e-5 bound is out of reach"))
def test_sixteen_token_chunks_float32_absolute(rng):
    args = capped_seq(rng, 64, dtype=np.float32)
    H, _ = chunkwise_forward(*args, chunk_size=16)
    Hr, _ = recurrent_forward(*args)
    assert H.dtype == np.float32
    assert np.max(np.abs(H - Hr)) < 1e-5


@pytest.mark.parametrize("seed", range(5))
def test_float32_chunkwise_no_worse_than_float32_recurrent(seed):
    rng = np.random.default_rng(seed)
    a64 = capped_seq(rng, 64)
    a32 = tuple(a.astype(np.float32) for a in a64)
    ref, _ = recurrent_forward(*a64)
    H, _ = chunkwise_forward(*a32, chunk_size=16)
    Hr, _ = recurrent_forward(*a32)
    assert H.dtype == np.float32
    err_chunk = np.max(np.abs(H - ref) / (1.0 + np.abs(ref)))
    err_rec = np.max(np.abs(Hr - ref) / (1.0 + np.abs(ref)))
    assert err_chunk <= 2 * err_rec + 1e-6


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 128), st.sampled_from([1, 2, 16, 64, "T"]), st.integers(0, 10_000))
def test_mode_equivalence(T, L, seed):
    # Random q/k occasionally make the normalizer nearly cancel and push |h| to ~1e3, where
    # float64 rounding in the recurrent oracle itself exceeds 1e-10; the bound scales with |h| there.
    rng = np.random.default_rng(seed)
    args = capped_seq(rng, T)
    state = start_state(rng)
    H, fin = chunkwise_forward(*args, state=state, chunk_size=T if L == "T" else L)
    Hr, finr = recurrent_forward(*args, state)
    assert np.max(np.abs(H - Hr) / np.maximum(1.0, np.abs(Hr))) < 1e-10
    assert max_state_diff(fin, finr) < 1e-10


def test_reset_sentinels_inside_chunks(rng):
    q, k, v, i, f = capped_seq(rng, 50, batch=(2,))
    f[0, [0, 7, 16, 31]] = -np.inf
    f[1, 49] = -np.inf
    for L in (1, 4, 16, 64):
        H, fin = chunkwise_forward(q, k, v, i, f, chunk_size=L)
        Hr, finr = recurrent_forward(q, k, v, i, f)
        assert np.max(np.abs(H - Hr)) < 1e-10 and max_state_diff(fin, finr) < 1e-10


def test_chunk_larger_than_sequence(rng):
    args = capped_seq(rng, 5)
    H, _ = chunkwise_forward(*args, chunk_size=64)
    assert H.shape == (5, 6)
    assert np.max(np.abs(H - recurrent_forward(*args)[0])) < 1e-12


def test_empty_sequence(rng):
    args = capped_seq(rng, 0)
    state = start_state(rng)
    H, fin = chunkwise_forward(*args, state=state)
    assert H.shape == (0, 6) and fin is state


def test_invalid_chunk_size():
    with pytest.raises(ValueError):
        ChunkConfig(0)


def test_dimension_mismatch(rng):
    q, k, v, i, f = capped_seq(rng, 8)
    with pytest.raises(ValueError):
        chunkwise_forward(q, k[:, :3], v, i, f)
    with pytest.raises(ValueError):
        chunkwise_forward(q, k, v, i[:5], f)


def test_causality(rng):
    q, k, v, i, f = capped_seq(rng, 40)
    H, _ = chunkwise_forward(q, k, v, i, f, chunk_size=16)
    t = 21
    q2, k2, v2, i2, f2 = (a.copy() for a in (q, k, v, i, f))
    k2[t] += 1.0
    v2[t] -= 2.0
    i2[t] += 3.0
    f2[t] -= 1.0
    H2, _ = chunkwise_forward(q2, k2, v2, i2, f2, chunk_size=16)
    assert np.array_equal(H[:t], H2[:t])
    assert np.max(np.abs(H[t:] - H2[t:])) > 1e-6


def test_boundary_states_equal_recurrent_states(rng):
    args = capped_seq(rng, 64)
    state = start_state(rng)
    _, _, cache = chunkwise_forward_with_cache(*args, state=state, chunk_size=16)
    _, _, rc = recurrent_forward_with_cache(*args, state)
    for c, b in enumerate(cache.boundary):
        t = 16 * (c + 1) - 1
        ref = CellState(rc.Cs[t], rc.ns[t], rc.ms[t])
        assert max_state_diff(b, ref) < 1e-10


def test_mac_counter_scaling(rng):
    dk, dv = 4, 6

    def count(T, L):
        ctr = MacCounter()
        chunkwise_forward(*capped_seq(rng, T, dk, dv), chunk_size=L, counter=ctr)
        return ctr

    for T, L in ((64, 8), (64, 16), (128, 16), (96, 32)):
        c = count(T, L)
        nc = T // L
        assert c.intra == nc * L * L * (dk + dv)
        assert c.inter == 2 * nc * L * dk * dv
    # intra grows with L at fixed T, inter does not
    a, b = count(128, 8), count(128, 32)
    assert b.intra == 4 * a.intra and b.inter == a.inter


def test_backward_matches_bptt(rng):
    args = capped_seq(rng, 8, dk=4, dv=4)
    state = start_state(rng, 4, 4)
    up = rng.normal(size=(8, 4))
    _, _, cc = chunkwise_forward_with_cache(*args, state=state, chunk_size=4)
    _, _, rc = recurrent_forward_with_cache(*args, state)
    gc, gr = chunkwise_backward(up, cc), recurrent_backward(up, rc)
    for name in ("q", "k", "v", "i_pre", "f_pre", "C0", "n0", "m0"):
        assert rel_err(gc[name], gr[name]) < 1e-6, name


@pytest.mark.parametrize("T,L", [(8, 4), (11, 4), (9, 16), (6, 1)])
def test_backward_matches_finite_differences(rng, T, L):
    q, k, v, i, f = capped_seq(rng, T, dk=4, dv=4)
    f[T // 2] = -np.inf  # a reset sentinel inside the sequence
    state = start_state(rng, 4, 4)
    up = rng.normal(size=(T, 4))

    def loss():
        return np.sum(up * chunkwise_forward(q, k, v, i, f, state=state, chunk_size=L)[0])

    _, _, cache = chunkwise_forward_with_cache(q, k, v, i, f, state=state, chunk_size=L)
    g = chunkwise_backward(up, cache)
    assert np.all(np.isfinite(g["f_pre"]))
    finite_f = np.isfinite(f)
    for name, arr in (("q", q), ("k", k), ("v", v), ("i_pre", i), ("C0", state.C), ("n0", state.n)):
        assert rel_err(g[name], numeric_grad(loss, arr)) < 1e-4, name
    num_f = numeric_grad(loss, f)
    assert rel_err(g["f_pre"][finite_f], num_f[finite_f]) < 1e-4


def test_zero_upstream_gives_zero_gradients(rng):
    args = capped_seq(rng, 12)
    _, _, cache = chunkwise_forward_with_cache(*args, chunk_size=4)
    g = chunkwise_backward(np.zeros((12, 6)), cache)
    for name in ("q", "k", "v", "i_pre", "f_pre"):
        assert np.all(g[name] == 0), name


def test_gate_gradient_is_causal(rng):
    args = capped_seq(rng, 16)
    _, _, cache = chunkwise_forward_with_cache(*args, chunk_size=4)
    up = rng.normal(size=(16, 6))
    up[9:] = 0.0
    g = chunkwise_backward(up, cache)
    assert np.all(g["f_pre"][9:] == 0) and np.all(g["i_pre"][9:] == 0)


def test_batched_inputs(rng):
    args = capped_seq(rng, 20, batch=(2, 3))
    H, _ = chunkwise_forward(*args, chunk_size=8)
    Hr, _ = recurrent_forward(*args)
    assert H.shape == (2, 3, 20, 6) and np.max(np.abs(H - Hr)) < 1e-10
