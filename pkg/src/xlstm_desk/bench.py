"""Desk-scale inference benchmarks: decode throughput, time to first token,
prefill throughput and memory, for the mLSTM model and the attention comparator.

Timings use ``time.perf_counter`` and report the median over ``repeats``
measured runs after ``warmup`` discarded runs.
"""

from __future__ import annotations

import copy
import csv
import gc
import hashlib
import io
import statistics
import time
import tracemalloc
from dataclasses import asdict, dataclass

import numpy as np

from .analysis import kv_bytes_per_token, state_size_bytes
from .attention import KVCache, attention_model_forward, init_attention_params
from .model import ModelConfig, ModelState, init_params, model_forward

MODELS = ("mlstm", "attention")


def bench_config(**overrides) -> ModelConfig:
    """Default benchmark model: d_model 512, 8 blocks, 4 heads, float32."""
    kw = dict(vocab_size=257, num_blocks=8, d_model=512, num_heads=4, precision="float32")
    kw.update(overrides)
    return ModelConfig(**kw)


@dataclass
class BenchResult:
    scenario: str
    config_id: str
    model: str
    prefill_len: int
    gen_len: int
    batch: int
    wall_time: float
    tokens_per_sec: float
    per_token_time: float
    prefill_time: float
    peak_state_bytes: int
    peak_alloc_bytes: int
    status: str = "ok"
    output_digest: str = ""


def config_id(cfg: ModelConfig) -> str:
    return f"b{cfg.num_blocks}-d{cfg.d_model}-h{cfg.num_heads}-{cfg.precision}"


def _digest(tokens) -> str:
    return hashlib.sha1(np.asarray(tokens, dtype=np.int64).tobytes()).hexdigest()[:16]


class Runner:
    """Uniform prefill/decode interface over the two model families."""

    def __init__(self, kind: str, cfg: ModelConfig, seed: int = 0):
        if kind not in MODELS:
            raise ValueError(f"model must be one of {MODELS}")
        self.kind, self.cfg = kind, cfg
        self.params = init_params(cfg, seed) if kind == "mlstm" else init_attention_params(cfg, seed)

    def prefill(self, tokens: np.ndarray):
        """``tokens (B, T)``; returns ``(state, last_logits (B, V))``."""
        if self.kind == "mlstm":
            logits, state = model_forward(tokens, self.params, self.cfg, "chunkwise")
            return state, logits[:, -1]
        kv = KVCache()
        logits = attention_model_forward(tokens, self.params, self.cfg, kv)
        return kv, logits[:, -1]

    def step(self, state, tokens: np.ndarray):
        """Feed one token per batch row; returns ``(state, logits (B, V))``."""
        if self.kind == "mlstm":
            logits, state = model_forward(tokens[:, None], self.params, self.cfg, "recurrent", state)
            return state, logits[:, -1]
        logits = attention_model_forward(tokens[:, None], self.params, self.cfg, state)
        return state, logits[:, -1]

    def decode(self, state, last_logits, n: int):
        """Greedy decode ``n`` tokens; returns ``(tokens (B, n), state)``. Only tokens are retained."""
        out = np.empty((last_logits.shape[0], n), dtype=np.int64)
        for i in range(n):
            tok = np.argmax(last_logits, axis=-1)
            out[:, i] = tok
            if i + 1 < n:
                state, last_logits = self.step(state, tok)
        return out, state

    def state_bytes(self, state) -> int:
        return state.nbytes

    def analytic_state_bytes(self, context_len: int, batch: int = 1) -> int:
        if self.kind == "mlstm":
            return state_size_bytes(self.cfg) * batch
        return kv_bytes_per_token(self.cfg) * context_len * batch


def _prompt(cfg: ModelConfig, length: int, batch: int, seed: int) -> np.ndarray:
    # a zero-length prefill still needs one start token
    rng = np.random.default_rng(seed)
    return rng.integers(0, cfg.vocab_size, (batch, max(1, length)))


def _copy_state(state):
    return state.copy() if isinstance(state, ModelState) else copy.deepcopy(state)


def _timed(fn):
    # collector pauses would land on whichever call happens to trigger them
    enabled = gc.isenabled()
    gc.disable()
    try:
        t0 = time.perf_counter()
        out = fn()
        return time.perf_counter() - t0, out
    finally:
        if enabled:
            gc.enable()


def bench_generate(cfg: ModelConfig, prefill_lens, gen_len: int, repeats: int = 5, warmup: int = 2,
                   models=MODELS, batch: int = 1, seed: int = 0) -> list[BenchResult]:
    """Prefill once per point, then time ``gen_len`` greedy decode steps (median of repeats).

    Repeats are interleaved across prefill lengths so that slow drift in machine
    speed affects every point alike instead of biasing the comparison.
    """
    results = []
    for kind in models:
        runner = Runner(kind, cfg, seed)
        points = []
        for plen in prefill_lens:
            try:
                prompt = _prompt(cfg, plen, batch, seed)
                t_pre, (state, last) = _timed(lambda: runner.prefill(prompt))
                points.append(dict(plen=plen, prompt=prompt, t_pre=t_pre, state=state, last=last,
                                   times=[], toks=None))
            except MemoryError:
                points.append(dict(plen=plen, oom=True))
        for r in range(warmup + repeats):
            for pt in points:
                if pt.get("oom"):
                    continue
                try:
                    st = _copy_state(pt["state"])
                    dt, (pt["toks"], _) = _timed(lambda: runner.decode(st, pt["last"], gen_len))
                except MemoryError:
                    pt["oom"] = True
                    continue
                if r >= warmup:
                    pt["times"].append(dt)
        for pt in points:
            if pt.get("oom"):
                results.append(BenchResult("generate", config_id(cfg), kind, pt["plen"], gen_len, batch,
                                           0.0, 0.0, 0.0, 0.0, 0, 0, status="oom"))
                continue
            wall = statistics.median(pt["times"])
            results.append(BenchResult(
                "generate", config_id(cfg), kind, pt["plen"], gen_len, batch, wall,
                (gen_len * batch / wall) if gen_len and wall > 0 else 0.0,
                wall / gen_len if gen_len else 0.0, pt["t_pre"],
                runner.analytic_state_bytes(pt["prompt"].shape[1] + gen_len, batch), 0,
                output_digest=_digest(pt["toks"]),
            ))
    return results


def bench_ttft(cfg: ModelConfig, prefill_lens, first_n=(1, 100), repeats: int = 5, warmup: int = 2,
               models=MODELS, seed: int = 0) -> list[BenchResult]:
    """Latency of prefill plus the first ``n`` generated tokens."""
    results = []
    for kind in models:
        runner = Runner(kind, cfg, seed)
        for plen in prefill_lens:
            prompt = _prompt(cfg, plen, 1, seed)
            for n in first_n:
                try:
                    times, toks = [], None
                    for r in range(warmup + repeats):
                        def run():
                            st, last = runner.prefill(prompt)
                            return runner.decode(st, last, n)
                        dt, (toks, _) = _timed(run)
                        if r >= warmup:
                            times.append(dt)
                    wall = statistics.median(times)
                    results.append(BenchResult(
                        "ttft", config_id(cfg), kind, plen, n, 1, wall, n / wall if wall > 0 else 0.0,
                        wall / n, 0.0, runner.analytic_state_bytes(prompt.shape[1] + n), 0,
                        output_digest=_digest(toks),
                    ))
                except MemoryError:
                    results.append(BenchResult("ttft", config_id(cfg), kind, plen, n, 1,
                                               0.0, 0.0, 0.0, 0.0, 0, 0, status="oom"))
    return results


def bench_prefill(cfg: ModelConfig, total_tokens: int, grid, repeats: int = 3, warmup: int = 1,
                  models=MODELS, seed: int = 0) -> list[BenchResult]:
    """Process a fixed token budget as ``total_tokens / (batch * ctx)`` forward calls per grid cell."""
    results = []
    for kind in models:
        runner = Runner(kind, cfg, seed)
        for batch, ctx in grid:
            calls = total_tokens // (batch * ctx)
            if calls < 1:
                raise ValueError(f"grid cell ({batch}, {ctx}) exceeds the token budget {total_tokens}")
            prompt = _prompt(cfg, ctx, batch, seed)
            try:
                times = []
                for r in range(warmup + repeats):
                    def run():
                        for _ in range(calls):
                            runner.prefill(prompt)
                    dt, _ = _timed(run)
                    if r >= warmup:
                        times.append(dt)
                wall = statistics.median(times)
                ntok = calls * batch * ctx
                results.append(BenchResult(
                    "prefill", config_id(cfg), kind, ctx, 0, batch, wall, ntok / wall,
                    0.0, wall / calls, runner.analytic_state_bytes(ctx, batch), 0,
                ))
            except MemoryError:
                results.append(BenchResult("prefill", config_id(cfg), kind, ctx, 0, batch,
                                           0.0, 0.0, 0.0, 0.0, 0, 0, status="oom"))
    return results


def bench_memory(cfg: ModelConfig, gen_lens, models=MODELS, measure: bool = True,
                 seed: int = 0) -> list[BenchResult]:
    """Analytic state / KV-cache bytes per generation length, plus traced peak allocation."""
    results = []
    for kind in models:
        runner = Runner(kind, cfg, seed)
        for n in gen_lens:
            peak = 0
            wall = 0.0
            if measure:
                tracemalloc.start()
                t0 = time.perf_counter()
                st, last = runner.prefill(_prompt(cfg, 0, 1, seed))
                runner.decode(st, last, n)
                wall = time.perf_counter() - t0
                _, peak = tracemalloc.get_traced_memory()
                tracemalloc.stop()
            results.append(BenchResult(
                "memory", config_id(cfg), kind, 0, n, 1, wall, n / wall if wall > 0 else 0.0,
                wall / n if n else 0.0, 0.0, runner.analytic_state_bytes(1 + n), peak,
            ))
    return results


def decode_allocation_delta(cfg: ModelConfig, early: int = 10, late: int = 1000, seed: int = 0,
                            kind: str = "mlstm") -> int:
    """Traced live bytes after ``late`` decode steps minus those after ``early`` steps."""
    runner = Runner(kind, cfg, seed)
    state, last = runner.prefill(_prompt(cfg, 0, 1, seed))
    tokens = []
    tracemalloc.start()
    try:
        snap_early = None
        for i in range(late):
            tok = np.argmax(last, axis=-1)
            tokens.append(int(tok[0]))
            state, last = runner.step(state, tok)
            if i + 1 == early:
                snap_early = tracemalloc.get_traced_memory()[0]
        snap_late = tracemalloc.get_traced_memory()[0]
    finally:
        tracemalloc.stop()
    return snap_late - snap_early


def results_to_csv(results: list[BenchResult]) -> str:
    buf = io.StringIO()
    if not results:
        return ""
    w = csv.DictWriter(buf, fieldnames=list(asdict(results[0]).keys()), lineterminator="\n")
    w.writeheader()
    for r in results:
        w.writerow(asdict(r))
    return buf.getvalue()
