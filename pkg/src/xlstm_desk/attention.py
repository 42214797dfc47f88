"""Naive causal softmax-attention comparator in the same pre-norm block shape.

Only used to contrast quadratic attention against the linear mLSTM in the
benchmarks and cost calculators; it has no backward pass.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .model import (
    GenerationResult, ModelConfig, _prenorm, sample_token,
)
from .numerics import softcap, swiglu_mlp

QUERY_BLOCK = 512


def attention_param_shapes(cfg: ModelConfig) -> dict[str, tuple]:
    D, F, V = cfg.d_model, cfg.d_ff, cfg.vocab_size
    shapes = {"embedding": (V, D)}
    for b in range(cfg.num_blocks):
        p = f"blocks.{b}."
        shapes[p + "norm_attn.scale"] = (D,)
        for w in ("W_q", "W_k", "W_v", "W_out"):
            shapes[p + "attn." + w] = (D, D)
        shapes[p + "norm_mlp.scale"] = (D,)
        shapes[p + "mlp.W_gate"] = (D, F)
        shapes[p + "mlp.W_up"] = (D, F)
        shapes[p + "mlp.W_down"] = (F, D)
    shapes["final_norm.scale"] = (D,)
    shapes["lm_head"] = (D, V)
    return shapes


def init_attention_params(cfg: ModelConfig, seed=0) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in attention_param_shapes(cfg).items():
        if name == "embedding":
            arr = rng.normal(0.0, 1.0 / math.sqrt(cfg.d_model), shape)
        elif name.endswith("scale"):
            arr = np.ones(shape)
        else:
            bound = 1.0 / math.sqrt(shape[0])
            arr = rng.uniform(-bound, bound, shape)
        params[name] = arr.astype(cfg.dtype)
    return params


@dataclass
class KVCache:
    """Per-block key/value buffers of shape ``(B, H, capacity, d_head)``; grows by doubling."""

    keys: list = field(default_factory=list)
    values: list = field(default_factory=list)
    length: int = 0

    def append(self, block: int, k: np.ndarray, v: np.ndarray, start: int):
        T = k.shape[2]
        while len(self.keys) <= block:
            self.keys.append(None)
            self.values.append(None)
        buf = self.keys[block]
        need = start + T
        if buf is None or buf.shape[2] < need:
            cap = max(need, 2 * (buf.shape[2] if buf is not None else 0), 16)
            newk = np.empty(k.shape[:2] + (cap, k.shape[3]), dtype=k.dtype)
            newv = np.empty(v.shape[:2] + (cap, v.shape[3]), dtype=v.dtype)
            if buf is not None:
                newk[:, :, :start] = self.keys[block][:, :, :start]
                newv[:, :, :start] = self.values[block][:, :, :start]
            self.keys[block], self.values[block] = newk, newv
        self.keys[block][:, :, start:need] = k
        self.values[block][:, :, start:need] = v
        return self.keys[block][:, :, :need], self.values[block][:, :, :need]

    @property
    def nbytes(self) -> int:
        # bytes actually holding cached tokens (not spare capacity)
        return sum(
            2 * k[:, :, : self.length].nbytes for k in self.keys if k is not None
        )


def _causal_attention(q, k, v, offset: int):
    """``q (B,H,Tq,d)`` attends to ``k, v (B,H,Tk,d)``; query i sits at position ``offset + i``."""
    d = q.shape[-1]
    Tq = q.shape[2]
    out = np.empty(q.shape[:3] + (v.shape[-1],), dtype=q.dtype)
    for s in range(0, Tq, QUERY_BLOCK):
        e = min(s + QUERY_BLOCK, Tq)
        kmax = offset + e
        scores = np.einsum("bhqd,bhkd->bhqk", q[:, :, s:e], k[:, :, :kmax]) / math.sqrt(d)
        qpos = offset + np.arange(s, e)[:, None]
        kpos = np.arange(kmax)[None, :]
        scores = np.where(kpos <= qpos, scores, -np.inf)
        scores -= scores.max(axis=-1, keepdims=True)
        w = np.exp(scores)
        w /= w.sum(axis=-1, keepdims=True)
        out[:, :, s:e] = np.einsum("bhqk,bhkd->bhqd", w, v[:, :, :kmax])
    return out


def attention_layer_forward(x, params, cfg: ModelConfig, block: int = 0, kv: KVCache | None = None):
    """Multi-head causal attention on ``x (B, T, D)``, appending to ``kv`` when given."""
    p = f"blocks.{block}.attn."
    B, T, D = x.shape
    H, dh = cfg.num_heads, cfg.d_hv

    def heads(z):
        return z.reshape(B, T, H, dh).transpose(0, 2, 1, 3)

    q = heads(x @ params[p + "W_q"])
    k = heads(x @ params[p + "W_k"])
    v = heads(x @ params[p + "W_v"])
    offset = 0
    if kv is not None:
        offset = kv.length
        k, v = kv.append(block, k, v, offset)
    o = _causal_attention(q, k, v, offset)
    return o.transpose(0, 2, 1, 3).reshape(B, T, D) @ params[p + "W_out"]


def attention_block_forward(x, params, cfg: ModelConfig, block: int = 0, kv: KVCache | None = None):
    p = f"blocks.{block}."
    z = x + attention_layer_forward(_prenorm(x, params, p + "norm_attn.scale", cfg), params, cfg, block, kv)
    n2 = _prenorm(z, params, p + "norm_mlp.scale", cfg)
    return z + swiglu_mlp(n2, params[p + "mlp.W_gate"], params[p + "mlp.W_up"], params[p + "mlp.W_down"])


def attention_model_forward(tokens, params, cfg: ModelConfig, kv: KVCache | None = None):
    """Token ids ``(B, T)`` to logits; extends ``kv`` in place when given."""
    tokens = np.asarray(tokens)
    if tokens.ndim == 1:
        tokens = tokens[None]
    x = params["embedding"][tokens]
    for b in range(cfg.num_blocks):
        x = attention_block_forward(x, params, cfg, b, kv)
    if kv is not None:
        kv.length += tokens.shape[1]
    logits = _prenorm(x, params, "final_norm.scale", cfg) @ params["lm_head"]
    return softcap(logits, cfg.logit_cap) if cfg.cap_logits else logits


def attention_generate(prompt, params, cfg: ModelConfig, n_tokens: int, sampler: str = "greedy",
                       temperature: float = 1.0, seed: int = 0) -> GenerationResult:
    if n_tokens < 0:
        raise ValueError("n_tokens must be >= 0")
    prompt = [int(t) for t in prompt]
    if not prompt:
        raise ValueError("generation needs at least one prompt token")
    rng = np.random.default_rng(seed)
    kv = KVCache()
    logits = attention_model_forward(np.asarray(prompt)[None], params, cfg, kv)[0]
    prefill_logits = logits
    last = logits[-1]
    out, out_logits = [], []
    for _ in range(n_tokens):
        tok = sample_token(last, sampler, temperature, rng)
        out.append(tok)
        out_logits.append(last)
        if len(out) == n_tokens:
            break
        last = attention_model_forward(np.asarray([[tok]]), params, cfg, kv)[0, -1]
    return GenerationResult(out, out_logits, kv, prefill_logits)
