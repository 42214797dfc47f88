"""Closed-form FLOP, parameter and memory-state calculators.

FLOP counts use a factor of 2 per multiply-accumulate and per-op cost
factors ``F_*`` (all 1 by default). The feed-forward terms use the rounded
hidden width ``d_ff`` in place of ``d_model * proj_factor`` so that counts
stay integral and agree with the parameters actually allocated.
"""

from __future__ import annotations

import csv
import io
from dataclasses import asdict, dataclass

from .chunkwise import DEFAULT_CHUNK_SIZE
from .model import ModelConfig

BYTES_FP32 = 4


@dataclass(frozen=True)
class FlopFactors:
    F_exp: float = 1
    F_max: float = 1
    F_mask: float = 1
    F_abs: float = 1
    F_sig: float = 1
    F_swish: float = 1


def _num(x):
    return int(x) if float(x).is_integer() else x


def xlstm_7b_config(num_heads: int = 8, **overrides) -> ModelConfig:
    """The 7B architecture (vocab 50257, 32 blocks, d_model 4096)."""
    kw = dict(vocab_size=50257, num_blocks=32, d_model=4096, num_heads=num_heads, precision="float32")
    kw.update(overrides)
    return ModelConfig(**kw)


# --- FLOPs -----------------------------------------------------------------------


def mlstm_cell_flop_terms(num_heads: int, d_qk: int, d_v: int, seq_len: int,
                          chunk_size: int = DEFAULT_CHUNK_SIZE, factors: FlopFactors | None = None) -> dict:
    """The nine chunkwise cost terms (inter-chunk recurrent and intra-chunk parallel)."""
    f = factors or FlopFactors()
    L = chunk_size
    if L < 1 or seq_len % L:
        raise ValueError(f"seq_len {seq_len} must be a positive multiple of chunk_size {L}")
    hc = num_heads * (seq_len // L)
    tri = L * (L + 1) // 2
    terms = {
        "inter.chunkwise_gates": hc * (tri + 2 * L),
        "inter.gates_max_state": hc * (3 + f.F_max + f.F_exp + L * (3 + 2 * f.F_exp)),
        "inter.numerator": hc * (2 * d_qk * d_v + 4 * L * d_qk * d_v + 3 * L * d_qk),
        "inter.denominator": hc * (d_qk + 4 * L * d_qk),
        "intra.gate_matrix": hc * (tri + L * L * (3 + f.F_mask + f.F_max + f.F_exp) + L * (1 + f.F_max)),
        "intra.gated_attn_logits": hc * 2 * L * L * (1 + d_qk),
        "intra.numerator": hc * 2 * L * L * d_v,
        "intra.denominator": hc * 2 * L * L,
        "intra.output_combination": hc * (L * (1 + f.F_max) + L * (2 + f.F_abs + f.F_exp + f.F_max + 2 * d_v)),
    }
    return {k: _num(v) for k, v in terms.items()}


def flops_mlstm_cell(num_heads: int, d_qk: int, d_v: int, seq_len: int,
                     chunk_size: int = DEFAULT_CHUNK_SIZE, factors: FlopFactors | None = None):
    """Forward FLOPs of the mLSTM cell for one sequence (one layer)."""
    return _num(sum(mlstm_cell_flop_terms(num_heads, d_qk, d_v, seq_len, chunk_size, factors).values()))


def _feedforward_flops(cfg: ModelConfig, T: int, f: FlopFactors):
    return 6 * T * cfg.d_model * cfg.d_ff + 2 * T * cfg.d_model * f.F_swish


def mlstm_model_flop_terms(cfg: ModelConfig, seq_len: int, chunk_size: int = DEFAULT_CHUNK_SIZE,
                           factors: FlopFactors | None = None) -> dict:
    f = factors or FlopFactors()
    T, D, H, V = seq_len, cfg.d_model, cfg.num_heads, cfg.vocab_size
    dqk, dv = cfg.d_qk, cfg.d_hv
    return {
        "embeddings": 2 * T * V * D,
        "qkv_if_projections": 2 * T * D * H * (2 * dqk + dv + 2),
        "output_gate_projection": 4 * T * D * H * dv + T * H * dv * f.F_sig,
        "mlstm_cell": flops_mlstm_cell(H, dqk, dv, T, chunk_size, f),
        "feedforward": _feedforward_flops(cfg, T, f),
        "final_logits": 2 * T * D * V,
    }


def flops_mlstm_model(cfg: ModelConfig, seq_len: int, chunk_size: int = DEFAULT_CHUNK_SIZE,
                      factors: FlopFactors | None = None):
    """Forward FLOPs: embeddings + num_blocks * (mLSTM + feedforward) + final logits."""
    t = mlstm_model_flop_terms(cfg, seq_len, chunk_size, factors)
    per_layer = t["qkv_if_projections"] + t["output_gate_projection"] + t["mlstm_cell"] + t["feedforward"]
    return _num(t["embeddings"] + cfg.num_blocks * per_layer + t["final_logits"])


def transformer_model_flop_terms(cfg: ModelConfig, seq_len: int, factors: FlopFactors | None = None,
                                 d_qk: int | None = None) -> dict:
    """Attention head dims default to ``d_hv`` for both queries/keys and values."""
    f = factors or FlopFactors()
    T, D, H, V = seq_len, cfg.d_model, cfg.num_heads, cfg.vocab_size
    dqk = cfg.d_hv if d_qk is None else d_qk
    dv = cfg.d_hv
    return {
        "embeddings": 2 * T * V * D,
        "qkv_projections": 2 * T * D * H * (2 * dqk + dv),
        "key_query_logits": 2 * T * T * (dqk * H),
        "softmax": 3 * T * T * H,
        "softmax_query_reductions": 2 * T * T * (H * dqk),
        "final_linear": 2 * T * D * (H * dv),
        "feedforward": _feedforward_flops(cfg, T, f),
        "final_logits": 2 * T * D * V,
    }


def flops_transformer_model(cfg: ModelConfig, seq_len: int, factors: FlopFactors | None = None,
                            d_qk: int | None = None):
    t = transformer_model_flop_terms(cfg, seq_len, factors, d_qk)
    attn = t["qkv_projections"] + t["key_query_logits"] + t["softmax"] + t["softmax_query_reductions"] + t["final_linear"]
    return _num(t["embeddings"] + cfg.num_blocks * (attn + t["feedforward"]) + t["final_logits"])


# --- parameters ---------------------------------------------------------------------


def count_params_mlstm(cfg: ModelConfig) -> int:
    """Parameter census without q/k/v/output-gate biases and without weight tying."""
    D, H, V = cfg.d_model, cfg.num_heads, cfg.vocab_size
    layer = (
        D * H * (2 * cfg.d_qk + cfg.d_hv)  # qkv
        + 2 * D * H + 2 * H  # input and forget gates
        + D * D  # output gate
        + D * D  # output projection
        + D  # headwise norm
    )
    ff = 3 * D * cfg.d_ff
    return V * D + cfg.num_blocks * (layer + ff + 2 * D) + D + D * V


def count_params_transformer(cfg: ModelConfig, d_qk: int | None = None) -> int:
    D, H, V = cfg.d_model, cfg.num_heads, cfg.vocab_size
    dqk = cfg.d_hv if d_qk is None else d_qk
    attn = D * H * (2 * dqk + cfg.d_hv) + D * D
    return V * D + cfg.num_blocks * (attn + 3 * D * cfg.d_ff + 2 * D) + D + D * V


# --- memory state ---------------------------------------------------------------------


def memory_state_bytes(num_blocks: int, num_heads: int, d_qk: int, d_hv: int,
                       bytes_per_entry: int = BYTES_FP32) -> int:
    return num_blocks * num_heads * d_qk * d_hv * bytes_per_entry


def state_size_bytes(cfg: ModelConfig, bytes_per_entry: int = BYTES_FP32) -> int:
    """``num_blocks * num_heads * d_qk * d_hv * 4`` bytes (the C matrices in float32)."""
    return memory_state_bytes(cfg.num_blocks, cfg.num_heads, cfg.d_qk, cfg.d_hv, bytes_per_entry)


def kv_bytes_per_token(cfg: ModelConfig, bytes_per_entry: int = BYTES_FP32) -> int:
    """K and V storage for one token across all blocks at width ``d_model``."""
    return 2 * cfg.num_blocks * cfg.d_model * bytes_per_entry


def kv_equiv_tokens(cfg: ModelConfig) -> int:
    return state_size_bytes(cfg) // kv_bytes_per_token(cfg)


def megabytes(n_bytes: int) -> float:
    """Decimal megabytes (10**6 bytes)."""
    return n_bytes / 1e6


def mebibytes(n_bytes: int) -> float:
    return n_bytes / 2**20


# --- report -------------------------------------------------------------------------------


@dataclass
class CostReport:
    config_id: str
    seq_len: int
    chunk_size: int
    cell_flops: int
    forward_flops: int
    backward_flops: int
    param_count: int
    state_bytes: int
    kv_equiv_tokens: int

    @property
    def state_mb(self) -> float:
        return megabytes(self.state_bytes)


def cost_report(cfg: ModelConfig, seq_len: int, chunk_size: int = DEFAULT_CHUNK_SIZE,
                config_id: str = "", factors: FlopFactors | None = None) -> CostReport:
    fwd = flops_mlstm_model(cfg, seq_len, chunk_size, factors)
    return CostReport(
        config_id=config_id or f"{cfg.num_blocks}x{cfg.d_model}/h{cfg.num_heads}",
        seq_len=seq_len,
        chunk_size=chunk_size,
        cell_flops=flops_mlstm_cell(cfg.num_heads, cfg.d_qk, cfg.d_hv, seq_len, chunk_size, factors),
        forward_flops=fwd,
        backward_flops=2 * fwd,
        param_count=count_params_mlstm(cfg),
        state_bytes=state_size_bytes(cfg),
        kv_equiv_tokens=kv_equiv_tokens(cfg),
    )


def reports_to_csv(reports: list[CostReport]) -> str:
    buf = io.StringIO()
    cols = list(asdict(reports[0]).keys()) + ["state_mb"] if reports else []
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(cols)
    for r in reports:
        w.writerow([*asdict(r).values(), f"{r.state_mb:.1f}"])
    return buf.getvalue()


def reports_to_table(reports: list[CostReport]) -> str:
    header = ("config", "seq", "chunk", "cell FLOPs", "fwd FLOPs", "params", "state MB", "KV tokens")
    rows = [header] + [
        (r.config_id, str(r.seq_len), str(r.chunk_size), f"{r.cell_flops:.2e}", f"{r.forward_flops:.2e}",
         f"{r.param_count:,}", f"{r.state_mb:.1f}", str(r.kv_equiv_tokens))
        for r in reports
    ]
    widths = [max(len(row[i]) for row in rows) for i in range(len(header))]
    return "\n".join("  ".join(c.rjust(w) for c, w in zip(row, widths)) for row in rows) + "\n"
