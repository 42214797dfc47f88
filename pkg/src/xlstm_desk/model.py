"""Multi-head mLSTM layer, post-up-projection block and the decoder stack.

Parameters live in a flat ``dict[str, np.ndarray]`` keyed by dotted names
(``blocks.0.mlstm.W_q`` ...). Linear weights are stored ``(in, out)`` and
applied as ``x @ W``. Every forward returns a cache that the matching
backward consumes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields

import numpy as np

from .cell import CellState, recurrent_backward, recurrent_forward_with_cache
from .chunkwise import DEFAULT_CHUNK_SIZE, chunkwise_backward, chunkwise_forward_with_cache
from .numerics import (
    DTYPES, NORMS, NormParams, check_finite, sigmoid, softcap, softcap_backward,
    swiglu_mlp, swiglu_mlp_backward,
)

MODES = ("recurrent", "chunkwise")


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    vocab_size: int = 257
    num_blocks: int = 4
    d_model: int = 128
    num_heads: int = 2
    ff_proj_factor: float = 2.66
    ff_multiple: int = 64
    gate_cap: float = 15.0
    logit_cap: float = 30.0
    cap_gates: bool = True
    cap_logits: bool = True
    norm_eps: float = 1e-6
    prenorm: str = "rms"
    headnorm: str = "layer"
    use_bias: bool = True
    igate_bias_init: float = -10.0
    fgate_bias_min: float = 3.0
    fgate_bias_max: float = 6.0
    chunk_size: int = DEFAULT_CHUNK_SIZE
    precision: str = "float64"

    def __post_init__(self):
        if self.num_heads < 1 or self.d_model % self.num_heads:
            raise ConfigError(f"d_model {self.d_model} not divisible by num_heads {self.num_heads}")
        if self.d_hv % 2:
            raise ConfigError(f"head dimension {self.d_hv} must be even so that d_qk = d_hv / 2")
        if not (self.gate_cap > 0 and self.logit_cap > 0):
            raise ConfigError("soft-cap values must be positive")
        if self.vocab_size < 1 or self.num_blocks < 0 or self.chunk_size < 1:
            raise ConfigError("vocab_size, chunk_size must be positive and num_blocks non-negative")
        if self.prenorm not in NORMS or self.headnorm not in NORMS:
            raise ConfigError(f"norm types must be one of {sorted(NORMS)}")
        if self.precision not in DTYPES:
            raise ConfigError(f"precision must be one of {sorted(DTYPES)}")

    @property
    def d_hv(self) -> int:
        return self.d_model // self.num_heads

    @property
    def d_qk(self) -> int:
        return self.d_hv // 2

    @property
    def d_ff(self) -> int:
        m = self.ff_multiple
        return int(math.ceil(self.ff_proj_factor * self.d_model / m) * m)

    @property
    def dtype(self):
        return DTYPES[self.precision]

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


# --- config file ---------------------------------------------------------------


def _parse_value(kind, text: str):
    if kind in (bool, "bool"):
        low = text.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"not a boolean: {text!r}")
    if kind in (int, "int"):
        return int(text)
    if kind in (float, "float"):
        return float(text)
    return text.strip()


def parse_config_text(text: str, cls=ModelConfig):
    """Parse flat ``key = value`` lines (``#`` comments allowed); unknown keys are rejected."""
    known = {f.name: f.type for f in fields(cls)}
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value")
        key, val = (s.strip() for s in line.split("=", 1))
        if key not in known:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        values[key] = _parse_value(known[key], val)
    return cls(**values)


def load_config(path, cls=ModelConfig):
    with open(path, encoding="utf-8") as f:
        return parse_config_text(f.read(), cls)


def dump_config(cfg) -> str:
    return "".join(f"{k} = {v}\n" for k, v in cfg.to_dict().items())


# --- parameters -------------------------------------------------------------------


def param_shapes(cfg: ModelConfig) -> dict[str, tuple]:
    D, H, dk, dv, F, V = cfg.d_model, cfg.num_heads, cfg.d_qk, cfg.d_hv, cfg.d_ff, cfg.vocab_size
    shapes = {"embedding": (V, D)}
    for b in range(cfg.num_blocks):
        p = f"blocks.{b}."
        shapes[p + "norm_mlstm.scale"] = (D,)
        shapes[p + "mlstm.W_q"] = (D, H * dk)
        shapes[p + "mlstm.W_k"] = (D, H * dk)
        shapes[p + "mlstm.W_v"] = (D, H * dv)
        if cfg.use_bias:
            shapes[p + "mlstm.b_q"] = (H * dk,)
            shapes[p + "mlstm.b_k"] = (H * dk,)
            shapes[p + "mlstm.b_v"] = (H * dv,)
        shapes[p + "mlstm.w_i"] = (D, H)
        shapes[p + "mlstm.b_i"] = (H,)
        shapes[p + "mlstm.w_f"] = (D, H)
        shapes[p + "mlstm.b_f"] = (H,)
        shapes[p + "mlstm.W_o"] = (D, D)
        if cfg.use_bias:
            shapes[p + "mlstm.b_o"] = (D,)
        shapes[p + "mlstm.head_norm.scale"] = (H, dv)
        shapes[p + "mlstm.W_proj"] = (D, D)
        shapes[p + "norm_mlp.scale"] = (D,)
        shapes[p + "mlp.W_gate"] = (D, F)
        shapes[p + "mlp.W_up"] = (D, F)
        shapes[p + "mlp.W_down"] = (F, D)
    shapes["final_norm.scale"] = (D,)
    shapes["lm_head"] = (D, V)
    return shapes


def num_params(params: dict) -> int:
    return int(sum(a.size for a in params.values()))


def init_params(cfg: ModelConfig, seed: int | np.random.Generator = 0) -> dict[str, np.ndarray]:
    """Fan-in uniform linear init; input gate w=0, b=igate_bias_init; forget gate w=0, b spaced in [fmin, fmax]."""
    rng = np.random.default_rng(seed)
    dt = cfg.dtype
    params = {}
    for name, shape in param_shapes(cfg).items():
        leaf = name.rsplit(".", 1)[-1]
        if name == "embedding":
            arr = rng.normal(0.0, 1.0 / math.sqrt(cfg.d_model), shape)
        elif leaf == "scale":
            arr = np.ones(shape)
        elif leaf in ("w_i", "w_f") or leaf.startswith("b_"):
            arr = np.zeros(shape)
        else:
            bound = 1.0 / math.sqrt(shape[0])
            arr = rng.uniform(-bound, bound, shape)
        if leaf == "b_i":
            arr = np.full(shape, cfg.igate_bias_init)
        elif leaf == "b_f":
            arr = np.linspace(cfg.fgate_bias_min, cfg.fgate_bias_max, shape[0])
        params[name] = arr.astype(dt)
    return params


def check_params(params: dict, cfg: ModelConfig) -> None:
    expected = param_shapes(cfg)
    missing = sorted(set(expected) - set(params))
    extra = sorted(set(params) - set(expected))
    if missing or extra:
        raise ConfigError(f"parameter names differ: missing {missing}, unexpected {extra}")
    for name, shape in expected.items():
        if tuple(params[name].shape) != shape:
            raise ConfigError(f"{name}: shape {params[name].shape} != expected {shape}")


# --- state ---------------------------------------------------------------------------


@dataclass
class ModelState:
    cells: list[CellState]
    position: int = 0

    @classmethod
    def fresh(cls, cfg: ModelConfig, batch: int = 1) -> "ModelState":
        return cls([
            CellState.zeros(cfg.d_qk, cfg.d_hv, (batch, cfg.num_heads), cfg.dtype)
            for _ in range(cfg.num_blocks)
        ])

    def copy(self) -> "ModelState":
        return ModelState([c.copy() for c in self.cells], self.position)

    @property
    def nbytes(self) -> int:
        return sum(c.nbytes for c in self.cells)


# --- mLSTM layer -------------------------------------------------------------------------


def _linear(x, params, w, b=None):
    y = x @ params[w]
    if b is not None and b in params:
        y = y + params[b]
    return y


@dataclass
class LayerCache:
    x: np.ndarray
    raw_i: np.ndarray
    raw_f: np.ndarray
    reset: np.ndarray | None
    o_pre: np.ndarray
    og: np.ndarray
    htilde: np.ndarray  # (B, T, H, dv)
    hcat: np.ndarray  # normalized heads, (B, T, D)
    h: np.ndarray
    mode: str
    cell: object = None


def mlstm_layer_forward(x, params, cfg: ModelConfig, block: int = 0, mode: str = "chunkwise",
                        state: CellState | None = None, reset=None, chunk_size: int | None = None):
    """Multi-head mLSTM layer over ``x (B, T, d_model)``.

    ``reset (B, T)`` marks positions whose step starts from an empty memory
    (forget pre-activation forced to ``-inf``, bypassing the soft-cap).
    Returns ``(y, new_state, cache)``.
    """
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    p = f"blocks.{block}.mlstm."
    B, T, D = x.shape
    H, dk, dv = cfg.num_heads, cfg.d_qk, cfg.d_hv
    if state is None:
        state = CellState.zeros(dk, dv, (B, H), x.dtype)
    if state.C.shape != (B, H, dk, dv):
        raise ValueError(f"state shape {state.C.shape} does not match (B, H, d_qk, d_hv) = {(B, H, dk, dv)}")

    def heads(z, d):
        return z.reshape(B, T, H, d).transpose(0, 2, 1, 3)

    q = heads(_linear(x, params, p + "W_q", p + "b_q"), dk)
    k = heads(_linear(x, params, p + "W_k", p + "b_k"), dk)
    v = heads(_linear(x, params, p + "W_v", p + "b_v"), dv)
    raw_i = _linear(x, params, p + "w_i", p + "b_i")
    raw_f = _linear(x, params, p + "w_f", p + "b_f")
    ipre = softcap(raw_i, cfg.gate_cap) if cfg.cap_gates else raw_i
    fpre = softcap(raw_f, cfg.gate_cap) if cfg.cap_gates else raw_f
    if reset is not None:
        reset = np.asarray(reset, dtype=bool)
        fpre = np.where(reset[..., None], -np.inf, fpre)
    ipre, fpre = ipre.transpose(0, 2, 1), fpre.transpose(0, 2, 1)

    if mode == "chunkwise":
        ht, new_state, ccache = chunkwise_forward_with_cache(
            q, k, v, ipre, fpre, state, chunk_size or cfg.chunk_size)
    else:
        ht, new_state, ccache = recurrent_forward_with_cache(q, k, v, ipre, fpre, state)
    ht = ht.transpose(0, 2, 1, 3)  # (B, T, H, dv)
    norm, _ = NORMS[cfg.headnorm]
    hn = norm(ht, NormParams(params[p + "head_norm.scale"], eps=cfg.norm_eps))
    hcat = hn.reshape(B, T, D)
    o_pre = _linear(x, params, p + "W_o", p + "b_o")
    og = sigmoid(o_pre)
    h = og * hcat
    y = h @ params[p + "W_proj"]
    cache = LayerCache(x, raw_i, raw_f, reset, o_pre, og, ht, hcat, h, mode, ccache)
    return y, new_state, cache


def mlstm_layer_backward(dy, cache: LayerCache, params, cfg: ModelConfig, block: int = 0):
    """Returns ``(dx, grads)`` with ``grads`` keyed by full parameter name."""
    p = f"blocks.{block}.mlstm."
    c = cache
    B, T, D = c.x.shape
    H, dk, dv = cfg.num_heads, cfg.d_qk, cfg.d_hv
    x2 = c.x.reshape(-1, D)
    g = {}
    g[p + "W_proj"] = c.h.reshape(-1, D).T @ dy.reshape(-1, D)
    dh = dy @ params[p + "W_proj"].T
    do_pre = dh * c.hcat * c.og * (1.0 - c.og)
    dhn = (dh * c.og).reshape(B, T, H, dv)
    _, norm_bwd = NORMS[cfg.headnorm]
    dht, g[p + "head_norm.scale"], _ = norm_bwd(
        dhn, c.htilde, NormParams(params[p + "head_norm.scale"], eps=cfg.norm_eps))
    dht = dht.transpose(0, 2, 1, 3)
    if c.mode == "chunkwise":
        dc = chunkwise_backward(dht, c.cell)
    else:
        dc = recurrent_backward(dht, c.cell)
    dq = dc["q"].transpose(0, 2, 1, 3).reshape(B, T, H * dk)
    dk_ = dc["k"].transpose(0, 2, 1, 3).reshape(B, T, H * dk)
    dv_ = dc["v"].transpose(0, 2, 1, 3).reshape(B, T, H * dv)
    di = dc["i_pre"].transpose(0, 2, 1)
    df = dc["f_pre"].transpose(0, 2, 1)
    if c.reset is not None:
        df = np.where(c.reset[..., None], 0.0, df)
    if cfg.cap_gates:
        di = softcap_backward(di, c.raw_i, cfg.gate_cap)
        df = softcap_backward(df, c.raw_f, cfg.gate_cap)

    dx = np.zeros_like(c.x)
    for name, bname, dz in (("W_q", "b_q", dq), ("W_k", "b_k", dk_), ("W_v", "b_v", dv_),
                            ("w_i", "b_i", di), ("w_f", "b_f", df), ("W_o", "b_o", do_pre)):
        dz2 = dz.reshape(-1, dz.shape[-1])
        g[p + name] = x2.T @ dz2
        if p + bname in params:
            g[p + bname] = dz2.sum(axis=0)
        dx += dz @ params[p + name].T
    return dx, g


# --- block and stack -------------------------------------------------------------------------


@dataclass
class BlockCache:
    x: np.ndarray
    n1: np.ndarray
    z: np.ndarray
    n2: np.ndarray
    layer: LayerCache


def _prenorm(x, params, name, cfg):
    fwd, _ = NORMS[cfg.prenorm]
    return fwd(x, NormParams(params[name], eps=cfg.norm_eps))


def _prenorm_backward(d, x, params, name, cfg):
    _, bwd = NORMS[cfg.prenorm]
    dx, dscale, _ = bwd(d, x, NormParams(params[name], eps=cfg.norm_eps))
    return dx, dscale


def block_forward(x, params, cfg: ModelConfig, block: int = 0, mode: str = "chunkwise",
                  state: CellState | None = None, reset=None, chunk_size: int | None = None):
    """Post-up-projection block: ``z = x + mLSTM(Norm(x)); y = z + MLP(Norm(z))``."""
    p = f"blocks.{block}."
    n1 = _prenorm(x, params, p + "norm_mlstm.scale", cfg)
    y1, new_state, lc = mlstm_layer_forward(n1, params, cfg, block, mode, state, reset, chunk_size)
    z = x + y1
    n2 = _prenorm(z, params, p + "norm_mlp.scale", cfg)
    y = z + swiglu_mlp(n2, params[p + "mlp.W_gate"], params[p + "mlp.W_up"], params[p + "mlp.W_down"])
    return y, new_state, BlockCache(x, n1, z, n2, lc)


def block_backward(dy, cache: BlockCache, params, cfg: ModelConfig, block: int = 0):
    p = f"blocks.{block}."
    c = cache
    dn2, dwg, dwu, dwd = swiglu_mlp_backward(
        dy, c.n2, params[p + "mlp.W_gate"], params[p + "mlp.W_up"], params[p + "mlp.W_down"])
    dz_norm, ds2 = _prenorm_backward(dn2, c.z, params, p + "norm_mlp.scale", cfg)
    dz = dy + dz_norm
    dn1, g = mlstm_layer_backward(dz, c.layer, params, cfg, block)
    dx_norm, ds1 = _prenorm_backward(dn1, c.x, params, p + "norm_mlstm.scale", cfg)
    g.update({
        p + "mlp.W_gate": dwg, p + "mlp.W_up": dwu, p + "mlp.W_down": dwd,
        p + "norm_mlp.scale": ds2, p + "norm_mlstm.scale": ds1,
    })
    return dz + dx_norm, g


@dataclass
class ModelCache:
    tokens: np.ndarray
    blocks: list = field(default_factory=list)
    final_in: np.ndarray | None = None
    final_out: np.ndarray | None = None
    raw_logits: np.ndarray | None = None


def reset_from_eod(eod_mask) -> np.ndarray:
    """Reset mask: the token right after an EOD token starts from an empty memory."""
    eod_mask = np.asarray(eod_mask, dtype=bool)
    reset = np.zeros_like(eod_mask)
    reset[..., 1:] = eod_mask[..., :-1]
    return reset


def model_forward_with_cache(tokens, params, cfg: ModelConfig, mode: str = "chunkwise",
                             state: ModelState | None = None, eod_mask=None,
                             chunk_size: int | None = None):
    tokens = np.asarray(tokens)
    if tokens.ndim != 2:
        raise ValueError("tokens must be (batch, time)")
    if tokens.size and (tokens.min() < 0 or tokens.max() >= cfg.vocab_size):
        raise ValueError(f"token ids must lie in [0, {cfg.vocab_size})")
    B, T = tokens.shape
    if state is None:
        state = ModelState.fresh(cfg, B)
    if len(state.cells) != cfg.num_blocks:
        raise ValueError("model state does not match num_blocks")
    reset = reset_from_eod(eod_mask) if eod_mask is not None else None
    x = params["embedding"][tokens]
    cache = ModelCache(tokens)
    cells = []
    for b in range(cfg.num_blocks):
        x, cs, bc = block_forward(x, params, cfg, b, mode, state.cells[b], reset, chunk_size)
        cells.append(cs)
        cache.blocks.append(bc)
    cache.final_in = x
    hf = _prenorm(x, params, "final_norm.scale", cfg)
    cache.final_out = hf
    raw = hf @ params["lm_head"]
    cache.raw_logits = raw
    logits = softcap(raw, cfg.logit_cap) if cfg.cap_logits else raw
    check_finite("logits", logits)
    return logits, ModelState(cells, state.position + T), cache


def model_forward(tokens, params, cfg: ModelConfig, mode: str = "chunkwise",
                  state: ModelState | None = None, eod_mask=None, chunk_size: int | None = None):
    """Token ids ``(T,)`` or ``(B, T)`` to capped logits; returns ``(logits, new_state)``.

    ``eod_mask`` flags EOD tokens; the memory is emptied before the token that
    follows each one.
    """
    tokens = np.asarray(tokens)
    single = tokens.ndim == 1
    if single:
        tokens = tokens[None]
        eod_mask = None if eod_mask is None else np.asarray(eod_mask)[None]
    logits, st, _ = model_forward_with_cache(tokens, params, cfg, mode, state, eod_mask, chunk_size)
    return (logits[0] if single else logits), st


def model_backward(dlogits, cache: ModelCache, params, cfg: ModelConfig) -> dict[str, np.ndarray]:
    D = cfg.d_model
    g = {}
    draw = softcap_backward(dlogits, cache.raw_logits, cfg.logit_cap) if cfg.cap_logits else dlogits
    g["lm_head"] = cache.final_out.reshape(-1, D).T @ draw.reshape(-1, draw.shape[-1])
    dhf = draw @ params["lm_head"].T
    dx, g["final_norm.scale"] = _prenorm_backward(dhf, cache.final_in, params, "final_norm.scale", cfg)
    for b in range(cfg.num_blocks - 1, -1, -1):
        dx, gb = block_backward(dx, cache.blocks[b], params, cfg, b)
        g.update(gb)
    demb = np.zeros_like(params["embedding"])
    np.add.at(demb, cache.tokens, dx)
    g["embedding"] = demb
    return g


def loss_and_grads(params, cfg: ModelConfig, tokens, targets, mask=None, eod_mask=None,
                   mode: str = "chunkwise", chunk_size: int | None = None):
    """Mean next-token cross-entropy and parameter gradients for a ``(B, T)`` batch."""
    from .numerics import cross_entropy

    logits, _, cache = model_forward_with_cache(tokens, params, cfg, mode, None, eod_mask, chunk_size)
    loss, dlogits = cross_entropy(logits, np.asarray(targets), mask)
    return loss, model_backward(dlogits, cache, params, cfg)


# --- generation -------------------------------------------------------------------------------


@dataclass
class GenerationResult:
    tokens: list[int]
    logits: list[np.ndarray]  # logits that produced each generated token
    state: object
    prefill_logits: np.ndarray | None = None


def sample_token(logits: np.ndarray, sampler: str, temperature: float, rng: np.random.Generator) -> int:
    if sampler == "greedy":
        # argmax returns the lowest id among ties
        return int(np.argmax(logits))
    if sampler == "temperature":
        if temperature <= 0:
            raise ValueError("temperature must be positive")
        z = logits.astype(np.float64) / temperature
        pr = np.exp(z - z.max())
        pr /= pr.sum()
        return int(rng.choice(len(pr), p=pr))
    raise ValueError(f"unknown sampler {sampler!r}")


def generate(prompt, params, cfg: ModelConfig, n_tokens: int, sampler: str = "greedy",
             temperature: float = 1.0, seed: int = 0) -> GenerationResult:
    """Prefill ``prompt`` in chunkwise mode, then decode ``n_tokens`` recurrently."""
    if n_tokens < 0:
        raise ValueError("n_tokens must be >= 0")
    prompt = [int(t) for t in prompt]
    if not prompt:
        raise ValueError("generation needs at least one prompt token")
    rng = np.random.default_rng(seed)
    logits, state = model_forward(np.asarray(prompt), params, cfg, "chunkwise")
    prefill_logits = logits
    out, out_logits = [], []
    last = logits[-1]
    for _ in range(n_tokens):
        tok = sample_token(last, sampler, temperature, rng)
        out.append(tok)
        out_logits.append(last)
        if len(out) == n_tokens:
            break
        step_logits, state = model_forward(np.asarray([tok]), params, cfg, "recurrent", state)
        last = step_logits[-1]
    return GenerationResult(out, out_logits, state, prefill_logits)
