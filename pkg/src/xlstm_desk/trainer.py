"""Desk-scale next-token training: AdamW, LR schedules, packing with EOD resets."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .model import ModelConfig, loss_and_grads

BYTE_VOCAB = 257
BYTE_EOD = 256


@dataclass
class TrainConfig:
    peak_lr: float = 5e-4
    beta1: float = 0.99
    beta2: float = 0.95
    eps: float = 1e-8
    weight_decay: float = 0.1
    clip_norm: float | None = 0.5
    warmup_steps: int = 100
    total_steps: int = 1000
    schedule: str = "exponential"  # or "cosine"
    target_frac: float = 0.1  # exponential: lr fraction reached at target_step
    min_frac: float = 0.1  # cosine: floor reached at target_step
    target_step: int | None = None  # defaults to the start of the cooldown
    cooldown_steps: int = 0
    batch_ramp: list = field(default_factory=lambda: [(0, 8)])
    context_len: int = 256
    seed: int = 0
    log_window: int = 50

    def __post_init__(self):
        if self.schedule not in ("exponential", "cosine"):
            raise ValueError(f"unknown schedule {self.schedule!r}")
        if self.warmup_steps < 0 or self.cooldown_steps < 0 or self.total_steps <= 0:
            raise ValueError("step counts must be non-negative and total_steps positive")
        if self.warmup_steps + self.cooldown_steps > self.total_steps:
            raise ValueError("warmup + cooldown must not exceed total_steps")
        if self.peak_lr <= 0 or not (0 < self.target_frac <= 1) or not (0 <= self.min_frac <= 1):
            raise ValueError("peak_lr must be positive and fractions in (0, 1]")
        if self.decay_target <= self.warmup_steps and self.decay_target < self.cooldown_start:
            raise ValueError("target_step must come after the warmup")

    @property
    def cooldown_start(self) -> int:
        return self.total_steps - self.cooldown_steps

    @property
    def decay_target(self) -> int:
        return self.cooldown_start if self.target_step is None else self.target_step


def recipe_7b() -> TrainConfig:
    """Hyperparameters of the 7B pre-training run, for reference."""
    return TrainConfig(
        warmup_steps=3000, total_steps=550_000, schedule="exponential", target_frac=0.1,
        target_step=500_000, cooldown_steps=7000,
        batch_ramp=[(0, 128), (2000, 256), (4000, 512)], context_len=8192,
    )


def _decay_lr(step: int, cfg: TrainConfig) -> float:
    span = cfg.decay_target - cfg.warmup_steps
    s = step - cfg.warmup_steps
    if span <= 0:
        return cfg.peak_lr
    if cfg.schedule == "exponential":
        rate = math.log(1.0 / cfg.target_frac) / span
        return cfg.peak_lr * math.exp(-rate * s)
    frac = min(1.0, s / span)
    return cfg.peak_lr * (cfg.min_frac + (1.0 - cfg.min_frac) * 0.5 * (1.0 + math.cos(math.pi * frac)))


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Linear warmup, exponential or cosine decay, then linear cooldown to 0 at ``total_steps``."""
    if step < cfg.warmup_steps:
        return cfg.peak_lr * step / cfg.warmup_steps
    if cfg.cooldown_steps and step >= cfg.cooldown_start:
        remaining = max(cfg.total_steps - step, 0)
        return _decay_lr(cfg.cooldown_start, cfg) * remaining / cfg.cooldown_steps
    return _decay_lr(step, cfg)


def batch_size_at(step: int, cfg: TrainConfig) -> int:
    size = cfg.batch_ramp[0][1]
    for start, bs in sorted(cfg.batch_ramp):
        if step >= start:
            size = bs
    return int(size)


# --- optimizer ---------------------------------------------------------------------


def decays(name: str) -> bool:
    """Weight decay applies to matrix weights only (not norms, biases or gate weights)."""
    leaf = name.rsplit(".", 1)[-1]
    return leaf.startswith("W_") or name in ("embedding", "lm_head")


def global_norm(grads: dict) -> float:
    return math.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads.values()))


def clip_by_global_norm(grads: dict, max_norm: float | None):
    """Returns ``(grads, pre_clip_norm)``; grads are rescaled when the norm exceeds ``max_norm``."""
    norm = global_norm(grads)
    if max_norm is None or norm <= max_norm or norm == 0:
        return grads, norm
    s = max_norm / norm
    return {k: g * s for k, g in grads.items()}, norm


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0


def adamw_step(params: dict, grads: dict, state: AdamState, cfg: TrainConfig, lr: float) -> float:
    """Clip, then one decoupled-weight-decay Adam update in place. Returns the pre-clip grad norm."""
    grads, norm = clip_by_global_norm(grads, cfg.clip_norm)
    state.step += 1
    t = state.step
    bc1 = 1.0 - cfg.beta1 ** t
    bc2 = 1.0 - cfg.beta2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * g * g
        if cfg.weight_decay and decays(name):
            p -= lr * cfg.weight_decay * p
        p -= lr * (m / bc1) / (np.sqrt(v / bc2) + cfg.eps)
    return norm


# --- data --------------------------------------------------------------------------------


@dataclass
class TokenBatch:
    tokens: np.ndarray  # (B, T)
    targets: np.ndarray  # (B, T) next tokens
    eod_mask: np.ndarray  # (B, T) True at EOD tokens
    loss_mask: np.ndarray  # (B, T) False at padding


def ingest_text(texts: list[str]) -> list[np.ndarray]:
    """UTF-8 text documents to byte-level token ids."""
    return [np.frombuffer(t.encode("utf-8"), dtype=np.uint8).astype(np.int64) for t in texts]


def write_token_file(path, docs: list[np.ndarray]) -> None:
    """Token ids as little-endian uint32 at ``path``; document offsets (int64, n+1 entries) at ``path + '.idx'``."""
    offsets = np.zeros(len(docs) + 1, dtype="<i8")
    offsets[1:] = np.cumsum([len(d) for d in docs])
    flat = np.concatenate([np.asarray(d) for d in docs]) if docs else np.zeros(0)
    flat.astype("<u4").tofile(path)
    offsets.tofile(str(path) + ".idx")


def read_token_file(path) -> list[np.ndarray]:
    flat = np.fromfile(path, dtype="<u4").astype(np.int64)
    offsets = np.fromfile(str(path) + ".idx", dtype="<i8")
    if offsets.size == 0 or offsets[-1] != flat.size or np.any(np.diff(offsets) < 0):
        raise ValueError("document index does not match token file")
    return [flat[a:b] for a, b in zip(offsets[:-1], offsets[1:])]


def pack_documents(docs: list[np.ndarray], context_len: int, eod_token: int = BYTE_EOD, pad_token: int = 0):
    """Concatenate documents (each followed by EOD) and cut rows of ``context_len + 1`` tokens.

    Returns ``(rows, valid)``; the last row is padded and ``valid`` marks real tokens.
    """
    stream = []
    for d in docs:
        stream.extend(int(t) for t in d)
        stream.append(eod_token)
    n = context_len + 1
    nrows = max(1, -(-len(stream) // n))
    rows = np.full((nrows, n), pad_token, dtype=np.int64)
    valid = np.zeros((nrows, n), dtype=bool)
    flat = np.asarray(stream, dtype=np.int64)
    rows.reshape(-1)[: flat.size] = flat
    valid.reshape(-1)[: flat.size] = True
    return rows, valid


class PackedDataset:
    """Serves :class:`TokenBatch` es from packed rows in a seeded, shuffled order."""

    def __init__(self, docs: list[np.ndarray], context_len: int, eod_token: int = BYTE_EOD,
                 seed: int = 0, shuffle: bool = True):
        self.rows, self.valid = pack_documents(docs, context_len, eod_token)
        self.eod_token = eod_token
        self.shuffle = shuffle
        self.rng = np.random.default_rng(seed)
        self._order = np.arange(len(self.rows))
        self._pos = len(self._order)

    def _next_index(self) -> int:
        if self._pos >= len(self._order):
            self._order = self.rng.permutation(len(self.rows)) if self.shuffle else np.arange(len(self.rows))
            self._pos = 0
        i = self._order[self._pos]
        self._pos += 1
        return int(i)

    def next_batch(self, batch_size: int) -> TokenBatch:
        idx = [self._next_index() for _ in range(batch_size)]
        rows, valid = self.rows[idx], self.valid[idx]
        tokens = rows[:, :-1]
        return TokenBatch(
            tokens=tokens,
            targets=rows[:, 1:],
            eod_mask=(tokens == self.eod_token) & valid[:, :-1],
            loss_mask=valid[:, 1:] & valid[:, :-1],
        )


# --- training loop --------------------------------------------------------------------------


@dataclass
class TrainLog:
    window: int = 50
    step: list = field(default_factory=list)
    loss: list = field(default_factory=list)
    lr: list = field(default_factory=list)
    grad_norm: list = field(default_factory=list)
    grad_norm_max: list = field(default_factory=list)
    grad_norm_mean: list = field(default_factory=list)

    def append(self, step: int, loss: float, lr: float, grad_norm: float) -> None:
        self.step.append(step)
        self.loss.append(loss)
        self.lr.append(lr)
        self.grad_norm.append(grad_norm)
        recent = self.grad_norm[-self.window:]
        self.grad_norm_max.append(max(recent))
        self.grad_norm_mean.append(sum(recent) / len(recent))

    @property
    def ppl(self) -> list[float]:
        return [math.exp(min(x, 700.0)) for x in self.loss]

    def windowed(self, series: list[float]):
        """Trailing-window (mean, max) recomputed from a raw series."""
        means, maxes = [], []
        for i in range(len(series)):
            w = series[max(0, i - self.window + 1): i + 1]
            means.append(sum(w) / len(w))
            maxes.append(max(w))
        return means, maxes

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["step", "loss", "ppl", "lr", "grad_norm",
                        f"grad_norm_max{self.window}", f"grad_norm_mean{self.window}"])
            for row in zip(self.step, self.loss, self.ppl, self.lr, self.grad_norm,
                           self.grad_norm_max, self.grad_norm_mean):
                w.writerow([row[0]] + [repr(float(x)) for x in row[1:]])


class TrainingDiverged(FloatingPointError):
    def __init__(self, step: int, log: TrainLog):
        super().__init__(f"non-finite loss at step {step}")
        self.step = step
        self.log = log


def train(params: dict, cfg: ModelConfig, tcfg: TrainConfig, data, checkpoint_path=None,
          mode: str = "chunkwise", callback=None) -> TrainLog:
    """Train ``params`` in place for ``tcfg.total_steps`` updates.

    ``data`` needs a ``next_batch(batch_size) -> TokenBatch`` method. The
    logged grad norm is measured before clipping.
    """
    opt = AdamState()
    log = TrainLog(window=tcfg.log_window)
    for step in range(1, tcfg.total_steps + 1):
        batch = data.next_batch(batch_size_at(step, tcfg))
        loss, grads = loss_and_grads(
            params, cfg, batch.tokens, batch.targets, batch.loss_mask, batch.eod_mask, mode)
        lr = lr_at(step, tcfg)
        if not (math.isfinite(loss) and math.isfinite(global_norm(grads))):
            raise TrainingDiverged(step, log)
        norm = adamw_step(params, grads, opt, tcfg, lr)
        log.append(step, loss, lr, norm)
        if callback is not None:
            callback(step, log)
    if checkpoint_path is not None:
        from .checkpoint import save_checkpoint
        save_checkpoint(params, cfg, checkpoint_path)
    return log
