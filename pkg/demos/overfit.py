"""
Training a tiny model
=====================

Memorise one 512-token sample, then train briefly on packed documents
and look at the log.
"""

import numpy as np

from xlstm_desk.model import ModelConfig, init_params
from xlstm_desk.trainer import PackedDataset, TokenBatch, TrainConfig, ingest_text, train

cfg = ModelConfig(vocab_size=257, num_blocks=2, d_model=32, num_heads=2)
sample = np.random.default_rng(0).integers(0, 256, 513)


# a data source that always returns the same sequence
class Repeat:
    def next_batch(self, n):
        x, y = np.tile(sample[:-1], (n, 1)), np.tile(sample[1:], (n, 1))
        return TokenBatch(x, y, np.zeros_like(x, dtype=bool), np.ones_like(x, dtype=bool))


tcfg = TrainConfig(peak_lr=3e-3, warmup_steps=20, total_steps=300, schedule="cosine",
                   batch_ramp=[(0, 1)], context_len=512)
log = train(init_params(cfg, 0), cfg, tcfg, Repeat())
for s in (1, 50, 100, 200, 300):
    print(f"step {s:3d}  loss {log.loss[s - 1]:.4f}  lr {log.lr[s - 1]:.2e}")

# packed documents: an end-of-document token resets the memory for the next one
docs = ingest_text(["the cat sat on the mat", "a dog ran in the park", "birds sing at dawn"] * 10)
data = PackedDataset(docs, context_len=64, seed=0)
tcfg = TrainConfig(peak_lr=3e-3, warmup_steps=10, total_steps=60, batch_ramp=[(0, 4)], context_len=64,
                   log_window=10)
log = train(init_params(cfg, 1), cfg, tcfg, data)
print(f"packed: loss {log.loss[0]:.2f} -> {log.loss[-1]:.2f},"
      f" largest grad norm in last 10 steps {log.grad_norm_max[-1]:.2f}")
