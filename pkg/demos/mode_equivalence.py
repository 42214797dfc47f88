"""
One model, two ways to run it
=============================

The mLSTM memory can be stepped token by token, or computed a chunk at a time
with a masked quadratic form inside each chunk. Both give the same logits.
"""

import numpy as np

from xlstm_desk.model import ModelConfig, init_params, model_forward

cfg = ModelConfig(vocab_size=64, num_blocks=2, d_model=32, num_heads=2)
params = init_params(cfg, seed=0)
tokens = np.random.default_rng(0).integers(0, 64, (1, 100))

# token-by-token: a constant-size state carried across steps
step_logits, state = model_forward(tokens, params, cfg, mode="recurrent")

# chunkwise: states only at chunk boundaries, parallel work inside each chunk
for chunk in (1, 8, 64, 100):
    chunk_logits, _ = model_forward(tokens, params, cfg, mode="chunkwise", chunk_size=chunk)
    print(f"chunk {chunk:3d}: max |difference| = {np.max(np.abs(chunk_logits - step_logits)):.1e}")

# the state never grows with the sequence
print("state bytes after 100 tokens:", state.nbytes)
longer = np.random.default_rng(1).integers(0, 64, (1, 1000))
print("state bytes after 1000 tokens:", model_forward(longer, params, cfg, mode="chunkwise")[1].nbytes)

# a prompt can be prefilled in parallel and then continued step by step
_, prefill_state = model_forward(tokens[:, :60], params, cfg, mode="chunkwise")
rest, _ = model_forward(tokens[:, 60:], params, cfg, mode="recurrent", state=prefill_state)
print(f"prefill then step: {np.max(np.abs(rest - step_logits[:, 60:])):.1e}")
