"""
Decoding after a long prompt
============================

Per-token decode time for the mLSTM stays flat as the prompt grows, while an
attention model has to read an ever longer KV cache.
"""

from xlstm_desk.bench import bench_config, bench_generate, bench_memory

# a small model keeps this quick; the CLI default is 8 blocks of width 512
cfg = bench_config(num_blocks=4, d_model=256)
rows = bench_generate(cfg, prefill_lens=[0, 512, 2048], gen_len=20, repeats=3, warmup=1)
for r in rows:
    print(f"{r.model:9s} prompt {r.prefill_len:5d}: {1e3 * r.per_token_time:6.2f} ms/token,"
          f" state {r.peak_state_bytes / 1e6:6.2f} MB")

# memory as generation proceeds: fixed for the mLSTM, linear for the KV cache
for r in bench_memory(cfg, [100, 1000, 4000], measure=False):
    print(f"{r.model:9s} after {r.gen_len:5d} tokens: {r.peak_state_bytes / 1e6:6.2f} MB")
