"""
What a 7B mLSTM costs
=====================

FLOPs of the memory cell, parameter count and the size of the recurrent state
for a 7B-scale configuration with different head counts.
"""

from xlstm_desk.analysis import (
    cost_report, count_params_mlstm, kv_equiv_tokens, megabytes, reports_to_table, state_size_bytes,
    xlstm_7b_config,
)

# more heads mean smaller per-head memories: less state, fewer FLOPs
reports = [cost_report(xlstm_7b_config(h), seq_len=8192, chunk_size=64, config_id=f"7b-h{h}")
           for h in (4, 8, 16, 32)]
print(reports_to_table(reports))

# the recurrent state, expressed as the KV cache of an equally wide Transformer
for h in (4, 8, 16, 32):
    cfg = xlstm_7b_config(h)
    print(f"{h:2d} heads: state {megabytes(state_size_bytes(cfg)):6.1f} MB"
          f" = KV cache of {kv_equiv_tokens(cfg)} tokens")

print(f"parameters (no projection biases): {count_params_mlstm(xlstm_7b_config(8, use_bias=False)):,}")
