"""mLSTM language model in numpy: recurrent and chunkwise cells, a block
stack with hand-written backward passes, cost calculators, a training loop
and desk-scale inference benchmarks.

Submodules are imported on first attribute access so that the command line
can fix BLAS thread counts before numpy loads.
"""

import importlib

_EXPORTS = {
    "numerics": ("softcap", "rmsnorm", "layernorm", "swiglu_mlp", "cross_entropy", "checked_mode",
                 "NonFiniteError", "NormParams"),
    "cell": ("CellState", "StepInput", "cell_step", "recurrent_forward", "recurrent_backward"),
    "chunkwise": ("chunkwise_forward", "chunkwise_backward", "MacCounter", "DEFAULT_CHUNK_SIZE"),
    "model": ("ModelConfig", "ModelState", "ConfigError", "init_params", "param_shapes", "num_params",
              "model_forward", "loss_and_grads", "generate", "load_config", "parse_config_text"),
    "attention": ("attention_model_forward", "attention_generate", "init_attention_params", "KVCache"),
    "checkpoint": ("save_checkpoint", "load_checkpoint", "CheckpointError", "ShapeMismatchError"),
    "analysis": ("flops_mlstm_cell", "flops_mlstm_model", "flops_transformer_model", "count_params_mlstm",
                 "count_params_transformer", "state_size_bytes", "kv_equiv_tokens", "cost_report",
                 "xlstm_7b_config"),
    "trainer": ("TrainConfig", "TrainLog", "PackedDataset", "train", "lr_at", "adamw_step"),
    "bench": ("BenchResult", "bench_generate", "bench_ttft", "bench_prefill", "bench_memory", "bench_config"),
}
_WHERE = {name: mod for mod, names in _EXPORTS.items() for name in names}

__all__ = sorted(_WHERE)


def __getattr__(name):
    if name in _WHERE:
        return getattr(importlib.import_module(f".{_WHERE[name]}", __name__), name)
    if name in _EXPORTS:
        return importlib.import_module(f".{name}", __name__)
    raise AttributeError(f"module {__name__!r} has no attribute {name!r}")
