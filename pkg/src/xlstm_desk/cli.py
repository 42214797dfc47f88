"""Command-line entry point: ``xlstm-desk <subcommand> [options]``.

Subcommands write CSV (to ``--out`` or stdout). Failures exit nonzero after
printing one JSON object ``{"error": ..., "message": ...}`` on stderr.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _ints(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _grid(text: str) -> list[tuple[int, int]]:
    try:
        cells = [tuple(int(v) for v in c.lower().split("x")) for c in text.split(",") if c.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected BATCHxCTX cells, got {text!r}")
    if any(len(c) != 2 for c in cells):
        raise argparse.ArgumentTypeError(f"expected BATCHxCTX cells, got {text!r}")
    return cells


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="model config file (key = value lines)")
    common.add_argument("--precision", choices=("float32", "float64"))
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--out", help="output CSV path (default: stdout)")
    common.add_argument("--threads", type=int, default=1,
                        help="BLAS threads; >1 speeds up batched work but makes timings less stable")

    p = _Parser(prog="xlstm-desk", description="mLSTM desk benchmarks, cost model and training")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    models = dict(default="mlstm,attention", help="comma-separated subset of mlstm,attention")
    g = sub.add_parser("generate", parents=[common], help="decode throughput vs prefill length")
    g.add_argument("--prefill-lens", type=_ints, default=[0, 512, 4096])
    g.add_argument("--gen-len", type=int, default=100)
    g.add_argument("--repeats", type=int, default=5)
    g.add_argument("--warmup", type=int, default=2)
    g.add_argument("--batch", type=int, default=1)
    g.add_argument("--models", **models)

    t = sub.add_parser("ttft", parents=[common], help="time to first 1 / 100 tokens")
    t.add_argument("--prefill-lens", type=_ints, default=[0, 512, 4096])
    t.add_argument("--first-n", type=_ints, default=[1, 100])
    t.add_argument("--repeats", type=int, default=5)
    t.add_argument("--warmup", type=int, default=2)
    t.add_argument("--models", **models)

    f = sub.add_parser("prefill", parents=[common], help="prefill throughput on a (batch, ctx) grid")
    f.add_argument("--total-tokens", type=int, default=4096)
    f.add_argument("--grid", type=_grid, default=_grid("8x512,4x1024,2x2048,1x4096"))
    f.add_argument("--repeats", type=int, default=3)
    f.add_argument("--warmup", type=int, default=1)
    f.add_argument("--models", **models)

    m = sub.add_parser("memory", parents=[common], help="state / KV-cache bytes vs generation length")
    m.add_argument("--gen-lens", type=_ints, default=[100, 1000, 4000])
    m.add_argument("--no-measure", action="store_true", help="skip traced allocation runs")
    m.add_argument("--models", **models)

    a = sub.add_parser("analyze", parents=[common], help="FLOP / parameter / state-size report")
    a.add_argument("--seq-len", type=int, default=8192)
    a.add_argument("--chunk-size", type=int, default=64)
    a.add_argument("--heads", type=_ints, default=[4, 8, 16, 32],
                   help="head counts to sweep when no --config is given")

    tr = sub.add_parser("train", parents=[common], help="train on a text or token file")
    tr.add_argument("--data", help="UTF-8 text (blank-line separated documents) or token file with .idx")
    tr.add_argument("--steps", type=int, default=300)
    tr.add_argument("--lr", type=float, default=3e-3)
    tr.add_argument("--warmup-steps", type=int, default=20)
    tr.add_argument("--cooldown-steps", type=int, default=0)
    tr.add_argument("--schedule", choices=("exponential", "cosine"), default="cosine")
    tr.add_argument("--batch-size", type=int, default=4)
    tr.add_argument("--context-len", type=int, default=128)
    tr.add_argument("--mode", choices=("chunkwise", "recurrent"), default="chunkwise")
    tr.add_argument("--checkpoint", help="write final parameters here")
    return p


def _model_config(args, default):
    from .model import ModelConfig, load_config

    cfg = load_config(args.config) if args.config else default()
    if args.precision:
        kw = cfg.to_dict()
        kw["precision"] = args.precision
        cfg = ModelConfig(**kw)
    return cfg


def _models(text: str):
    from .bench import MODELS

    out = tuple(m.strip() for m in text.split(",") if m.strip())
    bad = [m for m in out if m not in MODELS]
    if bad or not out:
        raise UsageError(f"--models must be a subset of {','.join(MODELS)}")
    return out


def _emit(text: str, out) -> None:
    if out:
        with open(out, "w", newline="") as f:
            f.write(text)
    else:
        sys.stdout.write(text)


def _load_docs(path):
    from .trainer import ingest_text, read_token_file

    if path is None:
        return None
    if os.path.exists(str(path) + ".idx"):
        return read_token_file(path)
    with open(path, encoding="utf-8") as f:
        text = f.read()
    docs = [d for d in text.split("\n\n") if d.strip()]
    if not docs:
        raise ValueError(f"{path} holds no documents")
    return ingest_text(docs)


def _demo_docs(seed: int):
    import numpy as np

    rng = np.random.default_rng(seed)
    words = "the of and to in is for on with as by at from it that this be are was".split()
    return [np.frombuffer(" ".join(rng.choice(words, rng.integers(20, 60))).encode(), dtype=np.uint8)
            .astype(np.int64) for _ in range(64)]


def run(args) -> int:
    from . import bench
    from .model import ModelConfig

    cmd = args.command
    if cmd in ("generate", "ttft", "prefill", "memory"):
        cfg = _model_config(args, bench.bench_config)
        models = _models(args.models)
        if cmd == "generate":
            rows = bench.bench_generate(cfg, args.prefill_lens, args.gen_len, args.repeats, args.warmup,
                                        models, args.batch, args.seed)
        elif cmd == "ttft":
            rows = bench.bench_ttft(cfg, args.prefill_lens, args.first_n, args.repeats, args.warmup,
                                    models, args.seed)
        elif cmd == "prefill":
            rows = bench.bench_prefill(cfg, args.total_tokens, args.grid, args.repeats, args.warmup,
                                       models, args.seed)
        else:
            rows = bench.bench_memory(cfg, args.gen_lens, models, not args.no_measure, args.seed)
        _emit(bench.results_to_csv(rows), args.out)
        return 0

    if cmd == "analyze":
        from .analysis import cost_report, reports_to_csv, reports_to_table, xlstm_7b_config

        if args.config:
            reports = [cost_report(_model_config(args, ModelConfig), args.seq_len, args.chunk_size,
                                   config_id=os.path.basename(args.config))]
        else:
            reports = [cost_report(xlstm_7b_config(h), args.seq_len, args.chunk_size,
                                   config_id=f"7b-h{h}") for h in args.heads]
        if args.out:
            _emit(reports_to_csv(reports), args.out)
            sys.stdout.write(reports_to_table(reports))
        else:
            sys.stdout.write(reports_to_csv(reports))
            sys.stderr.write(reports_to_table(reports))
        return 0

    if cmd == "train":
        from .model import init_params
        from .trainer import PackedDataset, TrainConfig, train

        cfg = _model_config(args, lambda: ModelConfig(num_blocks=2, d_model=32, num_heads=2))
        docs = _load_docs(args.data) or _demo_docs(args.seed)
        tcfg = TrainConfig(peak_lr=args.lr, warmup_steps=args.warmup_steps, total_steps=args.steps,
                           cooldown_steps=args.cooldown_steps, schedule=args.schedule,
                           batch_ramp=[(0, args.batch_size)], context_len=args.context_len, seed=args.seed)
        params = init_params(cfg, args.seed)
        data = PackedDataset(docs, args.context_len, seed=args.seed)
        log = train(params, cfg, tcfg, data, checkpoint_path=args.checkpoint, mode=args.mode)
        if args.out:
            log.to_csv(args.out)
        else:
            import tempfile

            with tempfile.TemporaryDirectory() as d:
                path = os.path.join(d, "log.csv")
                log.to_csv(path)
                with open(path) as f:
                    sys.stdout.write(f.read())
        return 0
    raise UsageError(f"unknown command {cmd!r}")


def _fail(kind: str, message: str, code: int) -> int:
    sys.stderr.write(json.dumps({"error": kind, "message": message}) + "\n")
    return code


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as e:
        return _fail("usage", str(e), 2)
    for var in THREAD_VARS:
        os.environ.setdefault(var, str(args.threads))
    try:
        return run(args)
    except UsageError as e:
        return _fail("usage", str(e), 2)
    except MemoryError as e:
        return _fail("MemoryError", str(e) or "out of memory", 3)
    except Exception as e:  # surfaced as a machine-readable line
        return _fail(type(e).__name__, str(e), 1)
