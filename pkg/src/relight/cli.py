"""Command-line entry point: ``relight synth | train | eval | infer | bench``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical abort.
"""
from __future__ import annotations

import argparse
import logging
import os
import statistics
import sys
import time
from pathlib import Path

from threadpoolctl import threadpool_limits

from . import checkpoint, config, data, net
from . import tensor as T
from .checkpoint import CheckpointError
from .data import DatasetError, ImageError
from .trainer import NumericalError, evaluate, predict, train_two_stage

logger = logging.getLogger("relight")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _echo(values: dict) -> None:
    print("# effective configuration")
    for line in config.dump(values).splitlines():
        print(f"#   {line}")
    sys.stdout.flush()


# -- synth -----------------------------------------------------------------

def cmd_synth(args) -> int:
    _echo({"seed": args.seed, "scenes": args.scenes, "size": args.size,
           "out": args.out, "split": args.split})
    if args.size % 16:
        raise UsageError(f"--size must be divisible by 16, got {args.size}")
    manifest = data.synth_generate(args.seed, args.scenes, args.size, args.out, args.split)
    manifest.to_csv(Path(args.out) / f"{args.split}_manifest.csv")
    print(f"wrote {len(manifest)} scenes to {Path(args.out) / args.split}")
    return EXIT_OK


# -- train -----------------------------------------------------------------

def cmd_train(args) -> int:
    values = config.load(args.config) if args.config else dict(config.DEFAULTS)
    if args.data:
        values["data_root"] = args.data
    if args.out:
        values["out_dir"] = args.out
    if not values["data_root"] or not values["out_dir"]:
        raise UsageError("train needs a dataset root (--data) and an output dir (--out)")
    _echo(values)
    train_cfg = config.train_config(values)
    net_cfg = config.net_config(values)
    weights = config.loss_weights(values)
    out = Path(values["out_dir"])
    out.mkdir(parents=True, exist_ok=True)

    manifest = data.scan_dataset(values["data_root"], values["split"])
    samples = data.load_pairs(manifest, half=train_cfg.train_resize)
    print(f"training on {len(samples)} pairs from {manifest.root / manifest.split}"
          + (f" ({manifest.skipped} incomplete scenes skipped)" if manifest.skipped else ""))

    params = net.init_params(net_cfg)
    log_path = out / "train.log"
    with open(log_path, "w", encoding="utf-8") as log:
        def on_step(rec):
            log.write(rec.line() + "\n")

        def on_epoch(stage, epoch, state, step):
            log.flush()
            every = train_cfg.checkpoint_every
            if every and (epoch + 1) % every == 0:
                ck = checkpoint.Checkpoint(net_cfg, params, state, step, stage)
                checkpoint.save(out / f"stage{stage}_epoch{epoch + 1:05d}.dmsh", ck)

        def on_stage_end(stage, p):
            checkpoint.save(out / f"stage{stage}.dmsh", checkpoint.Checkpoint(net_cfg, p, None, 0, stage))

        ckpt = train_two_stage(train_cfg, net_cfg, samples, weights=weights, params=params,
                               on_step=on_step, on_epoch=on_epoch, on_stage_end=on_stage_end)
    final = out / "final.dmsh"
    checkpoint.save(final, ckpt)
    print(f"{ckpt.global_step} steps; log {log_path}; checkpoint {final}")
    if ckpt.history:
        print(f"last loss {ckpt.history[-1].loss:.6g}")
    if args.plots:
        from . import plots
        print(f"figure {plots.loss_curve(ckpt.history, out / 'loss_curve.png')}")
    if values["val_split"]:
        val = data.scan_dataset(values["data_root"], values["val_split"])
        _report(evaluate(ckpt.params, net_cfg.stacks, val), out / "val_metrics.tsv")
    return EXIT_OK


def _report(report, tsv_path=None) -> None:
    sys.stdout.write(report.table())
    if tsv_path is not None:
        Path(tsv_path).write_text(report.lines(), encoding="utf-8")
        print(f"per-sample rows written to {tsv_path}")


# -- eval ------------------------------------------------------------------

def cmd_eval(args) -> int:
    ckpt = checkpoint.load(args.ckpt)
    _echo({"ckpt": args.ckpt, "data": args.data, "split": args.split, **ckpt.config.to_dict()})
    samples = data.load_pairs(data.scan_dataset(args.data, args.split))
    report = evaluate(ckpt.params, ckpt.config.stacks, samples)
    _report(report, args.tsv)
    if args.lines:
        sys.stdout.write(report.lines())
    if args.figures:
        from . import plots
        fig_dir = Path(args.figures)
        rows = [(sid, inp, predict(ckpt.params, ckpt.config.stacks, inp), tgt, db)
                for (sid, inp, tgt), db in zip(samples, report.psnr)]
        print(f"figure {plots.comparison_grid(rows, fig_dir / 'comparison.png')}")
        print(f"figure {plots.metrics_bars(report, fig_dir / 'metrics.png')}")
    return EXIT_OK


# -- infer -----------------------------------------------------------------

def cmd_infer(args) -> int:
    ckpt = checkpoint.load(args.ckpt)
    _echo({"ckpt": args.ckpt, "in": args.input, "out": args.out, **ckpt.config.to_dict()})
    src, dst = Path(args.input), Path(args.out)
    if src.is_dir():
        jobs = [(p, dst / p.name) for p in sorted(src.glob("*.png"))]
        if not jobs:
            raise DatasetError(f"no PNG files in {src}")
    else:
        jobs = [(src, dst / src.name if dst.is_dir() or args.out.endswith(os.sep) else dst)]
    for inp_path, out_path in jobs:
        image = data.load_image(inp_path)
        data.save_image(predict(ckpt.params, ckpt.config.stacks, image), out_path)
        print(f"{inp_path} -> {out_path}")
    return EXIT_OK


# -- bench -----------------------------------------------------------------

def time_forward(params: dict, stacks: int, image, repeats: int, warmup: int = 3) -> list:
    with T.no_grad():
        for _ in range(warmup):
            net.forward(params, image, stacks)
        times = []
        for _ in range(repeats):
            t0 = time.perf_counter()
            net.forward(params, image, stacks)
            times.append(time.perf_counter() - t0)
    return times


def bench(net_cfg: net.NetConfig, size: int, repeats: int, params=None, seed: int = 0) -> dict:
    """Median forward seconds for one and two stacks at matched width, and their ratio.

    Timings alternate between the two models so drift hits both equally.
    """
    if size % 16:
        raise UsageError(f"--size must be divisible by 16, got {size}")
    full = net.init_params(net.NetConfig(net_cfg.base_channels, 2, net_cfg.init_seed), requires_grad=False)
    if params is not None:
        full.update({k: v for k, v in params.items() if k in full})
    image = T.randu((1, 3, size, size), seed, 0.0, 1.0)
    single, stacked = [], []
    time_forward(full, 1, image, 0)
    time_forward(full, 2, image, 0)
    for _ in range(repeats):
        single += time_forward(full, 1, image, 1, warmup=0)
        stacked += time_forward(full, 2, image, 1, warmup=0)
    s1, s2 = statistics.median(single), statistics.median(stacked)
    return {"single": s1, "stacked": s2, "ratio": s2 / s1}


def cmd_bench(args) -> int:
    if args.ckpt:
        ckpt = checkpoint.load(args.ckpt)
        net_cfg, params = ckpt.config, ckpt.params
    else:
        net_cfg, params = net.NetConfig(args.channels, 2, 0), None
    _echo({"ckpt": args.ckpt or "", "size": args.size, "repeats": args.repeats,
           "base_channels": net_cfg.base_channels})
    res = bench(net_cfg, args.size, args.repeats, params)
    print("model\tmedian_s")
    print(f"single\t{res['single']:.6f}")
    print(f"stacked\t{res['stacked']:.6f}")
    print(f"ratio\t{res['ratio']:.4f}")
    return EXIT_OK


# -- entry -----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="relight", description="Stacked multi-scale relighting network")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="render a synthetic relighting dataset")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--scenes", type=int, default=16)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--split", default="train")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="two-stage training")
    p.add_argument("--config", help="key = value file; see README for keys")
    p.add_argument("--data", help="dataset root (overrides data_root)")
    p.add_argument("--out", help="output directory (overrides out_dir)")
    p.add_argument("--plots", action="store_true", help="write loss_curve.png")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="PSNR/SSIM of a checkpoint on a dataset split")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="train")
    p.add_argument("--tsv", help="write sample_id<TAB>psnr<TAB>ssim rows here")
    p.add_argument("--lines", action="store_true", help="also print the TSV rows")
    p.add_argument("--figures", help="directory for comparison and metric figures")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", help="relight a PNG or a directory of PNGs")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("bench", help="forward-pass timing, single vs stacked")
    p.add_argument("--ckpt")
    p.add_argument("--size", type=int, default=256)
    p.add_argument("--repeats", type=int, default=10)
    p.add_argument("--channels", type=int, default=8)
    p.set_defaults(func=cmd_bench)
    return parser


def _dispatch(args) -> int:
    try:
        return args.func(args)
    except (UsageError, config.ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DatasetError, ImageError, CheckpointError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValueError, T.ShapeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    # BLAS threads default to 1 so reductions run in a fixed order
    threads = int(os.environ.get("RELIGHT_THREADS", "1"))
    with threadpool_limits(limits=threads):
        return _dispatch(args)


if __name__ == "__main__":
    sys.exit(main())
