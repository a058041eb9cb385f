#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
Gated DiT - Command Line
Subcommands: train, sample, ablate, compare, bench, report, overhead

Every config key is also a --kebab-case flag; flags override the --config file.
Exit codes: 0 success, 1 usage / config error, 2 runtime failure.
"""
import argparse
import logging
import os
import re
import sys
import time
from typing import List, Optional, Sequence

import numpy as np
import pandas as pd

from . import checkpoint
from .config import RunConfig, TrainMode, config_keys, from_flat_dict, load_run_config, to_flat_dict
from .data import (
    STREAM_BENCH, STREAM_SAMPLE, TaskKind, batch_rng, make_batch, measure_throughput, write_ppm,
)
from .errors import ConfigError, GatedDiTError, NonFiniteError, ReportFormatError
from .evaluation import (
    CONVERGENCE_COLUMNS, FLOAT_FORMAT, ablation_grid, convergence_compare,
    granularity_ratio, overhead_report, steps_to_threshold, write_metrics_csv,
)
from .gates import GateSpec, expand_axes, resolve_variant
from .ledger import RunLedger

logger = logging.getLogger(__name__)

LOG_FORMAT = "%(asctime)s - %(levelname)s - %(message)s"
CHECKPOINT_FILE = "checkpoint.gtck"
METRICS_FILE = "metrics.csv"
LOG_FILE = "gated_dit.log"
EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    """Usage errors surface as ConfigError so main() maps them to exit code 1"""

    def error(self, message):
        self.print_usage(sys.stderr)
        raise ConfigError([(None, message)], source="usage")


# ==================== LOGGING ====================

def setup_logging(level: Optional[str] = None):
    level_name = (level or os.environ.get("GATED_DIT_LOG_LEVEL", "INFO")).upper()
    logging.basicConfig(
        level=getattr(logging, level_name, logging.INFO),
        format=LOG_FORMAT,
        handlers=[logging.StreamHandler()],
        force=True,
    )


def attach_file_log(run_dir: str) -> logging.Handler:
    os.makedirs(run_dir, exist_ok=True)
    handler = logging.FileHandler(os.path.join(run_dir, LOG_FILE), encoding="utf-8")
    handler.setFormatter(logging.Formatter(LOG_FORMAT))
    logging.getLogger().addHandler(handler)
    return handler


def detach_file_log(handler: Optional[logging.Handler]):
    if handler is not None:
        logging.getLogger().removeHandler(handler)
        handler.close()


# ==================== CONFIG PLUMBING ====================

def _kebab(key: str) -> str:
    return key.replace("_", "-")


def add_config_flags(parser: argparse.ArgumentParser, exclude: Sequence[str] = ()):
    parser.add_argument("--config", help="key = value run file (UTF-8, # comments)")
    group = parser.add_argument_group("config overrides")
    for key in config_keys():
        if key in exclude:
            continue
        group.add_argument(f"--{_kebab(key)}", dest=f"cfg_{key}", default=None, metavar="VALUE")
    parser.add_argument("--quiet", action="store_true", help="no progress bars")
    parser.add_argument("--log-level", default=None, help="DEBUG / INFO / WARNING / ERROR")


def config_from_args(args: argparse.Namespace) -> RunConfig:
    overrides = {key: getattr(args, f"cfg_{key}", None) for key in config_keys()}
    return load_run_config(args.config, overrides)


def _progress(args) -> bool:
    return not args.quiet and sys.stderr.isatty()


def _float_list(text: Sequence[str]) -> List[float]:
    return [float(v) for v in text]


# ==================== COMMANDS ====================

def cmd_train(args) -> int:
    """Train one run; writes checkpoint.gtck, metrics.csv and run.json into output_dir"""
    from .trainer import Trainer

    cfg = config_from_args(args)
    run_dir = cfg.output_dir
    handler = attach_file_log(run_dir)
    ckpt_path = os.path.join(run_dir, CHECKPOINT_FILE)
    metrics_path = os.path.join(run_dir, METRICS_FILE)
    ledger = RunLedger(run_dir)

    try:
        trainer = Trainer(cfg, progress=_progress(args), raise_on_divergence=True,
                          checkpoint_cb=lambda params, step: checkpoint.save(ckpt_path, params))
        if cfg.steps == 0:
            checkpoint.save(ckpt_path, trainer.params)
        try:
            record = trainer.run()
        except NonFiniteError as e:
            logger.error(f"❌ Failed: {e} (last checkpoint kept at {ckpt_path})")
            ledger.write("train", to_flat_dict(cfg), summary={"diverged": str(e)})
            return EXIT_RUNTIME
        write_metrics_csv(record, metrics_path)
        ledger.write("train", to_flat_dict(cfg), summary={
            "steps": record.completed_steps,
            "final_loss": record.final_loss if record.smoothed else None,
            "wall_time_s": round(record.wall_time, 3),
            **{k: v for k, v in record.final_metrics().items()},
        })
        logger.info(f"✅ Completed: checkpoint {ckpt_path}, metrics {metrics_path}")
        return EXIT_OK
    finally:
        detach_file_log(handler)


def _config_for_checkpoint(args, ckpt_path: str) -> RunConfig:
    """Config snapshot from the run.json beside a checkpoint, flags applied on top"""
    ledger = RunLedger.beside(ckpt_path)
    base = None
    if os.path.exists(ledger.path):
        packet = ledger.read()
        base = from_flat_dict(packet.get("config", {}), source=ledger.path)
    overrides = {key: getattr(args, f"cfg_{key}", None) for key in config_keys()}
    return load_run_config(args.config, overrides, base=base)


def cmd_sample(args) -> int:
    """n (condition, generated) P6 pairs per (steps, guidance) combination"""
    from .flow import sample_grid
    from .model import ConditionInput, ModelParams, VelocityModel

    cfg = _config_for_checkpoint(args, args.checkpoint)
    arrays = checkpoint.load(args.checkpoint)
    params = ModelParams.from_arrays(arrays, lora_scale=cfg.model.effective_lora_scale)
    task = TaskKind(args.task) if args.task else TaskKind(cfg.data.task)
    seed = cfg.seed
    steps_list = args.steps or [cfg.flow.sample_steps]
    guidance_list = _float_list(args.guidance) if args.guidance else [cfg.flow.guidance_scale]

    samples = make_batch(task, args.n, batch_rng(seed, STREAM_SAMPLE),
                         image_size=cfg.model.image_size, n_classes=cfg.model.n_classes)
    use_image = cfg.mode is not TrainMode.PRETRAIN
    conds = [ConditionInput(s.condition if use_image else None, s.class_id) for s in samples]
    shape = (cfg.model.channels, cfg.model.image_size, cfg.model.image_size)

    out_dir = args.out or os.path.join(os.path.dirname(os.path.abspath(args.checkpoint)), "samples")
    os.makedirs(out_dir, exist_ok=True)
    logger.info(f"🚀 Starting sampling: {args.n} condition(s), steps {steps_list}, guidance {guidance_list}")
    grid = sample_grid(VelocityModel(params, cfg.model), conds, steps_list, guidance_list, seed, shape)

    written = 0
    for i, sample in enumerate(samples):
        write_ppm(os.path.join(out_dir, f"cond_{i:03d}.ppm"), sample.condition)
        written += 1
    for (steps, g), images in grid.items():
        for i, image in enumerate(images):
            write_ppm(os.path.join(out_dir, f"sample_{i:03d}_s{steps}_g{g:g}.ppm"), image)
            written += 1
    logger.info(f"✅ Completed: {written} files in {out_dir}")
    return EXIT_OK


def _seeds(args, cfg: RunConfig) -> List[int]:
    return [int(s) for s in args.seeds] if args.seeds else [cfg.seed, cfg.seed + 1, cfg.seed + 2]


def cmd_ablate(args) -> int:
    cfg = config_from_args(args)
    if args.axes is not None:
        specs = expand_axes(args.axes, base=cfg.model.gate_spec)
    else:
        specs = GateSpec.ablation_variants()
    handler = attach_file_log(cfg.output_dir)
    try:
        grid = ablation_grid(cfg, specs, _seeds(args, cfg), output_dir=cfg.output_dir)
        RunLedger(cfg.output_dir).write("ablate", to_flat_dict(cfg), summary={
            "variants": [s.label for s in specs], "rows": len(grid),
            "diverged": int((grid["steps_to_threshold"] == "diverged").sum()),
        })
        print(grid.to_string(index=False))
        return EXIT_OK
    finally:
        detach_file_log(handler)


def cmd_compare(args) -> int:
    cfg = config_from_args(args)
    specs = [resolve_variant(name) for name in (args.variants or ["Ours", "w/o gating"])]
    handler = attach_file_log(cfg.output_dir)
    try:
        report = convergence_compare(cfg, specs, _seeds(args, cfg), output_dir=cfg.output_dir)
        RunLedger(cfg.output_dir).write("compare", to_flat_dict(cfg), summary={
            "variants": [s.label for s in specs],
            "mean_auc": report.summary.groupby("variant", sort=False)["auc"].mean().to_dict(),
        })
        print(report.summary_text())
        return EXIT_OK
    finally:
        detach_file_log(handler)


def bench_attention(sizes: Sequence[int], d_head: int = 16, repeats: int = 3, seed: int = 0) -> pd.DataFrame:
    """Best-of-repeats wall time of softmax vs linear attention per sequence length"""
    from .attention import linear_attention, softmax_attention
    from .numerics import constant, no_tape

    rows = []
    for n in sizes:
        rng = batch_rng(seed, STREAM_BENCH, int(n))
        q, k, v = (constant(rng.standard_normal((int(n), d_head))) for _ in range(3))
        timings = {}
        with no_tape():
            for name, kernel in (("softmax", softmax_attention), ("linear", linear_attention)):
                best = float("inf")
                for _ in range(repeats):
                    start = time.perf_counter()
                    kernel(q, k, v)
                    best = min(best, time.perf_counter() - start)
                timings[name] = best * 1000.0
        rows.append({"n": int(n), "softmax_ms": timings["softmax"], "linear_ms": timings["linear"],
                     "ratio": timings["softmax"] / timings["linear"]})
    return pd.DataFrame(rows, columns=["n", "softmax_ms", "linear_ms", "ratio"])


def cmd_bench(args) -> int:
    cfg = config_from_args(args)
    sizes = [int(s) for s in args.sizes]
    if not sizes:
        raise ConfigError([(None, "bench needs at least one size")], source="usage")
    frame = bench_attention(sizes, d_head=cfg.model.d_model // cfg.model.n_heads,
                            repeats=args.repeats, seed=cfg.seed)
    os.makedirs(cfg.output_dir, exist_ok=True)
    path = os.path.join(cfg.output_dir, "bench.csv")
    frame.to_csv(path, index=False, float_format="%.4f", lineterminator="\n")
    print(frame.to_string(index=False))
    if len(frame) > 1:
        first, last = frame.iloc[0], frame.iloc[-1]
        print(f"growth n={int(first['n'])}->{int(last['n'])}: "
              f"softmax x{last['softmax_ms'] / first['softmax_ms']:.2f}, "
              f"linear x{last['linear_ms'] / first['linear_ms']:.2f}")
    if args.scenes:
        print(f"scenes_per_second: {measure_throughput(args.scenes, seed=cfg.seed):.0f}")
    logger.info(f"✅ Completed: {path}")
    return EXIT_OK


def read_metrics_csv(path: str) -> pd.DataFrame:
    """Convergence-schema CSV; raises ReportFormatError naming file and line"""
    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False)
    except pd.errors.EmptyDataError:
        raise ReportFormatError(path, 1, "empty file")
    except pd.errors.ParserError as e:
        match = re.search(r"line (\d+)", str(e))
        raise ReportFormatError(path, int(match.group(1)) if match else None, f"unparseable CSV: {e}")
    if list(frame.columns) != CONVERGENCE_COLUMNS:
        raise ReportFormatError(path, 1, f"header {list(frame.columns)} != {CONVERGENCE_COLUMNS}")
    out = pd.DataFrame(index=frame.index)
    for col in CONVERGENCE_COLUMNS:
        raw = frame[col]
        values = pd.to_numeric(raw.where(raw != "", None), errors="coerce")
        bad = values.isna() & (raw != "")
        if col in ("step", "loss_smoothed", "loss_raw"):
            bad |= raw == ""
        if bad.any():
            row = int(bad.idxmax())
            raise ReportFormatError(path, row + 2, f"bad {col} value '{raw[row]}'")
        out[col] = values
    steps = out["step"].to_numpy()
    if len(steps) > 1 and np.any(np.diff(steps) <= 0):
        row = int(np.argmax(np.diff(steps) <= 0)) + 1
        raise ReportFormatError(path, row + 2, "steps are not increasing")
    return out


def _metrics_path(run_dir: str) -> str:
    if not os.path.isdir(run_dir):
        raise ReportFormatError(run_dir, None, "run directory does not exist")
    path = os.path.join(run_dir, METRICS_FILE)
    if not os.path.exists(path):
        raise ReportFormatError(path, None, "metrics file missing")
    return path


def build_report(run_dirs: Sequence[str], threshold_factor: float = 1.05) -> pd.DataFrame:
    """One row per run: auc, final loss, steps-to-threshold vs the first run"""
    curves = [(d, read_metrics_csv(_metrics_path(d))) for d in run_dirs]
    ref_final = curves[0][1]["loss_smoothed"].iloc[-1] if len(curves[0][1]) else float("nan")
    tau = threshold_factor * ref_final
    rows = []
    for run_dir, frame in curves:
        smoothed = frame["loss_smoothed"].tolist()
        last_eval = frame.dropna(subset=["edge_f1"]).tail(1)
        rows.append({
            "run": os.path.basename(os.path.normpath(run_dir)),
            "steps": len(frame),
            "auc": float(np.sum(smoothed)),
            "final_loss": smoothed[-1] if smoothed else float("nan"),
            "steps_to_threshold": steps_to_threshold(smoothed, tau) if np.isfinite(tau) else None,
            "edge_f1": float(last_eval["edge_f1"].iloc[0]) if len(last_eval) else float("nan"),
            "mse": float(last_eval["mse"].iloc[0]) if len(last_eval) else float("nan"),
            "psnr": float(last_eval["psnr"].iloc[0]) if len(last_eval) else float("nan"),
        })
    return pd.DataFrame(rows)


def write_loss_chart(run_dirs: Sequence[str], path: str) -> str:
    """Interactive smoothed-loss curves"""
    import plotly.graph_objects as go

    fig = go.Figure()
    for run_dir in run_dirs:
        frame = read_metrics_csv(_metrics_path(run_dir))
        fig.add_trace(go.Scatter(x=frame["step"], y=frame["loss_smoothed"], mode="lines",
                                 name=os.path.basename(os.path.normpath(run_dir))))
    fig.update_layout(title="Smoothed training loss", xaxis_title="step", yaxis_title="loss",
                      template="plotly_white")
    fig.write_html(path, include_plotlyjs="cdn")
    return path


def cmd_report(args) -> int:
    cfg = config_from_args(args)
    report = build_report(args.run_dirs, threshold_factor=cfg.eval.threshold_factor)
    out_dir = args.out or cfg.output_dir
    os.makedirs(out_dir, exist_ok=True)
    csv_path = os.path.join(out_dir, "report.csv")
    report.to_csv(csv_path, index=False, float_format=FLOAT_FORMAT, lineterminator="\n")
    write_loss_chart(args.run_dirs, os.path.join(out_dir, "report.html"))
    print(report.to_string(index=False))
    if len(report) > 1:
        best = report.loc[report["auc"].idxmin(), "run"]
        print(f"lowest loss AUC: {best}")
    logger.info(f"✅ Completed: {csv_path}")
    return EXIT_OK


def cmd_overhead(args) -> int:
    cfg = config_from_args(args)
    frame = overhead_report(cfg.model)
    os.makedirs(cfg.output_dir, exist_ok=True)
    frame.to_csv(os.path.join(cfg.output_dir, "overhead.csv"), index=False, lineterminator="\n")
    print(frame.to_string(index=False))
    print(f"element_wise / token_wise gate ratio: "
          f"{granularity_ratio(cfg.model.d_model, cfg.model.n_blocks):g}")
    return EXIT_OK


COMMANDS = {
    "train": cmd_train, "sample": cmd_sample, "ablate": cmd_ablate, "compare": cmd_compare,
    "bench": cmd_bench, "report": cmd_report, "overhead": cmd_overhead,
}


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    add_config_flags(common)
    # sample owns --steps (Euler step counts) and --task
    sample_common = _Parser(add_help=False)
    add_config_flags(sample_common, exclude=("steps", "task"))

    parser = _Parser(prog="gated-dit", description="Gated linear-attention diffusion transformer")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("train", parents=[common], help="train one run")

    p = sub.add_parser("sample", parents=[sample_common], help="sample images from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--task", choices=[t.value for t in TaskKind])
    p.add_argument("--n", type=int, default=4)
    p.add_argument("--steps", type=int, nargs="+", help="one or more Euler step counts")
    p.add_argument("--guidance", nargs="+", help="one or more guidance scales")
    p.add_argument("--out", help="output directory (default: samples/ beside the checkpoint)")

    p = sub.add_parser("ablate", parents=[common], help="gate ablation grid")
    p.add_argument("--axes", nargs="*", help="gating interaction position granularity score_source")
    p.add_argument("--seeds", nargs="+")

    p = sub.add_parser("compare", parents=[common], help="convergence comparison of named variants")
    p.add_argument("--variants", nargs="+", help="e.g. Ours 'w/o gating' Elementwise")
    p.add_argument("--seeds", nargs="+")

    p = sub.add_parser("bench", parents=[common], help="softmax vs linear attention timing")
    p.add_argument("--sizes", nargs="+", default=["256", "1024"])
    p.add_argument("--repeats", type=int, default=3)
    p.add_argument("--scenes", type=int, default=0, help="also measure scene generation rate")

    p = sub.add_parser("report", parents=[common], help="merge run directories into one comparison")
    p.add_argument("run_dirs", nargs="+")
    p.add_argument("--out", help="directory for report.csv / report.html")

    sub.add_parser("overhead", parents=[common], help="parameter overhead table")
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except ConfigError as e:
        logging.getLogger(__name__).error(str(e))
        return EXIT_USAGE
    setup_logging(args.log_level)

    try:
        return COMMANDS[args.command](args)
    except ConfigError as e:
        logger.error(f"❌ Config error:\n{e}")
        return EXIT_USAGE
    except (GatedDiTError, OSError) as e:
        logger.error(f"❌ Failed: {e}")
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
