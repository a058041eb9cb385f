#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
Gated DiT - Evaluation
Condition-adherence metrics and the convergence / overhead / ablation experiments.

Metrics:
- edge_f1: edges of the generated image vs the condition edge map (1-px tolerance)
- mse_metric: generated image mapped through the task's condition operator vs the condition
- psnr: against the clean target, capped at 99 dB

Experiments:
- convergence_compare: several gate specs trained on identical data per seed
- ablation_grid: one run per grid cell, final metrics in report order
- overhead_report: backbone / LoRA / gate parameter counts and ratios
"""
import concurrent.futures
import logging
import os
from dataclasses import dataclass, field, replace
from typing import Any, Dict, List, Optional, Sequence

import numpy as np
import pandas as pd

from .config import ModelConfig, RunConfig
from .data import TaskKind, condition_operator, edge_map
from .errors import DimensionError, GatedDiTError, NonFiniteError
from .gates import GateSpec, Granularity, gate_param_count

logger = logging.getLogger(__name__)

PSNR_CAP = 99.0
GATE_BUDGET_PCT = 0.1
CONVERGENCE_COLUMNS = ["step", "loss_smoothed", "loss_raw", "edge_f1", "mse", "psnr"]
GRID_COLUMNS = ["variant", "seed", "final_loss", "edge_f1", "mse", "psnr", "steps_to_threshold"]
FLOAT_FORMAT = "%.8g"


# ==================== METRICS ====================

def dilate(mask: np.ndarray, radius: int = 1) -> np.ndarray:
    """Binary dilation with a (2r+1)^2 square"""
    if radius <= 0:
        return mask.astype(bool)
    h, w = mask.shape
    padded = np.pad(mask.astype(bool), radius, mode="constant", constant_values=False)
    out = np.zeros((h, w), dtype=bool)
    for dy in range(2 * radius + 1):
        for dx in range(2 * radius + 1):
            out |= padded[dy:dy + h, dx:dx + w]
    return out


def f1_from_edge_maps(pred: np.ndarray, ref: np.ndarray, tolerance: int = 1) -> float:
    """
    Precision counts predicted pixels near a reference pixel, recall counts
    reference pixels near a predicted pixel. Two empty maps match (F1 = 1).
    """
    pred = np.asarray(pred, dtype=bool)
    ref = np.asarray(ref, dtype=bool)
    if pred.shape != ref.shape:
        raise DimensionError("edge_f1", pred.shape, ref.shape)
    n_pred, n_ref = int(pred.sum()), int(ref.sum())
    if n_pred == 0 and n_ref == 0:
        return 1.0
    if n_pred == 0 or n_ref == 0:
        return 0.0
    precision = np.logical_and(pred, dilate(ref, tolerance)).sum() / n_pred
    recall = np.logical_and(ref, dilate(pred, tolerance)).sum() / n_ref
    if precision + recall == 0:
        return 0.0
    return float(2.0 * precision * recall / (precision + recall))


def _as_edge_mask(condition_edge: np.ndarray) -> np.ndarray:
    cond = np.asarray(condition_edge)
    if cond.ndim == 3:
        cond = cond[0]
    return cond > 0.5


def edge_f1(generated: np.ndarray, condition_edge: np.ndarray, tolerance: int = 1) -> float:
    """condition_edge: binary [H x W] map or a 3-channel edge condition image"""
    return f1_from_edge_maps(edge_map(generated), _as_edge_mask(condition_edge), tolerance)


def mse_metric(generated: np.ndarray, reference_condition: np.ndarray, task) -> float:
    generated = np.asarray(generated, dtype=np.float64)
    reference_condition = np.asarray(reference_condition, dtype=np.float64)
    if generated.shape != reference_condition.shape:
        raise DimensionError("mse_metric", generated.shape, reference_condition.shape)
    op = condition_operator(TaskKind(task))
    if op is None:
        raise GatedDiTError(f"mse_metric is undefined for task '{TaskKind(task).value}' "
                            "(no pixel-aligned condition operator)")
    return float(np.mean((op(generated) - reference_condition) ** 2))


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError("psnr", a.shape, b.shape)
    err = float(np.mean((a - b) ** 2))
    if err <= 0:
        return PSNR_CAP
    return float(min(PSNR_CAP, 10.0 * np.log10(1.0 / err)))


def ema(values: Sequence[float], alpha: float) -> List[float]:
    smoothed, s = [], None
    for v in values:
        s = v if s is None else (1.0 - alpha) * s + alpha * v
        smoothed.append(float(s))
    return smoothed


def steps_to_threshold(smoothed: Sequence[float], tau: float) -> Optional[int]:
    """First 1-based step with smoothed loss below tau"""
    for i, v in enumerate(smoothed):
        if v < tau:
            return i + 1
    return None


# ==================== RUN RECORD ====================

@dataclass
class RunRecord:
    """Loss series and periodic metrics of one training run"""
    config: Dict[str, Any]
    seed: int
    losses: List[float] = field(default_factory=list)
    smoothed: List[float] = field(default_factory=list)
    metrics: List[Dict[str, float]] = field(default_factory=list)   # step, edge_f1, mse, psnr
    wall_time: float = 0.0
    diverged_at: Optional[int] = None
    label: str = ""

    @property
    def completed_steps(self) -> int:
        return len(self.losses)

    @property
    def final_loss(self) -> float:
        return self.smoothed[-1] if self.smoothed else float("nan")

    @property
    def auc(self) -> float:
        """Area under the smoothed loss curve, one unit per step"""
        return float(np.sum(self.smoothed)) if self.smoothed else float("nan")

    def final_metrics(self) -> Dict[str, float]:
        if not self.metrics:
            return {"edge_f1": float("nan"), "mse": float("nan"), "psnr": float("nan")}
        last = self.metrics[-1]
        return {k: last[k] for k in ("edge_f1", "mse", "psnr")}

    def to_frame(self) -> pd.DataFrame:
        """Convergence schema; eval columns empty on steps without evaluation"""
        frame = pd.DataFrame({
            "step": np.arange(1, len(self.losses) + 1, dtype=np.int64),
            "loss_smoothed": self.smoothed,
            "loss_raw": self.losses,
        })
        if self.metrics:
            m = pd.DataFrame(self.metrics).set_index("step")
            frame = frame.join(m[["edge_f1", "mse", "psnr"]], on="step")
        else:
            for col in ("edge_f1", "mse", "psnr"):
                frame[col] = np.nan
        return frame[CONVERGENCE_COLUMNS]


def write_metrics_csv(record: RunRecord, path: str) -> str:
    record.to_frame().to_csv(path, index=False, float_format=FLOAT_FORMAT, lineterminator="\n")
    return path


# ==================== OVERHEAD ====================

def overhead_report(cfg: ModelConfig) -> pd.DataFrame:
    """Rows backbone / LoRA / gate with their share of the backbone in percent"""
    from .model import overhead_counts

    counts = overhead_counts(cfg)
    backbone = counts["backbone"]
    rows = [
        {"component": "backbone", "params": backbone},
        {"component": f"lora (rank {cfg.lora_rank})", "params": counts["lora"]},
        {"component": f"gate ({cfg.gate_spec.granularity.value})", "params": counts["gate"]},
    ]
    frame = pd.DataFrame(rows)
    frame["ratio_pct"] = (100.0 * frame["params"] / backbone).round(4)

    gate_pct = 100.0 * counts["gate"] / backbone
    if gate_pct >= GATE_BUDGET_PCT:
        logger.warning(f"gate parameters are {gate_pct:.4f}% of the backbone (budget {GATE_BUDGET_PCT}%)")
    return frame


def granularity_ratio(d_model: int, n_blocks: int) -> float:
    """element-wise / token-wise gate count; equals d_model"""
    return (gate_param_count(d_model, n_blocks, Granularity.ELEMENT_WISE)
            / gate_param_count(d_model, n_blocks, Granularity.TOKEN_WISE))


# ==================== EXPERIMENT RUNS ====================

def variant_label(spec: GateSpec) -> str:
    return spec.label


def _unique_labels(specs: Sequence[GateSpec]) -> List[str]:
    labels, seen = [], {}
    for spec in specs:
        base = variant_label(spec)
        seen[base] = seen.get(base, 0) + 1
        labels.append(base if seen[base] == 1 else f"{base}#{seen[base]}")
    return labels


def run_cell(config: RunConfig, label: str = "") -> RunRecord:
    """Train one (spec, seed) cell; divergence is recorded, not raised"""
    from .trainer import Trainer

    record = Trainer(config, progress=False).run()
    record.label = label
    return record


def _run_cells(cells: List[tuple], jobs: int) -> List[RunRecord]:
    """cells: (config, label); results come back in cell order"""
    results: List[Optional[RunRecord]] = [None] * len(cells)
    if jobs <= 1:
        for i, (cfg, label) in enumerate(cells):
            results[i] = _safe_cell(cfg, label)
        return results
    with concurrent.futures.ProcessPoolExecutor(max_workers=jobs) as executor:
        futures = {executor.submit(_safe_cell, cfg, label): i for i, (cfg, label) in enumerate(cells)}
        for future in concurrent.futures.as_completed(futures):
            i = futures[future]
            results[i] = future.result()
            rec = results[i]
            status = "❌ diverged" if rec.diverged_at is not None else "✅"
            logger.info(f"{status} [{sum(r is not None for r in results)}/{len(cells)}] "
                        f"{rec.label} seed {rec.seed}")
    return results


def _safe_cell(cfg: RunConfig, label: str) -> RunRecord:
    try:
        return run_cell(cfg, label)
    except NonFiniteError as e:
        logger.error(f"❌ {label} seed {cfg.seed}: {e}")
        return RunRecord(config={}, seed=cfg.seed, diverged_at=getattr(e, "step", 0), label=label)


@dataclass
class ComparisonReport:
    curves: pd.DataFrame          # variant, seed + convergence columns
    summary: pd.DataFrame         # variant, seed, auc, final_loss, steps_to_threshold, diverged
    comparison: pd.DataFrame      # per non-reference variant and seed: auc_ratio, steps_ratio
    records: List[RunRecord] = field(default_factory=list)

    def summary_text(self) -> str:
        lines = []
        for variant, group in self.summary.groupby("variant", sort=False):
            lines.append(f"{variant}: mean AUC {group['auc'].mean():.4f}, "
                         f"mean final loss {group['final_loss'].mean():.5f}")
        if not self.comparison.empty:
            for variant, group in self.comparison.groupby("variant", sort=False):
                wins = int((group["auc_ratio"] < 1.0).sum())
                lines.append(f"reference beats {variant} on AUC in {wins}/{len(group)} seeds")
        return "\n".join(lines)


def _reference_index(specs: Sequence[GateSpec]) -> int:
    for i, spec in enumerate(specs):
        if spec.enabled:
            return i
    return 0


def convergence_compare(base: RunConfig, specs: Sequence[GateSpec], seeds: Sequence[int],
                        steps: Optional[int] = None, task=None, jobs: Optional[int] = None,
                        output_dir: Optional[str] = None) -> ComparisonReport:
    """
    Train every spec on every seed with identical data order per seed.
    tau per seed = threshold_factor x the reference (first gated) spec's final smoothed loss.
    """
    specs = list(specs)
    seeds = [int(s) for s in seeds]
    if not specs or not seeds:
        raise GatedDiTError("convergence_compare needs at least one spec and one seed")
    if len(specs) < 2:
        logger.warning("single spec: report holds one curve and no comparison rows")
    if len(seeds) < 3:
        logger.warning(f"only {len(seeds)} seed(s); trend claims need at least 3")

    cfg = base
    if steps is not None:
        cfg = replace(cfg, steps=int(steps))
    if task is not None:
        cfg = replace(cfg, data=replace(cfg.data, task=TaskKind(task)))
    jobs = cfg.jobs if jobs is None else jobs

    labels = _unique_labels(specs)
    cells = [(replace(cfg.with_gate(spec), seed=seed), label)
             for spec, label in zip(specs, labels) for seed in seeds]
    logger.info(f"🚀 Starting comparison: {len(specs)} spec(s) x {len(seeds)} seed(s), {cfg.steps} steps")
    records = _run_cells(cells, jobs)

    ref_label = labels[_reference_index(specs)]
    by_key = {(r.label, r.seed): r for r in records}
    factor = cfg.eval.threshold_factor

    curve_frames, summary_rows, comparison_rows = [], [], []
    for rec in records:
        frame = rec.to_frame()
        frame.insert(0, "seed", rec.seed)
        frame.insert(0, "variant", rec.label)
        curve_frames.append(frame)

        ref = by_key[(ref_label, rec.seed)]
        tau = factor * ref.final_loss if ref.smoothed else float("nan")
        stt = steps_to_threshold(rec.smoothed, tau) if np.isfinite(tau) else None
        summary_rows.append({
            "variant": rec.label, "seed": rec.seed, "auc": rec.auc, "final_loss": rec.final_loss,
            "steps_to_threshold": stt, "diverged": rec.diverged_at is not None,
        })
        if len(specs) > 1 and rec.label != ref_label:
            ref_stt = steps_to_threshold(ref.smoothed, tau) if np.isfinite(tau) else None
            comparison_rows.append({
                "variant": rec.label, "seed": rec.seed,
                "auc_ratio": ref.auc / rec.auc if rec.auc else float("nan"),
                "steps_ratio": (ref_stt / stt) if (ref_stt and stt) else float("nan"),
            })

    report = ComparisonReport(
        curves=pd.concat(curve_frames, ignore_index=True),
        summary=pd.DataFrame(summary_rows),
        comparison=pd.DataFrame(comparison_rows, columns=["variant", "seed", "auc_ratio", "steps_ratio"]),
        records=records,
    )
    if output_dir:
        write_comparison(report, output_dir)
    logger.info(f"✅ Completed comparison\n{report.summary_text()}")
    return report


def _slug(label: str) -> str:
    return "".join(c if c.isalnum() or c in "-_" else "_" for c in label)


def write_comparison(report: ComparisonReport, output_dir: str) -> List[str]:
    os.makedirs(output_dir, exist_ok=True)
    written = []
    for rec in report.records:
        path = os.path.join(output_dir, f"metrics_{_slug(rec.label)}_seed{rec.seed}.csv")
        written.append(write_metrics_csv(rec, path))
    for name, frame in (("curves.csv", report.curves), ("comparison.csv", report.summary),
                        ("ratios.csv", report.comparison)):
        path = os.path.join(output_dir, name)
        frame.to_csv(path, index=False, float_format=FLOAT_FORMAT, lineterminator="\n")
        written.append(path)
    summary_path = os.path.join(output_dir, "summary.txt")
    with open(summary_path, "w", encoding="utf-8") as f:
        f.write(report.summary_text() + "\n")
    written.append(summary_path)
    return written


def ablation_grid(base: RunConfig, specs: Optional[Sequence[GateSpec]] = None,
                  seeds: Sequence[int] = (0, 1, 2), steps: Optional[int] = None, task=None,
                  jobs: Optional[int] = None, output_dir: Optional[str] = None) -> pd.DataFrame:
    """
    One run per (spec, seed). Rows keep the spec order; a diverged run keeps its
    row with steps_to_threshold = 'diverged'.
    """
    specs = list(specs) if specs else GateSpec.ablation_variants()
    report = convergence_compare(base, specs, seeds, steps=steps, task=task, jobs=jobs)
    summary = report.summary.set_index(["variant", "seed"])

    rows = []
    for rec in report.records:
        metrics = rec.final_metrics()
        stt = summary.loc[(rec.label, rec.seed), "steps_to_threshold"]
        if rec.diverged_at is not None:
            stt_value: Any = "diverged"
        elif stt is None or (isinstance(stt, float) and np.isnan(stt)):
            stt_value = ""
        else:
            stt_value = int(stt)
        rows.append({
            "variant": rec.label, "seed": rec.seed,
            "final_loss": rec.final_loss if rec.diverged_at is None else float("nan"),
            "edge_f1": metrics["edge_f1"], "mse": metrics["mse"], "psnr": metrics["psnr"],
            "steps_to_threshold": stt_value,
        })
    grid = pd.DataFrame(rows, columns=GRID_COLUMNS)
    if output_dir:
        os.makedirs(output_dir, exist_ok=True)
        grid.to_csv(os.path.join(output_dir, "ablation.csv"), index=False,
                    float_format=FLOAT_FORMAT, lineterminator="\n")
        write_comparison(report, os.path.join(output_dir, "runs"))
    return grid

