import logging
import os
from dataclasses import replace

import numpy as np
import pandas as pd
import pytest

from gated_dit import evaluation
from gated_dit.config import ModelConfig, RunConfig
from gated_dit.data import TaskKind, edge_condition
from gated_dit.errors import DimensionError, GatedDiTError
from gated_dit.evaluation import (
    CONVERGENCE_COLUMNS, PSNR_CAP, RunRecord, ablation_grid, convergence_compare, edge_f1, ema,
    f1_from_edge_maps, granularity_ratio, mse_metric, overhead_report, psnr, steps_to_threshold,
    write_metrics_csv,
)
from gated_dit.gates import GatePosition, GateSpec, Granularity


def pixels(size, coords):
    mask = np.zeros((size, size), dtype=bool)
    for y, x in coords:
        mask[y, x] = True
    return mask


class TestEdgeF1:
    def test_partial_match(self):
        ref = pixels(4, [(0, 0), (0, 3), (3, 0)])
        gen = pixels(4, [(0, 0), (0, 3), (3, 3)])
        assert f1_from_edge_maps(gen, ref, tolerance=1) == pytest.approx(2.0 / 3.0)

    def test_tolerance_absorbs_one_pixel_shift(self):
        ref = pixels(6, [(2, 2), (2, 3)])
        gen = pixels(6, [(3, 2), (3, 3)])
        assert f1_from_edge_maps(gen, ref, tolerance=1) == 1.0
        assert f1_from_edge_maps(gen, ref, tolerance=0) == 0.0

    def test_empty_maps(self):
        empty = np.zeros((4, 4), dtype=bool)
        assert f1_from_edge_maps(empty, empty) == 1.0
        assert f1_from_edge_maps(empty, pixels(4, [(1, 1)])) == 0.0

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            f1_from_edge_maps(np.zeros((4, 4)), np.zeros((5, 5)))

    def test_generated_matching_its_own_edges(self):
        img = np.zeros((3, 16, 16))
        img[:, 4:12, 4:12] = 1.0
        assert edge_f1(img, edge_condition(img)) == 1.0


class TestPixelMetrics:
    def test_mse_metric_on_exact_reconstruction(self):
        img = np.random.default_rng(0).uniform(size=(3, 8, 8))
        from gated_dit.data import condition_operator
        for task in (TaskKind.EDGE, TaskKind.DEBLUR, TaskKind.COLORIZE):
            assert mse_metric(img, condition_operator(task)(img), task) == 0.0

    def test_mse_metric_undefined_for_subject(self):
        img = np.zeros((3, 8, 8))
        with pytest.raises(GatedDiTError):
            mse_metric(img, img, TaskKind.SUBJECT)

    def test_psnr(self):
        a = np.zeros((3, 4, 4))
        assert psnr(a, a) == PSNR_CAP
        assert psnr(a, np.full_like(a, 0.1)) == pytest.approx(20.0)


class TestConvergenceStats:
    def test_ema(self):
        assert ema([1.0, 0.0, 0.0], 0.5) == [1.0, 0.5, 0.25]

    def test_steps_to_threshold(self):
        assert steps_to_threshold([3.0, 2.0, 1.0], 1.5) == 3
        assert steps_to_threshold([3.0, 2.0], 1.0) is None

    def test_record_summary(self):
        rec = RunRecord(config={}, seed=0, losses=[3.0, 1.0], smoothed=[3.0, 2.0],
                        metrics=[{"step": 2, "edge_f1": 0.5, "mse": 0.1, "psnr": 12.0}])
        assert rec.final_loss == 2.0
        assert rec.auc == 5.0
        assert rec.final_metrics() == {"edge_f1": 0.5, "mse": 0.1, "psnr": 12.0}
        frame = rec.to_frame()
        assert list(frame.columns) == CONVERGENCE_COLUMNS
        assert np.isnan(frame.loc[0, "edge_f1"]) and frame.loc[1, "edge_f1"] == 0.5

    def test_metrics_csv(self, tmp_path):
        rec = RunRecord(config={}, seed=0, losses=[1.0], smoothed=[1.0])
        path = write_metrics_csv(rec, str(tmp_path / "m.csv"))
        with open(path, encoding="utf-8") as f:
            lines = f.read().splitlines()
        assert lines == ["step,loss_smoothed,loss_raw,edge_f1,mse,psnr", "1,1,1,,,"]


class TestOverhead:
    def test_default_gate_share(self):
        frame = overhead_report(ModelConfig())
        assert list(frame["component"]) == ["backbone", "lora (rank 16)", "gate (token_wise)"]
        gate = frame.iloc[2]
        assert gate["params"] == 512
        assert gate["ratio_pct"] < 0.1
        assert frame.iloc[0]["ratio_pct"] == 100.0

    def test_over_budget_warns(self, caplog):
        spec = GateSpec(granularity=Granularity.ELEMENT_WISE)
        with caplog.at_level(logging.WARNING, logger="gated_dit.evaluation"):
            overhead_report(ModelConfig(gate_spec=spec))
        assert "budget" in caplog.text

    def test_granularity_ratio_equals_width(self):
        assert granularity_ratio(64, 4) == 64


def fake_cell(diverge_label=None):
    """Synthetic curves: gated variants converge faster than the ungated one"""
    def run(config, label=""):
        spec = config.model.gate_spec
        rate = 0.5 if spec.enabled else 0.2
        rate += 0.01 * config.seed
        if label == diverge_label:
            return RunRecord(config={}, seed=config.seed, losses=[1.0, 0.9], smoothed=[1.0, 0.995],
                             diverged_at=3, label=label)
        losses = [1.0 / (1.0 + rate * k) for k in range(1, config.steps + 1)]
        smoothed = ema(losses, config.eval.ema_alpha)
        metrics = [{"step": config.steps, "edge_f1": rate, "mse": 0.1, "psnr": 10.0}]
        return RunRecord(config={}, seed=config.seed, losses=losses, smoothed=smoothed,
                         metrics=metrics, label=label)
    return run


class TestComparison:
    def test_gate_vs_no_gate(self, monkeypatch, tmp_path):
        monkeypatch.setattr(evaluation, "run_cell", fake_cell())
        specs = [GateSpec(), GateSpec(enabled=False)]
        report = convergence_compare(RunConfig(), specs, seeds=[0, 1, 2], steps=40,
                                     output_dir=str(tmp_path))
        assert list(report.summary["variant"]) == ["Ours"] * 3 + ["w/o gating"] * 3
        assert len(report.curves) == 6 * 40
        assert (report.comparison["auc_ratio"] < 1.0).all()
        ref = report.summary[report.summary["variant"] == "Ours"]
        assert ref["steps_to_threshold"].notna().all()
        assert "reference beats w/o gating on AUC in 3/3 seeds" in report.summary_text()
        for name in ("curves.csv", "comparison.csv", "ratios.csv", "summary.txt",
                     "metrics_Ours_seed0.csv", "metrics_w_o_gating_seed2.csv"):
            assert os.path.exists(tmp_path / name), name

    def test_reference_is_first_gated_spec(self, monkeypatch):
        monkeypatch.setattr(evaluation, "run_cell", fake_cell())
        report = convergence_compare(RunConfig(), [GateSpec(enabled=False), GateSpec()], seeds=[0], steps=10)
        assert list(report.comparison["variant"]) == ["w/o gating"]

    def test_duplicate_specs_get_distinct_labels(self, monkeypatch):
        monkeypatch.setattr(evaluation, "run_cell", fake_cell())
        report = convergence_compare(RunConfig(), [GateSpec(), GateSpec()], seeds=[0], steps=5)
        assert list(report.summary["variant"]) == ["Ours", "Ours#2"]

    def test_needs_specs_and_seeds(self):
        with pytest.raises(GatedDiTError):
            convergence_compare(RunConfig(), [], seeds=[0])

    def test_ablation_grid_keeps_diverged_rows(self, monkeypatch, tmp_path):
        monkeypatch.setattr(evaluation, "run_cell", fake_cell(diverge_label="After-FFN"))
        grid = ablation_grid(RunConfig(), seeds=[0, 1], steps=30, output_dir=str(tmp_path))
        assert list(grid.columns) == evaluation.GRID_COLUMNS
        assert list(grid["variant"].unique()) == ["w/o gating", "w/o interaction", "After-FFN",
                                                  "Elementwise", "Input features", "Ours"]
        diverged = grid[grid["variant"] == "After-FFN"]
        assert (diverged["steps_to_threshold"] == "diverged").all()
        assert diverged["final_loss"].isna().all()
        saved = pd.read_csv(tmp_path / "ablation.csv", keep_default_na=False)
        assert len(saved) == 12
        assert os.path.isdir(tmp_path / "runs")

    def test_axes_grid(self, monkeypatch):
        monkeypatch.setattr(evaluation, "run_cell", fake_cell())
        specs = [GateSpec(position=p) for p in GatePosition]
        grid = ablation_grid(RunConfig(), specs, seeds=[0], steps=10)
        assert len(grid) == 3
        assert grid["steps_to_threshold"].ne("diverged").all()


class TestDeskRuns:
    """Full-size runs on the default desk model; minutes each"""

    @pytest.mark.slow
    def test_gate_converges_faster_than_no_gate(self):
        base = RunConfig(eval=replace(RunConfig().eval, eval_interval=2000, eval_samples=1), jobs=3)
        report = convergence_compare(base, [GateSpec(), GateSpec(enabled=False)], seeds=[0, 1, 2],
                                     steps=2000, task=TaskKind.EDGE)
        assert not report.summary["diverged"].any()
        assert len(report.comparison) == 3
        assert (report.comparison["auc_ratio"] < 1.0).all()

    @pytest.mark.slow
    def test_ablation_grid_runs_all_variants(self, tmp_path):
        base = RunConfig(eval=replace(RunConfig().eval, eval_interval=100, eval_samples=2))
        grid = ablation_grid(base, seeds=[0], steps=100, output_dir=str(tmp_path))
        saved = pd.read_csv(tmp_path / "ablation.csv", keep_default_na=False)
        assert list(saved.columns) == evaluation.GRID_COLUMNS
        assert list(saved["variant"]) == ["w/o gating", "w/o interaction", "After-FFN",
                                          "Elementwise", "Input features", "Ours"]
        assert np.isfinite(grid["final_loss"].astype(float)).all()
        assert grid["steps_to_threshold"].ne("diverged").all()
