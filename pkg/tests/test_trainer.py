from dataclasses import replace

import numpy as np
import pytest

from gated_dit import checkpoint
from gated_dit.config import DataConfig, EvalConfig, FlowConfig, RunConfig, TrainMode
from gated_dit.data import TaskKind
from gated_dit.errors import CheckpointError, NonFiniteLossError
from gated_dit.trainer import Trainer, prepare_params, unconditional_config


def test_run_records_curves_and_checkpoints(tiny_run):
    saved = []
    trainer = Trainer(tiny_run, progress=False, checkpoint_cb=lambda params, step: saved.append(step))
    record = trainer.run()
    assert record.completed_steps == 3 and len(record.smoothed) == 3
    assert record.diverged_at is None
    assert [m["step"] for m in record.metrics] == [2, 3]
    assert saved == [2, 3]
    assert record.smoothed[0] == record.losses[0]
    for m in record.metrics:
        assert 0.0 <= m["edge_f1"] <= 1.0 and m["mse"] >= 0.0


def test_same_seed_same_run(tiny_run):
    a = Trainer(tiny_run, progress=False).run(steps=2)
    b = Trainer(tiny_run, progress=False).run(steps=2)
    assert a.losses == b.losses


def test_divergence_is_recorded(tiny_run):
    params = prepare_params(tiny_run)
    params["unembed.weight"].data[...] = np.nan
    record = Trainer(tiny_run, params=params, progress=False).run()
    assert record.diverged_at == 1 and record.losses == []

    params["unembed.weight"].data[...] = np.nan
    with pytest.raises(NonFiniteLossError):
        Trainer(tiny_run, params=params, progress=False, raise_on_divergence=True).run()


def test_subject_task_has_no_aligned_mse(tiny_run):
    cfg = replace(tiny_run, data=DataConfig(task=TaskKind.SUBJECT, batch_size=2))
    metrics = Trainer(cfg, progress=False).evaluate()
    assert np.isnan(metrics["mse"])
    assert 0.0 <= metrics["edge_f1"] <= 1.0


def test_pretrain_ignores_condition_image(tiny_run):
    cfg = unconditional_config(tiny_run)
    assert cfg.mode is TrainMode.PRETRAIN
    assert not Trainer(cfg, progress=False).uses_condition_image


def test_finetune_trains_only_adapters(tiny_run, tmp_path):
    base = Trainer(unconditional_config(tiny_run), progress=False)
    base.run(steps=2)
    ckpt = checkpoint.save(str(tmp_path / "base.gtck"), base.params)

    cfg = replace(tiny_run, mode=TrainMode.FINETUNE, base_checkpoint=ckpt,
                  flow=FlowConfig(lr=1e-2, sample_steps=2))
    trainer = Trainer(cfg, progress=False)
    params = trainer.params
    assert params.trainable == set(params.names("gate") + params.names("lora"))
    assert not any(params[n].data.any() for n in params.names("gate"))
    backbone = {n: params[n].data.copy() for n in params.names("backbone")}

    trainer.run(steps=2)
    for name, before in backbone.items():
        np.testing.assert_array_equal(params[name].data, before, err_msg=name)
    assert any(params[n].data.any() for n in params.names("gate"))


def test_finetune_rejects_mismatched_base(tiny_run, tmp_path):
    ckpt = checkpoint.save(str(tmp_path / "wrong.gtck"), {"pos_embed": np.zeros((2, 2))})
    cfg = replace(tiny_run, mode=TrainMode.FINETUNE, base_checkpoint=ckpt)
    with pytest.raises(CheckpointError):
        prepare_params(cfg)


@pytest.mark.slow
def test_loss_decreases(tiny_run):
    cfg = replace(tiny_run, flow=FlowConfig(lr=3e-3, sample_steps=2), steps=200)
    cfg = replace(cfg, eval=replace(cfg.eval, eval_interval=1000))
    record = Trainer(cfg, progress=False).run()
    assert np.mean(record.losses[-20:]) < np.mean(record.losses[:20])


def desk_run(tmp_path, task, steps=1500):
    return RunConfig(data=DataConfig(task=task),
                     eval=EvalConfig(eval_interval=steps, eval_samples=64),
                     steps=steps, seed=0, output_dir=str(tmp_path))


@pytest.fixture(scope="module")
def pretrained_base(tmp_path_factory):
    path = tmp_path_factory.mktemp("base")
    base = Trainer(unconditional_config(desk_run(path, TaskKind.EDGE)), progress=False)
    base.run()
    return base.params, checkpoint.save(str(path / "base.gtck"), base.params)


def finetune_and_baseline(tmp_path, pretrained_base, task):
    params, ckpt = pretrained_base
    cfg = replace(desk_run(tmp_path, task), mode=TrainMode.FINETUNE, base_checkpoint=ckpt)
    tuned = Trainer(cfg, progress=False)
    tuned.run()
    unconditional = Trainer(unconditional_config(cfg), params=params, progress=False)
    return tuned.evaluate(), unconditional.evaluate()


@pytest.mark.slow
def test_finetuned_edges_follow_condition(tmp_path, pretrained_base):
    tuned, unconditional = finetune_and_baseline(tmp_path, pretrained_base, TaskKind.EDGE)
    assert tuned["edge_f1"] >= 2.0 * unconditional["edge_f1"]


@pytest.mark.slow
def test_finetuned_colorize_matches_luminance(tmp_path, pretrained_base):
    tuned, unconditional = finetune_and_baseline(tmp_path, pretrained_base, TaskKind.COLORIZE)
    assert tuned["mse"] < 0.5 * unconditional["mse"]
