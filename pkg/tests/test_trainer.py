"""
Test the adversarial training loop, its logs and exact resume
"""

import numpy as np
import pytest

from services.common.exceptions import ConfigError, ContractError, DatasetError, NonFiniteError
from services.data.dataset import stack_batch
from services.engine.tensor import Tensor
from services.gan.losses import COMPONENTS
from workers.trainer.checkpoint import load_checkpoint
from workers.trainer.trainer import (
    EVAL_LOG,
    LAST_CHECKPOINT,
    LOSS_COLUMNS,
    LOSS_LOG,
    Trainer,
    format_row,
    parameter_digest,
)


def history_rows(result):
    return [format_row([h[c] for c in LOSS_COLUMNS]) for h in result.history]


def test_format_row():
    assert format_row([1, 2, 0.5, 1.0 / 3.0]) == "1,2,0.500000,0.333333\n"


def test_train_step_returns_finite_components(tiny_config, tiny_train):
    trainer = Trainer(tiny_config, tiny_train)
    values = trainer.train_step(stack_batch(tiny_train[:2]))
    assert set(values) == set(COMPONENTS) | {"g_total", "d_total"}
    assert all(np.isfinite(v) for v in values.values())
    assert trainer.adam_g.state.t == trainer.adam_d.state.t == 1


def test_step_updates_both_networks(tiny_config, tiny_train):
    trainer = Trainer(tiny_config, tiny_train)
    g_before = parameter_digest(trainer.generator)
    d_before = parameter_digest(trainer.d_direct, trainer.d_final)
    trainer.train_step(stack_batch(tiny_train[:2]))
    assert parameter_digest(trainer.generator) != g_before
    assert parameter_digest(trainer.d_direct, trainer.d_final) != d_before


def test_discriminators_start_differently(tiny_config, tiny_train):
    trainer = Trainer(tiny_config, tiny_train)
    a = trainer.d_direct.stages[0].conv.weight.data
    b = trainer.d_final.stages[0].conv.weight.data
    assert not np.array_equal(a, b)


def test_generator_untouched_by_discriminator_update(tiny_config, tiny_train):
    """A discriminator step that leaks into the generator is caught"""
    trainer = Trainer(tiny_config, tiny_train)
    original = trainer.adam_d.step

    def leaky_step():
        original()
        trainer.generator.parameters()[0].data += 1.0

    trainer.adam_d.step = leaky_step
    with pytest.raises(ContractError):
        trainer.train_step(stack_batch(tiny_train[:2]))


def test_non_finite_loss_names_component(tiny_config, tiny_train, mocker):
    mocker.patch(
        "workers.trainer.trainer.discriminator_objective",
        return_value=Tensor(np.array(np.nan)),
    )
    trainer = Trainer(tiny_config, tiny_train)
    with pytest.raises(NonFiniteError) as exc_info:
        trainer.train_step(stack_batch(tiny_train[:2]))
    assert exc_info.value.details["component"] == "d_total"
    assert exc_info.value.details["step"] == 1


def test_rejects_empty_or_mismatched_data(tiny_config, config_with, tiny_train):
    with pytest.raises(DatasetError):
        Trainer(tiny_config, [])
    with pytest.raises(DatasetError):
        Trainer(config_with(image_size=64), tiny_train)


def test_fit_writes_logs_and_checkpoints(tmp_path, tiny_config, tiny_train, tiny_test):
    trainer = Trainer(tiny_config, tiny_train, tiny_test, out_dir=tmp_path)
    result = trainer.fit(epochs=1)

    assert result.epochs_completed == 1
    assert result.global_step == 4
    lines = (tmp_path / LOSS_LOG).read_text().splitlines()
    assert lines[0] == ",".join(LOSS_COLUMNS)
    assert [line.split(",")[1] for line in lines[1:]] == ["1", "2", "3", "4"]

    eval_lines = (tmp_path / EVAL_LOG).read_text().splitlines()
    assert eval_lines[0] == "epoch,l1_direct,l1_final,psnr_direct,psnr_final"
    assert len(eval_lines) == 2
    assert result.final_eval is not None and result.final_eval.count == 2

    assert (tmp_path / "ckpt_epoch_1.pitr").exists()
    assert (tmp_path / "resolved.cfg").read_text() == tiny_config.canonical_text()
    ckpt = load_checkpoint(tmp_path / LAST_CHECKPOINT)
    assert (ckpt.epoch, ckpt.batch, ckpt.global_step) == (1, 0, 4)
    assert ckpt.config_text == tiny_config.model_blob()


def test_checkpoint_record_groups(tiny_config, tiny_train):
    names = list(Trainer(tiny_config, tiny_train).to_checkpoint().tensors)
    prefixes = [name.split(".", 1)[0] for name in names]
    first = {p: prefixes.index(p) for p in ("generator", "d_direct", "d_final", "adam_g", "adam_d")}
    assert first["generator"] < first["d_direct"] < first["d_final"] < first["adam_g"] < first["adam_d"]
    # batch-norm buffers travel with the weights
    assert any(n.startswith("generator.") and n.endswith("running_mean") for n in names)


def test_same_seed_same_losses(tiny_config, tiny_train):
    a = Trainer(tiny_config, tiny_train).fit(max_steps=2)
    b = Trainer(tiny_config, tiny_train).fit(max_steps=2)
    assert history_rows(a) == history_rows(b)


@pytest.mark.slow
def test_mid_epoch_resume_matches_uninterrupted_run(tiny_config, tiny_train):
    """Stop after 3 of 4 batches, restore into a fresh trainer, finish epoch 2"""
    straight = Trainer(tiny_config, tiny_train)
    full = straight.fit(epochs=2)

    first = Trainer(tiny_config, tiny_train)
    first.fit(epochs=2, max_steps=3)
    assert (first.epoch, first.batch, first.global_step) == (0, 3, 3)

    second = Trainer(tiny_config, tiny_train)
    second.restore(first.to_checkpoint())
    rest = second.fit(epochs=2)

    assert history_rows(rest) == history_rows(full)[3:]
    assert parameter_digest(second.generator) == parameter_digest(straight.generator)
    assert parameter_digest(second.d_direct, second.d_final) == parameter_digest(
        straight.d_direct, straight.d_final
    )


@pytest.mark.slow
def test_resume_from_epoch_boundary_trims_logs(tmp_path, tiny_config, tiny_train):
    Trainer(tiny_config, tiny_train, out_dir=tmp_path).fit(epochs=1)
    # a row written after the checkpoint by a run that then crashed
    with open(tmp_path / LOSS_LOG, "a") as fh:
        fh.write("2,99" + ",0.0" * (len(LOSS_COLUMNS) - 2) + "\n")

    resumed = Trainer(tiny_config, tiny_train, out_dir=tmp_path)
    resumed.resume(tmp_path / LAST_CHECKPOINT)
    resumed.fit(epochs=2)

    steps = [line.split(",")[1] for line in (tmp_path / LOSS_LOG).read_text().splitlines()[1:]]
    assert steps == [str(s) for s in range(1, 9)]


def test_resume_rejects_other_model_config(tmp_path, tiny_config, config_with, tiny_train):
    trainer = Trainer(tiny_config, tiny_train, out_dir=tmp_path)
    trainer.save(tmp_path / "a.pitr")
    other = Trainer(config_with(lambda_l1=10.0), tiny_train)
    with pytest.raises(ConfigError):
        other.resume(tmp_path / "a.pitr")


def test_run_only_keys_do_not_block_resume(tmp_path, tiny_config, config_with, tiny_train):
    Trainer(tiny_config, tiny_train).save(tmp_path / "a.pitr")
    longer = Trainer(config_with(epochs=5, eval_every=0), tiny_train)
    longer.resume(tmp_path / "a.pitr")
    assert longer.global_step == 0
