import json
import math

import pytest
import torch

from nodule_align.annotations import build_split
from nodule_align.config import ConfigError, TrainConfig, load_config, with_loss_switches
from nodule_align.training import (
    CheckpointError,
    CLIPLungModel,
    compute_batch_loss,
    load_checkpoint,
    load_image_only,
    load_split_tensors,
    lr_schedule,
    predict_logits,
    seed_everything,
    strip_text_branch,
    train,
)


class TestLrSchedule:
    def test_start(self):
        assert lr_schedule(0, 100, 0.001) == pytest.approx(0.001)

    def test_end(self):
        assert lr_schedule(100, 100, 0.001) == pytest.approx(0.0, abs=1e-18)

    def test_midpoint(self):
        assert lr_schedule(50, 100, 0.001) == pytest.approx(0.0005)

    def test_out_of_range(self):
        with pytest.raises(ValueError):
            lr_schedule(101, 100, 0.001)


class TestConfig:
    def test_defaults_match_reported_settings(self):
        config = TrainConfig()
        assert config.lr0 == 0.001
        assert config.momentum == 0.9
        assert config.weight_decay == 0.00005
        assert config.tau_init == 0.07
        assert config.alpha == 1.0
        assert config.beta == 0.5

    def test_rejects_bad_num_groups(self):
        with pytest.raises(ConfigError, match="num_groups"):
            TrainConfig(num_groups=7)

    def test_file_plus_overrides(self, tmp_path):
        path = tmp_path / "run.cfg"
        path.write_text("epochs = 3\nbatch_size = 8\nloss_ia = false\n# comment\n")
        config = load_config(path, {"epochs": 5})
        assert config.epochs == 5  # override wins
        assert config.batch_size == 8
        assert config.loss_ia is False

    def test_unknown_key(self, tmp_path):
        path = tmp_path / "run.cfg"
        path.write_text("learning = 3\n")
        with pytest.raises(ConfigError, match="learning"):
            load_config(path)

    def test_hash_stable(self):
        assert TrainConfig().config_hash() == TrainConfig().config_hash()
        assert TrainConfig().config_hash() != TrainConfig(seed=1).config_hash()


@pytest.fixture(scope="module")
def tiny_run(small_dataset, tmp_path_factory):
    data_dir, records = small_dataset
    out = tmp_path_factory.mktemp("tiny_run")
    config = TrainConfig(epochs=2, batch_size=16, seed=0)
    split = build_split(records, config.variant, config.fold, config.seed)
    ckpt_path, history = train(config, split, data_dir, out)
    return data_dir, records, config, split, out, ckpt_path, history


class TestTrainLoop:
    def test_logs_have_breakdown(self, tiny_run):
        _, _, _, _, out, _, _ = tiny_run
        lines = [json.loads(l) for l in (out / "logs.jsonl").read_text().splitlines()]
        steps = [l for l in lines if "step" in l]
        assert steps
        for record in steps:
            assert {"ce", "ic", "ia", "ca", "total", "tau", "lr"} <= set(record)
            assert record["total"] == pytest.approx(
                record["ce"] + record["ic"] + record["alpha"] * record["ia"]
                + record["beta"] * record["ca"], rel=1e-6,
            )

    def test_epoch0_determinism(self, small_dataset, tmp_path):
        data_dir, records = small_dataset
        config = TrainConfig(epochs=1, batch_size=16, seed=0)
        split = build_split(records, config.variant, config.fold, config.seed)
        _, hist_a = train(config, split, data_dir, tmp_path / "a")
        _, hist_b = train(config, split, data_dir, tmp_path / "b")
        assert hist_a[0]["mean_total"] == pytest.approx(hist_b[0]["mean_total"], abs=1e-6)

    def test_frozen_text_encoder(self, tiny_run):
        _, _, config, split, _, ckpt_path, _ = tiny_run
        model, payload = load_checkpoint(ckpt_path)
        fresh = CLIPLungModel(config, split.num_classes)
        assert model.text_encoder.checksum() == fresh.text_encoder.checksum()
        assert payload["text_encoder_checksum"] == model.text_encoder.checksum()

    def test_switched_off_losses_are_zero_in_logs(self, small_dataset, tmp_path):
        data_dir, records = small_dataset
        config = TrainConfig(epochs=1, batch_size=16, seed=0,
                             loss_ia=False, loss_ca=False)
        split = build_split(records, config.variant, config.fold, config.seed)
        train(config, split, data_dir, tmp_path)
        lines = [json.loads(l) for l in (tmp_path / "logs.jsonl").read_text().splitlines()]
        for record in (l for l in lines if "step" in l):
            assert record["ia"] == 0.0
            assert record["ca"] == 0.0
            assert record["ic"] != 0.0


class TestSwitchGradients:
    def test_disabled_switch_equals_zero_coefficient(self, small_dataset):
        """One optimizer step with a loss switched off matches alpha/beta = 0."""
        data_dir, records = small_dataset
        base = TrainConfig(epochs=1, batch_size=16, seed=0, augment_flips=False)
        split = build_split(records, base.variant, base.fold, base.seed)
        images = load_split_tensors(split.train[:16], data_dir)
        labels = torch.tensor([split.label_of(r) for r in split.train[:16]])
        weights = torch.tensor([r.weights for r in split.train[:16]], dtype=torch.float32)

        def one_step(config):
            seed_everything(config.seed)
            model = CLIPLungModel(config, split.num_classes)
            opt = torch.optim.SGD(model.trainable_parameters(), lr=config.lr0,
                                  momentum=config.momentum,
                                  weight_decay=config.weight_decay)
            total, _ = compute_batch_loss(model, images, labels, weights, config)
            total.backward()
            opt.step()
            return model.state_dict()

        switched = one_step(with_loss_switches(base, ic=True, ia=False, ca=False))
        zeroed = one_step(TrainConfig(epochs=1, batch_size=16, seed=0,
                                      augment_flips=False, alpha=0.0, beta=0.0))
        for key in switched:
            torch.testing.assert_close(switched[key], zeroed[key], atol=0, rtol=0)

    def test_all_ablation_rows_run(self, small_dataset, tmp_path):
        data_dir, records = small_dataset
        base = TrainConfig(epochs=1, batch_size=32, seed=0)
        split = build_split(records, base.variant, base.fold, base.seed)
        grid = [(True, False, False), (True, True, False), (False, True, True),
                (True, False, True), (True, True, True)]
        for i, (ic, ia, ca) in enumerate(grid):
            config = with_loss_switches(base, ic, ia, ca)
            ckpt, _ = train(config, split, data_dir, tmp_path / f"row{i}")
            assert ckpt.exists()


class TestCheckpoint:
    def test_round_trip_bit_exact(self, tiny_run):
        data_dir, _, _, split, _, ckpt_path, _ = tiny_run
        model, _ = load_checkpoint(ckpt_path)
        images = load_split_tensors(split.test, data_dir)
        a = predict_logits(model, images)
        model2, _ = load_checkpoint(ckpt_path)
        b = predict_logits(model2, images)
        torch.testing.assert_close(a, b, atol=0, rtol=0)

    def test_manifest_records_hyperparameters(self, tiny_run):
        _, _, _, _, _, ckpt_path, _ = tiny_run
        _, payload = load_checkpoint(ckpt_path)
        assert payload["config"]["alpha"] == 1.0
        assert payload["config"]["beta"] == 0.5
        assert payload["config_hash"]
        assert payload["seed"] == 0

    def test_expect_mismatch_named(self, tiny_run):
        _, _, _, _, _, ckpt_path, _ = tiny_run
        with pytest.raises(CheckpointError, match="num_groups"):
            load_checkpoint(ckpt_path, expect={"num_groups": 16})

    def test_tampered_hash_refused(self, tiny_run, tmp_path):
        _, _, _, _, _, ckpt_path, _ = tiny_run
        payload = torch.load(ckpt_path, map_location="cpu", weights_only=False)
        payload["config"]["seed"] = 99
        bad = tmp_path / "bad.pt"
        torch.save(payload, bad)
        with pytest.raises(CheckpointError, match="hash"):
            load_checkpoint(bad)
        load_checkpoint(bad, force=True)

    def test_inference_parity_of_stripped_checkpoint(self, tiny_run):
        data_dir, _, _, split, _, ckpt_path, _ = tiny_run
        model, payload = load_checkpoint(ckpt_path)
        images = load_split_tensors(split.test, data_dir)
        full = predict_logits(model, images)
        stripped = strip_text_branch(payload)
        assert all(not k.startswith(("prompt", "text", "projector", "temperature"))
                   for k in stripped["image_state"])
        image_only = load_image_only(stripped)
        bare = predict_logits(image_only, images)
        assert full.numpy().tobytes() == bare.numpy().tobytes()
