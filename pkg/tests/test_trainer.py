"""Train-loop behaviour: determinism, resume, variants, config handling."""
import numpy as np
import pytest

from himpc.io import generate_synthetic
from himpc.nn import save_checkpoint
from himpc.trainer import TrainConfig, train, tune_eps


def synthetic_coords(n_ids=6, per_id=3, seed=0, noise=0.01):
    seqs = generate_synthetic(n_ids, per_id, 6, 20, noise, seed=seed)
    return np.stack([s.frames for s in seqs])


def small_config(**overrides):
    base = dict(
        f=6, h=16, m_heads=2, eps=0.05, min_samples=2, lr=0.00035,
        batch_size=64, max_epoch=10, max_patience=50, seed=1,
    )
    base.update(overrides)
    return TrainConfig(**base)


class TestConfig:
    def test_invalid_variant_rejected(self):
        with pytest.raises(ValueError):
            TrainConfig(loss_variant="nope")

    def test_non_positive_values_rejected(self):
        with pytest.raises(ValueError):
            TrainConfig(h=0)
        with pytest.raises(ValueError):
            TrainConfig(eps=-0.5)

    def test_file_round_trip_with_overrides(self, tmp_path):
        path = tmp_path / "train.cfg"
        path.write_text(
            "# comment line\n"
            "h = 32\n"
            "eps = 0.25   # inline comment\n"
            "loss_variant = himpc\n"
            "center_root = true\n"
        )
        config = TrainConfig.from_file(path, overrides={"h": 64})
        assert config.h == 64
        assert config.eps == 0.25
        assert config.loss_variant == "himpc"
        assert config.center_root is True

    def test_unknown_key_reports_location(self, tmp_path):
        path = tmp_path / "bad.cfg"
        path.write_text("mystery = 3\n")
        with pytest.raises(ValueError, match="bad.cfg:1"):
            TrainConfig.from_file(path)


class TestTrainLoop:
    def test_loss_decreases_on_synthetic_data(self):
        coords = synthetic_coords(n_ids=8, per_id=3, seed=3)
        config = small_config(max_epoch=20, seed=3)
        config = TrainConfig(**{**config.to_dict(), "eps": tune_eps(coords, config)})
        params, log = train(coords, config)
        losses = [e.loss for e in log.epochs if e.loss is not None]
        assert len(losses) >= 2
        assert losses[-1] < losses[0]
        assert log.best_epoch is not None

    def test_zero_epochs_returns_init_and_empty_log(self):
        coords = synthetic_coords()
        params, log = train(coords, small_config(max_epoch=0))
        assert log.epochs == [] and log.best_epoch is None
        assert all(np.all(np.isfinite(a)) for a in params.arrays.values())

    def test_same_seed_bit_identical_log_and_params(self):
        coords = synthetic_coords(seed=5)
        config = small_config(seed=7, max_epoch=6)
        params_a, log_a = train(coords, config)
        params_b, log_b = train(coords, config)
        assert log_a.canonical_json() == log_b.canonical_json()
        for name in params_a.arrays:
            np.testing.assert_array_equal(params_a.arrays[name], params_b.arrays[name])

    def test_different_seed_differs(self):
        coords = synthetic_coords(seed=5)
        params_a, _ = train(coords, small_config(seed=1, max_epoch=3))
        params_b, _ = train(coords, small_config(seed=2, max_epoch=3))
        assert any(
            not np.array_equal(params_a.arrays[n], params_b.arrays[n])
            for n in params_a.arrays
        )

    def test_resume_reproduces_straight_run(self, tmp_path):
        coords = synthetic_coords(seed=9)
        full_cfg = small_config(seed=4, max_epoch=8)
        straight, _ = train(coords, full_cfg)

        half_cfg = small_config(seed=4, max_epoch=4)
        ckpt = tmp_path / "half.ckpt"
        train(coords, half_cfg, checkpoint_path=ckpt)
        resumed, _ = train(coords, full_cfg, resume_from=ckpt)
        for name in straight.arrays:
            np.testing.assert_array_equal(straight.arrays[name], resumed.arrays[name])

    def test_checkpoint_files_bit_identical_across_runs(self, tmp_path):
        coords = synthetic_coords(seed=2)
        config = small_config(seed=11, max_epoch=4)
        a, b = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
        train(coords, config, checkpoint_path=a)
        train(coords, config, checkpoint_path=b)
        assert a.read_bytes() == b.read_bytes()

    def test_all_outlier_epochs_raise_after_three(self):
        coords = synthetic_coords(seed=1)
        config = small_config(eps=1e-9, min_samples=2, max_epoch=10)
        with pytest.raises(RuntimeError, match="all-outlier"):
            train(coords, config)

    def test_single_cluster_trains_at_zero_loss_and_stops_on_patience(self):
        # Identical sequences collapse to one cluster: loss is exactly 0,
        # never improves after epoch 1, so patience=1 stops at epoch 2.
        frames = generate_synthetic(2, 1, 6, 20, 0.0, seed=0)[0].frames
        coords = np.stack([frames] * 6)
        config = small_config(eps=10.0, max_epoch=50, max_patience=1)
        _params, log = train(coords, config)
        assert [e.loss for e in log.epochs] == [0.0, 0.0]

    def test_input_validation(self):
        config = small_config()
        with pytest.raises(ValueError, match="shape"):
            train(np.zeros((4, 6, 20)), config)
        with pytest.raises(ValueError, match="window"):
            train(np.zeros((4, 5, 20, 3)), config)
        with pytest.raises(ValueError, match="empty"):
            train(np.zeros((0, 6, 20, 3)), config)


class TestVariants:
    def test_dpc_trains_joint_level_only_with_frozen_identity_head(self):
        coords = synthetic_coords(seed=6)
        config = small_config(loss_variant="dpc", max_epoch=5, seed=6)
        config = TrainConfig(**{**config.to_dict(), "eps": tune_eps(coords, config)})
        params, log = train(coords, config)
        assert params.n_levels == 1
        assert params.m_heads == 1
        np.testing.assert_array_equal(params.head(1, 0), np.eye(config.h))
        assert len(log.epochs) == 5

    def test_heterogeneous_heads_produce_two_head_sets(self):
        coords = synthetic_coords(seed=8)
        config = small_config(heterogeneous_heads=True, max_epoch=2, seed=8)
        config = TrainConfig(**{**config.to_dict(), "eps": tune_eps(coords, config)})
        params, _ = train(coords, config)
        assert params.heterogeneous
        assert "phead1.0" in params.arrays
        assert not np.array_equal(params.arrays["phead1.0"], params.arrays["head1.0"])

    def test_importance_gradient_ablation_runs(self):
        coords = synthetic_coords(seed=10)
        config = small_config(importance_stop_gradient=False, max_epoch=3, seed=10)
        config = TrainConfig(**{**config.to_dict(), "eps": tune_eps(coords, config)})
        _params, log = train(coords, config)
        assert len(log.epochs) == 3

    def test_center_root_flag_changes_training(self):
        coords = synthetic_coords(seed=12)
        base_cfg = small_config(max_epoch=2, seed=12)
        base_cfg = TrainConfig(**{**base_cfg.to_dict(), "eps": tune_eps(coords, base_cfg)})
        centered_cfg = TrainConfig(**{**base_cfg.to_dict(), "center_root": True})
        params_a, _ = train(coords, base_cfg)
        params_b, _ = train(coords, centered_cfg)
        assert any(
            not np.array_equal(params_a.arrays[n], params_b.arrays[n])
            for n in params_a.arrays
        )
