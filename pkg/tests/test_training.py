"""Config validation, the joint loss, Adam steps, determinism and checkpoints."""
import numpy as np
import pytest

from pedenet.errors import IncompatibleCheckpointError, InvalidArgumentError
from pedenet.training import (
    LossRecord,
    TrainConfig,
    init_state,
    load_checkpoint,
    read_loss_log,
    sample_batch,
    save_checkpoint,
    total_loss,
    train,
    train_step,
)

SMALL = dict(batch_den=16, batch_lp_pairs=4, steps=3)


@pytest.fixture(scope="module")
def images():
    rng = np.random.default_rng(0)
    return [rng.random((3, 256, 256)).astype(np.float32) for _ in range(3)]


def snapshot(state):
    return {k: p.data.copy() for k, p in state.model.params.items()}


class TestTrainConfig:
    def test_defaults(self):
        cfg = TrainConfig()
        assert (cfg.lambda1, cfg.lambda2, cfg.lambda3) == (1 / 64, 1.0, 0.005 / 320)
        assert (cfg.K, cfg.batch_den, cfg.batch_lp_pairs, cfg.steps) == (5, 128, 36, 5000)
        assert cfg.learning_rate == 1e-4

    @pytest.mark.parametrize("kwargs", [
        {"lambda1": -1.0}, {"lambda3": -0.1}, {"batch_den": 1}, {"batch_lp_pairs": 0},
        {"steps": 0}, {"K": 0}, {"dtype": 16}, {"den_objective": "nope"}, {"normalizer": "x"}, {"jitter": -1},
    ])
    def test_rejects(self, kwargs):
        with pytest.raises(InvalidArgumentError):
            TrainConfig(**kwargs)

    def test_meta_round_trip(self):
        cfg = TrainConfig(lambda3=0.0123, K=3, den_objective="log_mean", cov_eps=1e-3)
        assert TrainConfig.from_meta(cfg.to_meta()) == cfg

    def test_from_mapping_coerces_strings(self):
        cfg = TrainConfig.from_mapping({"K": "4", "lambda2": "0", "unknown": "x"})
        assert cfg.K == 4 and cfg.lambda2 == 0.0


class TestTotalLoss:
    def test_weighted_sum(self, images):
        cfg = TrainConfig(lambda1=0.7, lambda2=1.3, lambda3=0.01, **SMALL)
        state = init_state(cfg)
        parts = total_loss(state.model, sample_batch(images, cfg, state.rng), cfg)
        expected = 0.7 * float(parts.l_den.data) + 1.3 * float(parts.l_lpn.data) + 0.01 * float(parts.l_reg.data)
        assert float(parts.total.data) == pytest.approx(expected, abs=1e-6, rel=1e-6)

    def test_lpn_reported_when_weight_is_zero(self, images):
        cfg = TrainConfig(lambda2=0.0, **SMALL)
        state = init_state(cfg)
        record = train_step(state, images)
        assert record.l_lpn > 0
        assert record.total == pytest.approx(cfg.lambda1 * record.l_den + cfg.lambda3 * record.l_reg, rel=1e-6)


class TestTrainStep:
    def test_all_zero_weights_leave_parameters_unchanged(self, images):
        cfg = TrainConfig(lambda1=0.0, lambda2=0.0, lambda3=0.0, **SMALL)
        state = init_state(cfg)
        before = snapshot(state)
        train_step(state, images)
        for k, v in snapshot(state).items():
            np.testing.assert_array_equal(v, before[k])

    def test_joint_step_moves_every_group(self, images):
        cfg = TrainConfig(**SMALL)
        state = init_state(cfg)
        before = snapshot(state)
        train_step(state, images)
        after = snapshot(state)
        for group in ("pe.", "de.", "lp."):
            moved = [np.abs(after[k] - before[k]).max() for k in after if k.startswith(group)]
            assert max(moved) > 0, group

    def test_zero_lpn_weight_freezes_lp_head(self, images):
        cfg = TrainConfig(lambda2=0.0, **SMALL)
        state = init_state(cfg)
        before = snapshot(state)
        train_step(state, images)
        after = snapshot(state)
        assert all(np.array_equal(after[k], before[k]) for k in after if k.startswith("lp."))
        assert any(not np.array_equal(after[k], before[k]) for k in after if k.startswith("pe."))

    def test_step_counter_and_history(self, images):
        state = init_state(TrainConfig(**SMALL))
        train(images, state.config, state=state)
        assert state.step == 3 and [r.step for r in state.history] == [1, 2, 3]
        assert state.ema_gmm is not None and state.ema_gmm["phi"].shape == (5,)


class TestDeterminism:
    def test_same_seed_same_losses_and_weights(self, images, tmp_path):
        cfg = TrainConfig(**SMALL)
        a = train(images, cfg, log_path=tmp_path / "a.log")
        b = train(images, cfg, log_path=tmp_path / "b.log")
        assert (tmp_path / "a.log").read_bytes() == (tmp_path / "b.log").read_bytes()
        for k, v in snapshot(a).items():
            np.testing.assert_array_equal(v, snapshot(b)[k])

    def test_different_seed_differs(self, images):
        a = train(images, TrainConfig(seed=1, **SMALL))
        b = train(images, TrainConfig(seed=2, **SMALL))
        assert a.history[0].total != b.history[0].total

    def test_resume_matches_uninterrupted(self, images, tmp_path):
        cfg = TrainConfig(**SMALL)
        straight = train(images, cfg)
        half = train(images, TrainConfig(**{**SMALL, "steps": 1}))
        save_checkpoint(half, tmp_path / "half.ckpt")
        resumed = train(images, cfg, state=load_checkpoint(tmp_path / "half.ckpt"))
        assert [r.line() for r in resumed.history] == [r.line() for r in straight.history[1:]]
        for k, v in snapshot(straight).items():
            np.testing.assert_array_equal(v, snapshot(resumed)[k])


class TestCheckpoint:
    def test_bit_exact_round_trip(self, images, tmp_path):
        state = train(images, TrainConfig(**SMALL))
        path = tmp_path / "m.ckpt"
        save_checkpoint(state, path)
        loaded = load_checkpoint(path)
        assert loaded.step == 3 and loaded.config == state.config
        for k, v in snapshot(state).items():
            assert loaded.model.params[k].data.dtype == v.dtype
            np.testing.assert_array_equal(loaded.model.params[k].data, v)
        for k, v in state.adam.first_moment.items():
            np.testing.assert_array_equal(loaded.adam.first_moment[k], v)
        for k, v in state.ema_gmm.items():
            np.testing.assert_array_equal(loaded.ema_gmm[k], v)
        save_checkpoint(loaded, tmp_path / "again.ckpt")
        assert (tmp_path / "again.ckpt").read_bytes() == path.read_bytes()

    def test_truncated_file(self, images, tmp_path):
        state = train(images, TrainConfig(**{**SMALL, "steps": 1}))
        path = tmp_path / "m.ckpt"
        save_checkpoint(state, path)
        path.write_bytes(path.read_bytes()[:1000])
        with pytest.raises(IncompatibleCheckpointError):
            load_checkpoint(path)

    def test_wrong_magic(self, tmp_path):
        path = tmp_path / "junk.ckpt"
        path.write_bytes(b"not a checkpoint at all")
        with pytest.raises(IncompatibleCheckpointError):
            load_checkpoint(path)


class TestLossLog:
    def test_format(self, images, tmp_path):
        path = tmp_path / "loss.log"
        train(images, TrainConfig(**SMALL), log_path=path)
        lines = path.read_text().splitlines()
        assert lines[0] == "# step, L, L_DEN, L_LPN, L_reg"
        assert len(lines) == 4
        assert all(len(line.split(", ")) == 5 for line in lines[1:])
        assert [r.step for r in read_loss_log(path)] == [1, 2, 3]

    def test_record_round_trip(self):
        r = LossRecord(12, 1.5, -0.25, 2.0794415, 3e4)
        assert LossRecord.parse(r.line()) == r
