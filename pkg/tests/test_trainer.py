"""Training loop: determinism, the pseudo-label weight schedule, and the
two-term objective."""

import numpy as np
import pytest

from wifimode.model import ArchitectureSpec, Model, ModelConfig
from wifimode.trainer import (CombinedLoss, PseudoLabelConfig, TrainConfig,
                              _epoch_batches, alpha_schedule, combined_loss,
                              pseudo_label_assign, train_semisupervised,
                              train_supervised)


def blobs(n_per_class=30, seed=0, spread=0.04):
    """Three well-separated gaussian clusters in feature space."""
    rng = np.random.default_rng(seed)
    centers = rng.random((3, 15)) * 0.8 + 0.1
    X = np.vstack([c + rng.normal(0, spread, (n_per_class, 15)) for c in centers])
    y = np.repeat(np.arange(3), n_per_class)
    return X, y


def fresh_model(config="b00", depth=10, seed=5):
    return Model.build(ModelConfig.from_name(config),
                       ArchitectureSpec.from_depth(depth), seed=seed)


def params_bytes(model):
    return b"".join(np.ascontiguousarray(getattr(model.params, f)).tobytes()
                    for f in model.params.FIELDS)


class TestAlphaSchedule:
    def test_three_phases(self):
        t1, t2, af = 50, 300, 3.0
        assert alpha_schedule(0, t1, t2, af) == 0.0
        assert alpha_schedule(49, t1, t2, af) == 0.0
        assert alpha_schedule(50, t1, t2, af) == 0.0
        assert alpha_schedule(175, t1, t2, af) == pytest.approx(1.5)
        assert alpha_schedule(300, t1, t2, af) == af
        assert alpha_schedule(10_000, t1, t2, af) == af

    def test_ramp_is_linear(self):
        vals = [alpha_schedule(t, 10, 20, 2.0) for t in range(10, 21)]
        np.testing.assert_allclose(np.diff(vals), 0.2)

    def test_default_ramp_fractions(self):
        assert PseudoLabelConfig().resolve_ramp(500) == (100, 500)
        assert PseudoLabelConfig().resolve_ramp(200) == (40, 200)
        assert PseudoLabelConfig(t1_epoch=5, t2_epoch=7).resolve_ramp(200) == (5, 7)

    def test_bad_ramp(self):
        with pytest.raises(ValueError):
            PseudoLabelConfig(t1_epoch=30, t2_epoch=10).resolve_ramp(100)


class TestConfigValidation:
    def test_rate_bounds(self):
        with pytest.raises(ValueError):
            PseudoLabelConfig(sample_rate=1.5)
        with pytest.raises(ValueError):
            PseudoLabelConfig(sample_rate=-0.1)

    def test_train_knobs(self):
        with pytest.raises(ValueError):
            TrainConfig(epochs=0)
        with pytest.raises(ValueError):
            TrainConfig(batch_size=0)

    def test_bn_needs_pairs(self):
        X, y = blobs(5)
        with pytest.raises(ValueError, match="atch"):
            train_supervised(fresh_model("b10"), X, y, TrainConfig(epochs=1, batch_size=1))

    def test_label_range(self):
        X, y = blobs(5)
        with pytest.raises(ValueError):
            train_supervised(fresh_model(), X, y + 5, TrainConfig(epochs=1))


class TestEpochBatches:
    def test_singleton_merged(self):
        order = np.arange(33)
        batches = _epoch_batches(33, 32, order, True)
        assert [b.shape[0] for b in batches] == [33]
        np.testing.assert_array_equal(np.sort(np.concatenate(batches)), order)

    def test_singleton_kept_without_flag(self):
        batches = _epoch_batches(33, 32, np.arange(33), False)
        assert [b.shape[0] for b in batches] == [32, 1]

    def test_exact_division_untouched(self):
        batches = _epoch_batches(64, 32, np.arange(64), True)
        assert [b.shape[0] for b in batches] == [32, 32]


class TestDeterminism:
    def run_once(self, semi, seed=9):
        X, y = blobs(20)
        model = fresh_model("c11", seed=3)
        cfg = TrainConfig(epochs=8, batch_size=16, seed=seed)
        if semi:
            pool = blobs(40, seed=99)[0]
            res = train_semisupervised(model, X, y, pool, cfg,
                                       PseudoLabelConfig(0.5, 2.0, 2, 5))
        else:
            res = train_supervised(model, X, y, cfg)
        return params_bytes(res.model), res.rows

    @pytest.mark.parametrize("semi", [False, True])
    def test_same_seed_bit_identical(self, semi):
        b1, rows1 = self.run_once(semi)
        b2, rows2 = self.run_once(semi)
        assert b1 == b2
        assert rows1 == rows2

    def test_seed_changes_outcome(self):
        b1, _ = self.run_once(False, seed=9)
        b2, _ = self.run_once(False, seed=10)
        assert b1 != b2

    def test_rate_zero_matches_supervised(self):
        """An empty pseudo draw must leave the byte stream of a plain
        supervised run untouched, dropout randomness included."""
        X, y = blobs(20)
        pool = blobs(25, seed=4)[0]
        cfg = TrainConfig(epochs=6, batch_size=16, seed=1)
        sup = train_supervised(fresh_model("d11", seed=0), X, y, cfg)
        semi = train_semisupervised(fresh_model("d11", seed=0), X, y, pool, cfg,
                                    PseudoLabelConfig(sample_rate=0.0))
        assert params_bytes(sup.model) == params_bytes(semi.model)
        assert [(r.epoch, r.loss) for r in sup.rows] == \
            [(r.epoch, r.loss) for r in semi.rows]

    def test_singleton_pool_with_bn_degrades_to_supervised(self):
        X, y = blobs(20)
        pool = blobs(25, seed=4)[0][:1]
        cfg = TrainConfig(epochs=4, batch_size=16, seed=1)
        sup = train_supervised(fresh_model("c10", seed=0), X, y, cfg)
        semi = train_semisupervised(fresh_model("c10", seed=0), X, y, pool, cfg,
                                    PseudoLabelConfig(sample_rate=1.0, t1_epoch=0,
                                                      t2_epoch=1))
        assert params_bytes(sup.model) == params_bytes(semi.model)
        assert all(r.alpha == 0.0 for r in semi.rows)


class TestTrainingProgress:
    def test_loss_drops_and_fits(self):
        X, y = blobs(30)
        model = fresh_model("b00")
        res = train_supervised(model, X, y, TrainConfig(epochs=60, batch_size=32, seed=0))
        assert res.rows[0].loss > res.final_train_loss
        assert res.final_train_accuracy > 0.95
        assert np.mean(model.predict(X) == y) > 0.95

    def test_validation_rows_tracked(self):
        X, y = blobs(20)
        Xv, yv = blobs(6, seed=2)
        res = train_supervised(fresh_model(), X, y,
                               TrainConfig(epochs=3, batch_size=16),
                               X_val=Xv, y_val=yv)
        splits = {r.split for r in res.rows}
        assert splits == {"train", "val"}
        assert sum(r.split == "val" for r in res.rows) == 3

    def test_trace_alpha_follows_schedule(self):
        X, y = blobs(12)
        pool = blobs(20, seed=7)[0]
        res = train_semisupervised(fresh_model(), X, y, pool,
                                   TrainConfig(epochs=10, batch_size=8, seed=0),
                                   PseudoLabelConfig(0.5, 4.0, t1_epoch=2, t2_epoch=6))
        train_rows = [r for r in res.rows if r.split == "train"]
        expected = [alpha_schedule(t, 2, 6, 4.0) for t in range(10)]
        assert [r.alpha for r in train_rows] == expected

    def test_rounds_extend_training(self):
        X, y = blobs(12)
        pool = blobs(20, seed=7)[0]
        res = train_semisupervised(fresh_model(), X, y, pool,
                                   TrainConfig(epochs=5, batch_size=8, seed=0),
                                   PseudoLabelConfig(0.4, 1.0, 1, 3, rounds=2))
        train_rows = [r for r in res.rows if r.split == "train"]
        assert [r.epoch for r in train_rows] == list(range(10))
        # ramp restarts in the second round
        assert train_rows[5].alpha == 0.0

    def test_write_trace(self, tmp_path):
        X, y = blobs(10)
        res = train_supervised(fresh_model(), X, y, TrainConfig(epochs=2, batch_size=8))
        path = tmp_path / "trace.csv"
        res.write_trace(path)
        lines = path.read_text().splitlines()
        assert lines[0] == "epoch,split,loss,accuracy,alpha"
        assert len(lines) == 3
        first = lines[1].split(",")
        assert first[0] == "0" and first[1] == "train"
        assert float(first[2]) == res.rows[0].loss


class TestCombinedLoss:
    def batches(self, seed, n_batches, size=8):
        rng = np.random.default_rng(seed)
        return [(rng.random((size, 15)), rng.integers(0, 3, size))
                for _ in range(n_batches)]

    def test_two_term_arithmetic(self):
        from wifimode.model import train_loss_and_grads
        model = fresh_model("a00")
        lab = self.batches(0, 2)
        pl = self.batches(1, 3)
        out = combined_loss(model, lab, pl, alpha=1.5)

        lab_losses = [train_loss_and_grads(model, Xb, yb)[0] for Xb, yb in lab]
        pl_losses = [train_loss_and_grads(model, Xb, yb)[0] for Xb, yb in pl]
        assert out.labelled_term == pytest.approx(np.mean(lab_losses), rel=1e-12)
        assert out.pseudo_term == pytest.approx(np.mean(pl_losses), rel=1e-12)
        assert out.total == pytest.approx(out.labelled_term + 1.5 * out.pseudo_term,
                                          rel=1e-12)

    def test_gradient_is_weighted_sum(self):
        from wifimode.model import train_loss_and_grads
        model = fresh_model("a00")
        lab = self.batches(2, 1)
        pl = self.batches(3, 1)
        out = combined_loss(model, lab, pl, alpha=2.0)
        g_lab = train_loss_and_grads(model, *lab[0])[2]
        g_pl = train_loss_and_grads(model, *pl[0])[2]
        for got, gl, gp in zip(out.grads, g_lab, g_pl):
            np.testing.assert_allclose(got, gl + 2.0 * gp, rtol=1e-12)

    @pytest.mark.parametrize("pl_batches,alpha", [(0, 3.0), (3, 0.0)])
    def test_reduces_to_supervised(self, pl_batches, alpha):
        """Weight zero or an empty pool: the objective must equal the
        supervised loss to floating-point exactness."""
        model = fresh_model("a00")
        lab = self.batches(4, 2)
        pl = self.batches(5, pl_batches)
        out = combined_loss(model, lab, pl, alpha=alpha)
        sup = combined_loss(model, lab, [], alpha=0.0)
        assert out.total == sup.total
        assert abs(out.total - sup.labelled_term) <= 1e-12 * abs(sup.labelled_term)
        for a, b in zip(out.grads, sup.grads):
            np.testing.assert_array_equal(a, b)

    def test_needs_labelled_batch(self):
        with pytest.raises(ValueError):
            combined_loss(fresh_model(), [], self.batches(6, 1), 1.0)


def test_pseudo_label_assign_is_argmax():
    model = fresh_model()
    X = np.random.default_rng(0).random((9, 15))
    np.testing.assert_array_equal(pseudo_label_assign(model, X), model.predict(X))
    assert pseudo_label_assign(model, X).dtype.kind == "i"
