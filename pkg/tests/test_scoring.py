import json

import numpy as np
import pytest

from oracles import head_forward
from projqa import (
    FeatureVector,
    HeadWeights,
    QualityResult,
    Rng,
    ScoringError,
    TrainConfig,
    TrainingError,
    aggregate_scores,
    fit_head,
    init_head,
    load_weights,
    regress_quality,
    save_weights,
    train_head,
)
from projqa.scoring import _batch_loss_and_grads, _Params


def fv(values, extractor="t"):
    return FeatureVector(values, extractor)


def toy_items(n_items=8, dim=12, seed=0, projections=2):
    """Synthetic (feature set, label) pairs with a learnable relation."""
    rng = np.random.default_rng(seed)
    w_true = rng.normal(0, 1, dim)
    items = []
    for _ in range(n_items):
        vecs = rng.normal(0, 1, (projections, dim))
        label = float(np.mean(vecs @ w_true))
        items.append(([fv(v) for v in vecs], label))
    return items


class TestHeadWeightsType:
    def test_float32_quantized_storage(self):
        w = HeadWeights(
            W1=np.array([[0.1, 0.2]]), b1=[0.3], W2=[[0.4]], b2=0.5,
            extractor_id="t",
        )
        assert w.W1[0, 0] == float(np.float32(0.1))
        assert w.hidden == 1 and w.dim == 2

    def test_shape_validation(self):
        with pytest.raises(ScoringError):
            HeadWeights(W1=np.zeros(3), b1=np.zeros(3), W2=np.zeros((1, 3)),
                        b2=0.0, extractor_id="t")
        with pytest.raises(ScoringError):
            HeadWeights(W1=np.zeros((3, 2)), b1=np.zeros(4), W2=np.zeros((1, 3)),
                        b2=0.0, extractor_id="t")

    def test_finite_required(self):
        with pytest.raises(ScoringError):
            HeadWeights(W1=np.array([[np.inf]]), b1=[0.0], W2=[[1.0]], b2=0.0,
                        extractor_id="t")


class TestRegressQuality:
    def test_zero_weights_zero_output(self):
        w = HeadWeights(np.zeros((4, 3)), np.zeros(4), np.zeros((1, 4)), 0.0, "t")
        assert regress_quality(fv([5.0, -2.0, 7.0]), w) == 0.0

    def test_identity_sum_closed_form(self):
        dim = 5
        w = HeadWeights(np.eye(dim), np.zeros(dim), np.ones((1, dim)), 0.0, "t")
        f = [0.5, 1.5, 2.0, 0.0, 3.0]
        assert regress_quality(fv(f), w) == pytest.approx(sum(f))

    def test_matches_matrix_oracle(self):
        rng = np.random.default_rng(4)
        for _ in range(25):
            dim, hidden = rng.integers(2, 20), rng.integers(2, 40)
            w = HeadWeights(
                rng.normal(0, 1, (hidden, dim)), rng.normal(0, 1, hidden),
                rng.normal(0, 1, (1, hidden)), float(rng.normal()), "t",
            )
            f = rng.normal(0, 2, dim)
            want = head_forward(w.W1, w.b1, w.W2[0], w.b2, f)
            assert regress_quality(fv(f), w) == pytest.approx(want, abs=1e-6)

    def test_dim_mismatch(self):
        w = HeadWeights(np.zeros((2, 3)), np.zeros(2), np.zeros((1, 2)), 0.0, "t")
        with pytest.raises(ScoringError, match="dim"):
            regress_quality(fv([1.0, 2.0]), w)

    def test_extractor_mismatch(self):
        w = HeadWeights(np.zeros((2, 3)), np.zeros(2), np.zeros((1, 2)), 0.0, "a")
        with pytest.raises(ScoringError, match="extractor"):
            regress_quality(fv([1.0, 2.0, 3.0], extractor="b"), w)


class TestAggregate:
    def test_mean(self):
        assert aggregate_scores([3.0]) == 3.0
        assert aggregate_scores([1.0, 2.0, 3.0, 4.0, 5.0]) == 3.0

    def test_permutation_invariant(self):
        assert aggregate_scores([5.0, 1.0, 3.0]) == aggregate_scores([1.0, 3.0, 5.0])

    def test_empty_rejected(self):
        with pytest.raises(ScoringError):
            aggregate_scores([])


class TestQualityResult:
    def test_from_scores(self):
        r = QualityResult.from_scores([1.0, 3.0], [], 0)
        assert r.aggregate == 2.0

    def test_aggregate_must_be_mean(self):
        with pytest.raises(ScoringError):
            QualityResult([1.0, 3.0], 2.5, [], 0)


class TestGradients:
    @pytest.mark.parametrize("loss_on", ["average", "projection"])
    def test_matches_central_finite_differences(self, loss_on):
        rng = np.random.default_rng(17)
        dim, hidden = 6, 9
        mats = [rng.normal(0, 1, (rng.integers(1, 4), dim)) for _ in range(5)]
        labels = np.array(rng.normal(0, 2, 5))
        w = init_head(dim, hidden, Rng(3), "t")
        p = _Params(w)
        idx = range(len(mats))
        _, (dW1, db1, dW2, db2) = _batch_loss_and_grads(p, mats, labels, idx, loss_on)

        eps = 1e-6

        def loss_with(param, i, j, delta):
            q = _Params(w)
            getattr(q, param)[i, j] += delta
            return _batch_loss_and_grads(q, mats, labels, idx, loss_on)[0]

        checks = []
        for i in range(hidden):
            for j in range(dim):
                fd = (loss_with("W1", i, j, eps) - loss_with("W1", i, j, -eps)) / (2 * eps)
                checks.append((dW1[i, j], fd))
        for j in range(hidden):
            fd = (loss_with("W2", 0, j, eps) - loss_with("W2", 0, j, -eps)) / (2 * eps)
            checks.append((dW2[0, j], fd))

        def loss_b1(i, delta):
            q = _Params(w)
            q.b1[i] += delta
            return _batch_loss_and_grads(q, mats, labels, idx, loss_on)[0]

        for i in range(hidden):
            fd = (loss_b1(i, eps) - loss_b1(i, -eps)) / (2 * eps)
            checks.append((db1[i], fd))

        def loss_b2(delta):
            q = _Params(w)
            q.b2 += delta
            return _batch_loss_and_grads(q, mats, labels, idx, loss_on)[0]

        checks.append((db2, (loss_b2(eps) - loss_b2(-eps)) / (2 * eps)))

        for analytic, fd in checks:
            scale = max(abs(analytic), abs(fd), 1e-8)
            assert abs(analytic - fd) / scale < 1e-4


class TestTraining:
    def test_requires_two_items(self):
        with pytest.raises(TrainingError, match="at least 2"):
            train_head(toy_items(1), TrainConfig(epochs=1))

    def test_defaults_match_schedule(self):
        cfg = TrainConfig()
        assert (cfg.epochs, cfg.batch_size, cfg.lr) == (50, 32, 1e-4)
        assert (cfg.decay, cfg.decay_every, cfg.hidden) == (0.9, 5, 128)

    def test_overfits_eight_samples(self):
        items = toy_items(8, seed=1)
        cfg = TrainConfig(epochs=400, batch_size=8, lr=1e-2, hidden=64, seed=0)
        result = fit_head(items, cfg)
        assert result.train_losses[-1] < 1e-3

    def test_guarded_descent_loss_non_increasing(self):
        items = toy_items(10, seed=2)
        cfg = TrainConfig(
            epochs=60, batch_size=4, lr=5e-3, hidden=16, seed=1,
            optimizer="gd", guard=True,
        )
        losses = fit_head(items, cfg).train_losses
        assert all(b <= a + 1e-15 for a, b in zip(losses, losses[1:]))

    def test_seeded_determinism(self):
        items = toy_items(6, seed=3)
        cfg = TrainConfig(epochs=20, batch_size=4, hidden=8, seed=9, lr=1e-3)
        w1 = train_head(items, cfg)
        w2 = train_head(items, cfg)
        assert np.array_equal(w1.W1, w2.W1)
        assert np.array_equal(w1.b1, w2.b1)
        assert np.array_equal(w1.W2, w2.W2)
        assert w1.b2 == w2.b2

    def test_best_epoch_tracks_validation(self):
        items = toy_items(8, seed=4)
        val = toy_items(4, seed=5)
        cfg = TrainConfig(epochs=30, batch_size=4, hidden=16, lr=5e-3, seed=2)
        result = fit_head(items, cfg, val_items=val)
        assert len(result.val_losses) == 30
        assert result.best_epoch == int(np.argmin(result.val_losses))

    def test_mixed_extractors_rejected(self):
        items = [
            ([fv([1.0, 2.0], "a")], 1.0),
            ([fv([1.0, 2.0], "b")], 2.0),
        ]
        with pytest.raises(TrainingError, match="mixed extractors"):
            train_head(items, TrainConfig(epochs=1))

    def test_inconsistent_dims_rejected(self):
        items = [
            ([fv([1.0, 2.0])], 1.0),
            ([fv([1.0, 2.0, 3.0])], 2.0),
        ]
        with pytest.raises(TrainingError, match="dims"):
            train_head(items, TrainConfig(epochs=1))

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence_aborts_with_diagnostics(self):
        items = toy_items(4, seed=6)
        cfg = TrainConfig(epochs=50, batch_size=4, lr=1e30, optimizer="gd", seed=0)
        with pytest.raises(TrainingError, match="non-finite loss"):
            train_head(items, cfg)

    def test_per_projection_loss_mode_trains(self):
        items = toy_items(6, seed=7, projections=3)
        cfg = TrainConfig(epochs=50, batch_size=4, lr=1e-2, hidden=16,
                          loss_on="projection", seed=0)
        result = fit_head(items, cfg)
        assert result.train_losses[-1] < result.train_losses[0]

    def test_trained_head_tagged_with_extractor(self):
        items = [
            ([fv([1.0, 2.0], "ext-z")], 1.0),
            ([fv([2.0, 1.0], "ext-z")], 2.0),
        ]
        w = train_head(items, TrainConfig(epochs=1, hidden=4))
        assert w.extractor_id == "ext-z"


class TestWeightsIO:
    def _weights(self, dim=12, hidden=128, seed=0):
        return init_head(dim, hidden, Rng(seed), "baseline-stats-v1")

    def test_round_trip_equal(self, tmp_path):
        w = self._weights()
        path = tmp_path / "w.json"
        save_weights(w, path)
        back = load_weights(path)
        assert np.array_equal(w.W1, back.W1)
        assert np.array_equal(w.b1, back.b1)
        assert np.array_equal(w.W2, back.W2)
        assert w.b2 == back.b2
        assert back.extractor_id == w.extractor_id

    def test_round_trip_preserves_scores(self, tmp_path):
        w = self._weights(dim=5, hidden=7, seed=3)
        save_weights(w, tmp_path / "w.json")
        back = load_weights(tmp_path / "w.json")
        f = fv(np.linspace(-1, 1, 5), "baseline-stats-v1")
        assert regress_quality(f, w) == regress_quality(f, back)

    def test_file_is_plain_json_with_schema(self, tmp_path):
        w = self._weights(dim=2, hidden=3)
        save_weights(w, tmp_path / "w.json")
        doc = json.loads((tmp_path / "w.json").read_text())
        assert doc["schema_version"] == 1
        assert doc["hidden"] == 3 and doc["dim"] == 2
        assert len(doc["W1"]) == 3 and len(doc["W1"][0]) == 2

    def test_serialized_floats_are_shortest_float32(self, tmp_path):
        w = HeadWeights([[0.1, 1.0]], [2.5], [[1e-8]], 3.0, "t")
        save_weights(w, tmp_path / "w.json")
        text = (tmp_path / "w.json").read_text()
        assert "0.1," in text  # not 0.10000000149011612
        doc = json.loads(text)
        assert np.float32(doc["W1"][0][0]) == np.float32(0.1)

    def test_second_save_identical_bytes(self, tmp_path):
        w = self._weights(dim=6, hidden=9, seed=5)
        save_weights(w, tmp_path / "a.json")
        save_weights(load_weights(tmp_path / "a.json"), tmp_path / "b.json")
        assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()

    def test_corrupted_json_rejected(self, tmp_path):
        p = tmp_path / "bad.json"
        p.write_text('{"schema_version": 1, "hidden": ')
        with pytest.raises(ScoringError, match="corrupted"):
            load_weights(p)

    def test_missing_field_rejected(self, tmp_path):
        w = self._weights(dim=2, hidden=2)
        save_weights(w, tmp_path / "w.json")
        doc = json.loads((tmp_path / "w.json").read_text())
        del doc["b1"]
        (tmp_path / "w.json").write_text(json.dumps(doc))
        with pytest.raises(ScoringError, match="missing field"):
            load_weights(tmp_path / "w.json")

    def test_shape_mismatch_rejected(self, tmp_path):
        w = self._weights(dim=2, hidden=2)
        save_weights(w, tmp_path / "w.json")
        doc = json.loads((tmp_path / "w.json").read_text())
        doc["dim"] = 5
        (tmp_path / "w.json").write_text(json.dumps(doc))
        with pytest.raises(ScoringError, match="disagree"):
            load_weights(tmp_path / "w.json")

    def test_missing_file(self, tmp_path):
        with pytest.raises(ScoringError, match="weights not found"):
            load_weights(tmp_path / "none.json")

    def test_dim_768_head_rejects_dim_12_features(self, tmp_path):
        w = init_head(768, 128, Rng(0), "backend-x")
        save_weights(w, tmp_path / "w.json")
        back = load_weights(tmp_path / "w.json")
        with pytest.raises(ScoringError, match="dim"):
            regress_quality(fv(np.ones(12), "backend-x"), back)
