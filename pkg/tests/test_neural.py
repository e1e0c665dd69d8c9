import math

import numpy as np
import pytest

from twrloc import dataset as dsm
from twrloc import neural


def small_dataset(n=8, n_features=6, n_labels=2, seed=0, val=2):
    rng = np.random.default_rng(seed)
    feats = rng.normal(size=(n, n_features))
    labels = rng.uniform(20, 90, (n, n_labels))
    samples = [dsm.Sample(feats[i], labels[i], "homogeneous", (0.1,), 0) for i in range(n)]
    tags = ["train"] * (n - val) + ["val"] * val
    stats = dsm.fit_standardizer(feats[: n - val])
    return dsm.Dataset(samples, {}, tags, stats)


def random_small_model(rng):
    """Random <=3-hidden-layer relu model with kink-free gradients.

    Biases are drawn away from zero so no pre-activation sits exactly on
    the relu kink (zero biases plus a dead previous layer pin z to 0,
    where the subgradient and the two-sided difference disagree).
    """
    n_in = int(rng.integers(2, 6))
    layers = [neural.DenseSpec(int(w), "relu")
              for w in rng.integers(1, 9, size=rng.integers(1, 4))]
    layers.append(neural.DenseSpec(int(rng.integers(1, 4)), "linear"))
    spec = neural.ModelSpec(n_in, tuple(layers))
    params = neural.init_params(spec, int(rng.integers(1 << 31)))
    params = [(w, b + rng.uniform(0.05, 0.3, size=b.shape)) for w, b in params]
    return spec, params


def finite_difference_grads(spec, params, x, y, h=1e-5):
    grads = []
    for w, b in params:
        gw = np.zeros_like(w)
        gb = np.zeros_like(b)
        for arr, g in ((w, gw), (b, gb)):
            flat = arr.ravel()
            gf = g.ravel()
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                lp = neural.msle(y, neural.forward(spec, params, x)[0])
                flat[i] = orig - h
                lm = neural.msle(y, neural.forward(spec, params, x)[0])
                flat[i] = orig
                gf[i] = (lp - lm) / (2 * h)
        grads.append((gw, gb))
    return grads


class TestArchitectures:
    def test_two_target_total_is_529714(self):
        assert neural.parameter_count(neural.build_two_target_model()) == 529_714

    def test_two_target_per_layer_counts(self):
        counts = [c for c in neural.layer_parameter_counts(neural.build_two_target_model()) if c]
        assert counts == [81_510, 85_800, 90_300, 90_300, 90_300, 90_300, 1_204]

    def test_single_target_layout(self):
        spec = neural.build_single_target_model()
        assert spec.input_dim == 285
        dense = [l for l in spec.layers if isinstance(l, neural.DenseSpec)]
        assert [d.width for d in dense] == [284, 300, 300, 300, 2]
        assert [d.activation for d in dense] == ["relu"] * 4 + ["linear"]
        assert len(spec.layers) == 9
        # with a 285 input the total is 347,926 (284-input tables give 347,642)
        assert neural.parameter_count(spec) == 347_926

    def test_two_target_layout(self):
        spec = neural.build_two_target_model()
        dense = [l for l in spec.layers if isinstance(l, neural.DenseSpec)]
        assert [d.width for d in dense] == [285, 300, 300, 300, 300, 300, 4]
        assert len(spec.layers) == 12
        assert isinstance(spec.layers[-2], neural.DenseSpec)  # no dropout before output

    def test_dense_count_formula(self):
        spec = neural.ModelSpec(285, (neural.DenseSpec(300, "relu"),))
        assert neural.parameter_count(spec) == 285 * 300 + 300

    def test_invalid_specs_rejected(self):
        with pytest.raises(ValueError):
            neural.ModelSpec(4, (neural.DenseSpec(3, "tanh"),))
        with pytest.raises(ValueError):
            neural.ModelSpec(4, (neural.DropoutSpec(1.0),))


class TestForward:
    def test_zero_input_zero_params(self):
        spec = neural.ModelSpec(3, (neural.DenseSpec(2, "linear"),))
        params = [(np.zeros((2, 3)), np.zeros(2))]
        out, _ = neural.forward(spec, params, np.zeros((4, 3)))
        assert not out.any()

    def test_one_layer_hand_arithmetic(self):
        spec = neural.ModelSpec(1, (neural.DenseSpec(1, "linear"),))
        params = [(np.array([[2.0]]), np.array([1.0]))]
        out, _ = neural.forward(spec, params, np.array([3.0]))
        assert out[0] == 7.0

    def test_relu(self):
        spec = neural.ModelSpec(3, (neural.DenseSpec(3, "relu"),))
        params = [(np.eye(3), np.zeros(3))]
        out, _ = neural.forward(spec, params, np.array([-1.0, 0.0, 2.0]))
        assert list(out) == [0.0, 0.0, 2.0]

    def test_shape_mismatch_rejected(self):
        spec = neural.ModelSpec(3, (neural.DenseSpec(2, "linear"),))
        params = neural.init_params(spec, 0)
        with pytest.raises(ValueError):
            neural.forward(spec, params, np.zeros((4, 5)))

    def test_eval_ignores_dropout_seed(self):
        spec = neural.ModelSpec(4, (neural.DenseSpec(8, "relu"), neural.DropoutSpec(0.5),
                                    neural.DenseSpec(2, "linear")))
        params = neural.init_params(spec, 1)
        x = np.random.default_rng(2).normal(size=(5, 4))
        o1, _ = neural.forward(spec, params, x, training=False, seed=1)
        o2, _ = neural.forward(spec, params, x, training=False, seed=999)
        assert np.array_equal(o1, o2)

    def test_training_dropout_reproducible(self):
        spec = neural.ModelSpec(4, (neural.DenseSpec(8, "relu"), neural.DropoutSpec(0.5),
                                    neural.DenseSpec(2, "linear")))
        params = neural.init_params(spec, 1)
        x = np.random.default_rng(2).normal(size=(5, 4))
        o1, _ = neural.forward(spec, params, x, training=True, seed=7)
        o2, _ = neural.forward(spec, params, x, training=True, seed=7)
        assert np.array_equal(o1, o2)

    def test_inverted_dropout_expectation(self):
        # mean over masks of the dropped activations matches the clean pass
        spec = neural.ModelSpec(4, (neural.DenseSpec(16, "relu"), neural.DropoutSpec(0.3),
                                    neural.DenseSpec(2, "linear")))
        params = neural.init_params(spec, 3)
        x = np.random.default_rng(4).normal(size=(6, 4))
        clean, _ = neural.forward(spec, params, x, training=False)
        acc = np.zeros_like(clean)
        n_masks = 10_000
        for s in range(n_masks):
            out, _ = neural.forward(spec, params, x, training=True, seed=s)
            acc += out
        rel = np.abs(acc / n_masks - clean).max() / np.abs(clean).max()
        assert rel <= 0.02


class TestMsle:
    def test_zero_at_equality(self):
        assert neural.msle([5.0, 40.0], [5.0, 40.0]) == 0.0

    def test_log_unit_example(self):
        assert neural.msle([math.e - 1.0], [0.0]) == pytest.approx(1.0)

    def test_hand_computed(self):
        assert neural.msle([3.0], [1.0]) == pytest.approx(math.log(2.0) ** 2)

    def test_always_non_negative_and_clamped(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            y = rng.uniform(0, 100, 7)
            yhat = rng.uniform(-5, 100, 7)
            assert neural.msle(y, yhat) >= 0.0
            assert math.isfinite(neural.msle(y, yhat))


class TestBackward:
    def test_zero_gradients_at_zero_loss(self):
        spec = neural.ModelSpec(1, (neural.DenseSpec(1, "linear"),))
        params = [(np.array([[1.0]]), np.array([0.0]))]
        x = np.array([[4.0]])
        out, cache = neural.forward(spec, params, x)
        grads = neural.backward(spec, params, cache, out)
        assert not grads[0][0].any() and not grads[0][1].any()

    def test_one_parameter_analytic_form(self):
        # d/dw (log1p(y) - log1p(wx))^2 = -2 r x / (1 + wx)
        w0, x0, y0 = 1.5, 2.0, 10.0
        spec = neural.ModelSpec(1, (neural.DenseSpec(1, "linear"),))
        params = [(np.array([[w0]]), np.array([0.0]))]
        _, cache = neural.forward(spec, params, np.array([[x0]]))
        grads = neural.backward(spec, params, cache, np.array([[y0]]))
        r = math.log1p(y0) - math.log1p(w0 * x0)
        expected = -2.0 * r * x0 / (1.0 + w0 * x0)
        assert grads[0][0][0, 0] == pytest.approx(expected, rel=1e-12)

    def test_20_random_models_match_finite_differences(self):
        rng = np.random.default_rng(2024)
        worst = 0.0
        for _ in range(20):
            # redraw until every pre-activation clears the relu kink, where
            # the subgradient and a two-sided difference legitimately differ
            for _attempt in range(50):
                spec, params = random_small_model(rng)
                x = rng.uniform(-1.0, 1.0, (3, spec.input_dim))
                y = rng.uniform(1.0, 50.0, (3, spec.output_dim))
                _, cache = neural.forward(spec, params, x)
                if min(np.abs(z).min() for z in cache["pre"]) > 1e-4:
                    break
            else:
                pytest.fail("could not draw a kink-free model")
            grads = neural.backward(spec, params, cache, y)
            numeric = finite_difference_grads(spec, params, x, y)
            for (gw, gb), (nw, nb) in zip(grads, numeric):
                for g, n in ((gw, nw), (gb, nb)):
                    denom = np.maximum(np.maximum(np.abs(g), np.abs(n)), 1e-8)
                    worst = max(worst, float((np.abs(g - n) / denom).max()))
        assert worst <= 1e-4

    def test_gradient_with_dropout_mask_replayed(self):
        spec = neural.ModelSpec(3, (neural.DenseSpec(6, "relu"), neural.DropoutSpec(0.4),
                                    neural.DenseSpec(2, "linear")))
        params = neural.init_params(spec, 5)
        params = [(w, b + 0.1) for w, b in params]
        rng = np.random.default_rng(6)
        x = rng.uniform(-1, 1, (4, 3))
        y = rng.uniform(5, 50, (4, 2))
        out, cache = neural.forward(spec, params, x, training=True, seed=11)
        grads = neural.backward(spec, params, cache, y)
        # numeric check against the same fixed mask, via the cached mask
        mask = cache["masks"][0]
        h = 1e-6

        def loss_with(params_mod):
            a = np.maximum(x @ params_mod[0][0].T + params_mod[0][1], 0.0) * mask
            pred = a @ params_mod[1][0].T + params_mod[1][1]
            return neural.msle(y, pred)

        w0 = params[0][0].copy()
        probe = (2, 1)
        bumped = [(w0.copy(), params[0][1].copy()), (params[1][0].copy(), params[1][1].copy())]
        bumped[0][0][probe] += h
        lp = loss_with(bumped)
        bumped[0][0][probe] -= 2 * h
        lm = loss_with(bumped)
        numeric = (lp - lm) / (2 * h)
        assert grads[0][0][probe] == pytest.approx(numeric, rel=1e-4)

    def test_stale_cache_rejected(self):
        spec = neural.ModelSpec(3, (neural.DenseSpec(2, "linear"),))
        params = neural.init_params(spec, 0)
        _, cache = neural.forward(spec, params, np.zeros((2, 3)))
        other = neural.ModelSpec(3, (neural.DenseSpec(2, "relu"), neural.DenseSpec(2, "linear")))
        with pytest.raises(ValueError):
            neural.backward(other, neural.init_params(other, 0), cache, np.zeros((2, 2)))


class TestAdam:
    def test_zero_gradient_keeps_params(self):
        params = [(np.array([[1.0, 2.0]]), np.array([3.0]))]
        grads = [(np.zeros((1, 2)), np.zeros(1))]
        state = neural.adam_init(params)
        new_params, new_state = neural.adam_step(params, grads, state, lr=0.1)
        assert np.array_equal(new_params[0][0], params[0][0])
        assert np.array_equal(new_params[0][1], params[0][1])
        assert new_state.t == 1

    def test_first_step_magnitude_close_to_lr(self):
        params = [(np.array([[1.0]]), np.array([0.5]))]
        grads = [(np.array([[0.37]]), np.array([-2.1]))]
        state = neural.adam_init(params)
        new_params, _ = neural.adam_step(params, grads, state, lr=0.01)
        assert abs(new_params[0][0][0, 0] - 1.0) == pytest.approx(0.01, rel=1e-3)
        assert abs(new_params[0][1][0] - 0.5) == pytest.approx(0.01, rel=1e-3)

    def test_quadratic_bowl_convergence(self):
        w = [(np.array([[0.0]]), np.zeros(1))]
        state = neural.adam_init(w)
        for _ in range(200):
            grads = [(2.0 * (w[0][0] - 5.0), np.zeros(1))]
            w, state = neural.adam_step(w, grads, state, lr=0.1)
        assert abs(w[0][0][0, 0] - 5.0) < 0.5


class TestTrain:
    def test_determinism(self):
        ds = small_dataset()
        spec = neural.ModelSpec(6, (neural.DenseSpec(16, "relu"), neural.DropoutSpec(0.2),
                                    neural.DenseSpec(2, "linear")))
        config = neural.TrainConfig(learning_rate=1e-3, batch_size=3, max_epochs=20, rng_seed=4)
        p1, h1 = neural.train(spec, ds, config)
        p2, h2 = neural.train(spec, ds, config)
        assert h1.records == h2.records
        for (w1, b1), (w2, b2) in zip(p1, p2):
            assert np.array_equal(w1, w2) and np.array_equal(b1, b2)

    def test_memorizes_single_sample(self):
        rng = np.random.default_rng(1)
        feats = rng.normal(size=(2, 4))
        labels = rng.uniform(30, 70, (2, 2))
        samples = [dsm.Sample(feats[i], labels[i], "homogeneous", (0.1,), 0) for i in range(2)]
        stats = (np.zeros(4), np.ones(4))
        ds = dsm.Dataset(samples, {}, ["train", "val"], stats)
        spec = neural.ModelSpec(4, (neural.DenseSpec(32, "relu"), neural.DenseSpec(2, "linear")))
        config = neural.TrainConfig(learning_rate=1e-2, batch_size=1, max_epochs=2000,
                                    rng_seed=0, use_dropout=False)
        _, history = neural.train(spec, ds, config)
        assert history.final().train_loss < 1e-4

    def test_divergence_detected(self):
        ds = small_dataset()
        spec = neural.ModelSpec(6, (neural.DenseSpec(4, "relu"), neural.DenseSpec(2, "linear")))
        poisoned = neural.init_params(spec, 0)
        poisoned[0][0][0, 0] = np.nan
        config = neural.TrainConfig(learning_rate=1e-3, batch_size=4, max_epochs=5)
        with pytest.raises(neural.TrainingDiverged) as err:
            neural.train(spec, ds, config, init=poisoned)
        assert err.value.epoch == 0

    def test_early_stopping_truncates_and_restores_best(self):
        ds = small_dataset(n=12, val=4, seed=3)
        spec = neural.ModelSpec(6, (neural.DenseSpec(48, "relu"), neural.DenseSpec(2, "linear")))
        config = neural.TrainConfig(learning_rate=5e-3, batch_size=4, max_epochs=3000,
                                    rng_seed=2, use_dropout=False,
                                    early_stop_enabled=True, patience=25)
        params, history = neural.train(spec, ds, config)
        assert len(history) < 3000
        best = history.best_val_epoch()
        assert len(history) - 1 - best >= 25  # stopped only after patience ran out
        x_val, y_val = ds.split_arrays("val")
        out, _ = neural.forward(spec, params, x_val)
        restored_loss = neural.msle(y_val, out)
        assert restored_loss == pytest.approx(history.records[best].val_loss, abs=1e-12)

    def test_partial_final_batch_kept(self):
        ds = small_dataset(n=9, val=2)
        spec = neural.ModelSpec(6, (neural.DenseSpec(4, "relu"), neural.DenseSpec(2, "linear")))
        config = neural.TrainConfig(learning_rate=1e-3, batch_size=4, max_epochs=2)
        params, history = neural.train(spec, ds, config)  # 7 train samples, batches 4+3
        assert len(history) == 2


class TestPredictAndAccuracy:
    def test_exact_predictions_are_hits(self):
        truths = np.array([[10.0, 40.0], [20.0, 80.0]])
        assert neural.hit_accuracy(truths, truths) == 1.0

    def test_all_misses(self):
        truths = np.array([[10.0, 40.0]])
        assert neural.hit_accuracy(truths + 100.0, truths) == 0.0

    def test_half_hits(self):
        truths = np.array([[10.0, 40.0], [20.0, 80.0]])
        preds = truths + np.array([[3.0, 0.0], [8.0, 0.0]])
        assert neural.hit_accuracy(preds, truths, tol_cm=5.0) == 0.5

    def test_two_target_requires_both(self):
        truths = np.array([[10.0, 40.0, 50.0, 90.0]])
        preds = truths.copy()
        preds[0, 2] += 9.0
        assert neural.hit_accuracy(preds, truths) == 0.0

    def test_translation_invariance(self):
        rng = np.random.default_rng(5)
        truths = rng.uniform(10, 90, (20, 4))
        preds = truths + rng.normal(0, 4, (20, 4))
        a1 = neural.hit_accuracy(preds, truths)
        a2 = neural.hit_accuracy(preds + 17.0, truths + 17.0)
        assert a1 == a2

    def test_mismatched_shapes_rejected(self):
        with pytest.raises(ValueError):
            neural.hit_accuracy(np.zeros((2, 2)), np.zeros((3, 2)))

    def test_predict_applies_standardizer(self):
        spec = neural.ModelSpec(3, (neural.DenseSpec(2, "linear"),))
        params = neural.init_params(spec, 1)
        stats = (np.array([1.0, 2.0, 3.0]), np.array([2.0, 2.0, 2.0]))
        raw = np.array([[3.0, 4.0, 5.0]])
        direct = neural.predict(spec, params, (raw - stats[0]) / stats[1])
        auto = neural.predict(spec, params, raw, standardizer=stats)
        assert np.array_equal(direct, auto)


class TestCheckpoints:
    def test_round_trip_bit_exact(self, tmp_path):
        spec = neural.build_single_target_model()
        params = neural.init_params(spec, 7)
        stats = (np.random.default_rng(0).normal(size=285), np.full(285, 2.0))
        path = tmp_path / "model.twrm"
        neural.save_model(path, spec, params, stats)
        spec2, params2, stats2 = neural.load_model(path)
        assert spec2 == spec
        x = np.random.default_rng(1).normal(size=(4, 285))
        assert np.array_equal(neural.predict(spec, params, x, stats),
                              neural.predict(spec2, params2, x, stats2))

    def test_corrupted_checkpoint_rejected(self, tmp_path):
        spec = neural.ModelSpec(3, (neural.DenseSpec(2, "linear"),))
        path = tmp_path / "model.twrm"
        neural.save_model(path, spec, neural.init_params(spec, 0))
        blob = bytearray(path.read_bytes())
        blob[30] ^= 0xFF
        path.write_bytes(bytes(blob))
        with pytest.raises(neural.CheckpointError):
            neural.load_model(path)

    def test_save_bytes_deterministic(self, tmp_path):
        spec = neural.ModelSpec(3, (neural.DenseSpec(2, "linear"),))
        params = neural.init_params(spec, 0)
        p1, p2 = tmp_path / "a.twrm", tmp_path / "b.twrm"
        neural.save_model(p1, spec, params)
        neural.save_model(p2, spec, params)
        assert p1.read_bytes() == p2.read_bytes()
