import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stockrank.dataset import SampleSet, assign_label, cap_return
from stockrank.errors import ConfigError, NumericError
from stockrank.losses import LossKind, batch_loss
from stockrank.models import (
    ArchConfig,
    EnsembleState,
    TrainConfig,
    build_model,
    ensemble_predict,
    ensemble_weights,
    forward,
    load_checkpoint,
    load_ensemble,
    moe_weights,
    predict,
    predict_batch,
    save_checkpoint,
    save_ensemble,
    score,
    train_period,
)
from stockrank.nn import Tensor, embedding_add

SMALL_ARCH = ArchConfig(m=10, n=6, conv=((3, 8), (3, 8)), dense=(8,),
                        loss="return_weighted_ce")


def toy_samples(rng, n, arch, signal=True):
    """Windows whose last-row mean predicts a +5% or 0% return."""
    windows = rng.normal(0, 1, size=(n, arch.m, arch.n))
    hot = rng.random(n) < 0.5
    returns = np.where(hot, 0.05, 0.0) + rng.normal(0, 0.002, size=n)
    if signal:
        windows[hot, -1, :] += 3.0
    labels = np.stack([assign_label(r) for r in returns])
    weights = np.array([cap_return(r) for r in returns])
    tickers = [f"T{i}" for i in range(n)]
    return SampleSet(tickers, np.arange(n), windows, labels, returns, weights,
                     rng.integers(0, 12, size=n))


class TestArchConfig:
    def test_conv_must_leave_time(self):
        with pytest.raises(ConfigError):
            ArchConfig(m=4, n=4, conv=((3, 8), (3, 8)), dense=(4,))

    def test_kernel_at_least_one(self):
        with pytest.raises(ConfigError):
            ArchConfig(m=10, n=4, conv=((0, 8),), dense=(4,))

    def test_default_arch_is_valid(self):
        arch = ArchConfig()
        assert arch.loss_kind.classification


class TestEmbeddingAdd:
    def test_zero_embedding_is_identity(self, rng):
        x = rng.normal(size=(2, 5, 4))
        out = embedding_add(Tensor(x), Tensor(np.zeros((12, 4))), np.array([3, 7]))
        np.testing.assert_array_equal(out.data, x)

    def test_zero_window_broadcasts_row(self, rng):
        table = rng.normal(size=(12, 4))
        out = embedding_add(Tensor(np.zeros((1, 5, 4))), Tensor(table), np.array([9]))
        for t in range(5):
            np.testing.assert_array_equal(out.data[0, t], table[9])

    def test_sector_difference_oracle(self, rng):
        # same window, different sectors: outputs differ row-wise by the
        # difference of the two embedding rows
        x = rng.normal(size=(5, 4))
        table = rng.normal(size=(12, 4))
        both = embedding_add(Tensor(np.stack([x, x])), Tensor(table), np.array([2, 8]))
        delta = both.data[0] - both.data[1]
        expected = table[2] - table[8]
        for t in range(5):
            np.testing.assert_allclose(delta[t], expected, rtol=1e-15)


class TestBuildModel:
    def test_embedding_contributes_12n_parameters(self):
        arch = ArchConfig(m=20, n=28, conv=((3, 4),), dense=(4,))
        state = build_model(arch, seed=0)
        assert state.params["embedding"].data.shape == (12, 28)
        assert state.params["embedding"].data.size == 336

    def test_conv_time_dims(self):
        arch = ArchConfig(m=20, n=28, conv=((3, 4), (3, 4), (3, 4)), dense=(4,))
        state = build_model(arch, seed=0)
        out = forward(state, np.zeros((2, 20, 28)), np.zeros(2, dtype=int), train=False)
        # time dims 18, 16, 14 entering the pool; output still (batch, 5)
        assert out.data.shape == (2, 5)

    def test_param_count_reported_and_stable(self):
        a = build_model(SMALL_ARCH, seed=1)
        b = build_model(SMALL_ARCH, seed=1)
        assert a.param_count == b.param_count > 0
        for k in a.params:
            np.testing.assert_array_equal(a.params[k].data, b.params[k].data)

    def test_default_arch_param_count(self):
        state = build_model(ArchConfig(), seed=0)
        # 336 embedding + conv/dense stacks; lands in the tens of thousands
        assert 10_000 < state.param_count < 100_000

    def test_two_seeds_differ_same_shapes(self):
        a = build_model(SMALL_ARCH, seed=1)
        b = build_model(SMALL_ARCH, seed=2)
        assert any(
            not np.array_equal(a.params[k].data, b.params[k].data) for k in a.params
        )
        for k in a.params:
            assert a.params[k].data.shape == b.params[k].data.shape

    def test_mse_arch_outputs_scalar(self):
        arch = ArchConfig(m=10, n=6, conv=((3, 8),), dense=(8,), loss="mse")
        state = build_model(arch, seed=0)
        out = forward(state, np.zeros((4, 10, 6)), np.zeros(4, dtype=int), train=False)
        assert out.data.shape == (4, 1)


class TestPredict:
    def test_distribution_sums_to_one(self, rng):
        state = build_model(SMALL_ARCH, seed=5)
        p = predict(state, rng.normal(size=(10, 6)), sector_id=3)
        assert p.shape == (5,)
        assert abs(p.sum() - 1.0) < 1e-12
        assert (p > 0).all()

    def test_repeated_calls_identical(self, rng):
        state = build_model(SMALL_ARCH, seed=5)
        x = rng.normal(size=(10, 6))
        a = predict(state, x, 3)
        b = predict(state, x, 3)
        np.testing.assert_array_equal(a, b)

    def test_all_zero_weights_constant_function(self, rng):
        state = build_model(SMALL_ARCH, seed=5)
        for name, p in state.params.items():
            p.data = np.zeros_like(p.data)
        a = predict(state, rng.normal(size=(10, 6)), 0)
        b = predict(state, rng.normal(size=(10, 6)), 7)
        np.testing.assert_allclose(a, b, atol=1e-15)

    def test_batch_matches_single(self, rng):
        state = build_model(SMALL_ARCH, seed=5)
        X = rng.normal(size=(4, 10, 6))
        ids = np.array([0, 1, 2, 3])
        batch = predict_batch(state, X, ids)
        for i in range(4):
            np.testing.assert_allclose(batch[i], predict(state, X[i], ids[i]), atol=1e-12)


class TestScore:
    def test_pure_strong_buy(self):
        assert score(np.array([0, 0, 0, 0, 1.0])) == 2.0

    def test_uniform_is_zero(self):
        assert score(np.full(5, 0.2)) == pytest.approx(0.0, abs=1e-15)

    def test_hand_dot_product(self):
        assert score(np.array([0.2, 0.1, 0.1, 0.1, 0.5])) == pytest.approx(0.6, rel=1e-15)

    @settings(max_examples=100, deadline=None)
    @given(st.integers(min_value=0, max_value=10_000))
    def test_linearity_over_simplex_mixtures(self, seed):
        rng = np.random.default_rng(seed)
        p = rng.dirichlet(np.ones(5), size=3)
        w = rng.dirichlet(np.ones(3))
        mixed = np.tensordot(w, p, axes=1)
        assert score(mixed) == pytest.approx(sum(w[i] * score(p[i]) for i in range(3)),
                                             rel=1e-10, abs=1e-12)


class TestMoeWeights:
    def test_equal_returns_equal_weights(self):
        w = moe_weights([[0.1], [0.1], [0.1]])
        np.testing.assert_allclose(w, 1 / 3, rtol=1e-15)

    def test_hand_softmax(self):
        w = moe_weights([[np.log(2.0)], [0.0], [0.0]])
        np.testing.assert_allclose(w, [0.5, 0.25, 0.25], rtol=1e-12)

    def test_shift_invariance_of_cumulative_return(self):
        # additive shift in the compounded returns cancels in the softmax
        base = [[0.02, 0.01], [0.0, 0.0], [-0.01, 0.02]]
        w1 = moe_weights(base)
        r = [np.prod(1 + np.array(h)) - 1 for h in base]
        e = np.exp(np.array(r) + 5.0)
        np.testing.assert_allclose(w1, e / e.sum(), rtol=1e-12)

    def test_empty_history_equal_weights(self):
        np.testing.assert_allclose(moe_weights([[], [], []]), 1 / 3)

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.lists(st.floats(min_value=-0.5, max_value=0.5), min_size=1,
                             max_size=6), min_size=2, max_size=4))
    def test_always_on_simplex(self, histories):
        w = moe_weights(histories)
        assert (w >= 0).all()
        assert abs(w.sum() - 1.0) < 1e-12

    def test_window_limits_history(self):
        # only the trailing 6 periods matter
        long_hist = [[0.9] * 10 + [0.0] * 6, [0.0] * 16, [0.0] * 16]
        np.testing.assert_allclose(moe_weights(long_hist, window=6), 1 / 3, rtol=1e-12)


class TestEnsemble:
    def _ensemble(self, seeds=(1, 2, 3), mode="moe"):
        members = [build_model(SMALL_ARCH, seed=s) for s in seeds]
        return EnsembleState(members=members, combine_mode=mode)

    def test_identical_members_idempotent(self, rng):
        ens = self._ensemble(seeds=(7, 7, 7))
        x = rng.normal(size=(10, 6))
        out = ensemble_predict(ens, x, 2)
        np.testing.assert_allclose(out, predict(ens.members[0], x, 2), rtol=1e-12)

    def test_simple_average_midpoint(self):
        ens = self._ensemble(seeds=(1, 2), mode="simple_average")
        # stub members with constant outputs by zeroing weights and setting biases
        for m, hot in zip(ens.members, (0, 4)):
            for name, p in m.params.items():
                p.data = np.zeros_like(p.data)
            m.params["out_b"].data = np.full(5, -40.0)
            m.params["out_b"].data[hot] = 40.0
        out = ensemble_predict(ens, np.zeros((10, 6)), 0)
        np.testing.assert_allclose(out, [0.5, 0, 0, 0, 0.5], atol=1e-12)

    def test_score_of_average_equals_average_of_scores(self, rng):
        ens = self._ensemble()
        ens.record_period_returns([0.05, -0.02, 0.01])
        x = rng.normal(size=(10, 6))
        w = ensemble_weights(ens)
        member_scores = [score(predict(m, x, 1)) for m in ens.members]
        combined = score(ensemble_predict(ens, x, 1))
        assert combined == pytest.approx(float(np.dot(w, member_scores)), rel=1e-10)

    def test_trailing_history_trimmed_to_window(self):
        ens = self._ensemble()
        for i in range(9):
            ens.record_period_returns([0.01 * i, 0.0, 0.0])
        assert all(len(h) == 6 for h in ens.trailing_returns)

    def test_member_count_mismatch(self):
        ens = self._ensemble()
        with pytest.raises(NumericError):
            ens.record_period_returns([0.1, 0.2])


class TestTrainPeriod:
    def test_loss_decreases_on_learnable_signal(self, rng):
        state = build_model(SMALL_ARCH, seed=11)
        train = toy_samples(rng, 256, SMALL_ARCH)
        val = toy_samples(rng, 64, SMALL_ARCH)
        hp = TrainConfig.for_loss("return_weighted_ce", batch_size=64, max_epochs=6)
        hist = train_period(state, train, val, hp)
        assert hist["epochs"] == 6
        assert hist["train_loss"][-1] < hist["train_loss"][0]
        first3 = hist["train_loss"][:3]
        assert first3 == sorted(first3, reverse=True)  # monotone early descent

    def test_retrain_resets_lr(self, rng):
        state = build_model(SMALL_ARCH, seed=11)
        train = toy_samples(rng, 128, SMALL_ARCH)
        val = toy_samples(rng, 64, SMALL_ARCH)
        hp = TrainConfig.for_loss("return_weighted_ce", batch_size=64, max_epochs=2)
        train_period(state, train, val, hp)
        state.optimizer.lr = 0.001  # pretend plateau halvings happened
        hist = train_period(state, train, val, hp)
        assert hist["lr"][0] == hp.initial_lr == 0.01

    def test_zero_epoch_retrain_is_bit_identical(self, rng):
        state = build_model(SMALL_ARCH, seed=11)
        train = toy_samples(rng, 128, SMALL_ARCH)
        val = toy_samples(rng, 64, SMALL_ARCH)
        before = {k: p.data.copy() for k, p in state.params.items()}
        hp = TrainConfig.for_loss("return_weighted_ce", batch_size=64, max_epochs=0)
        hist = train_period(state, train, val, hp)
        assert hist["epochs"] == 0
        for k, p in state.params.items():
            np.testing.assert_array_equal(p.data, before[k])

    def test_two_seeds_different_parameters(self, rng):
        train = toy_samples(rng, 128, SMALL_ARCH)
        val = toy_samples(rng, 64, SMALL_ARCH)
        hp = TrainConfig.for_loss("return_weighted_ce", batch_size=64, max_epochs=2)
        a = build_model(SMALL_ARCH, seed=1)
        b = build_model(SMALL_ARCH, seed=2)
        train_period(a, train, val, hp)
        train_period(b, train, val, hp)
        assert any(not np.array_equal(a.params[k].data, b.params[k].data) for k in a.params)

    def test_determinism_across_runs(self, rng):
        def run():
            r = np.random.default_rng(31)
            state = build_model(SMALL_ARCH, seed=9)
            train = toy_samples(r, 128, SMALL_ARCH)
            val = toy_samples(r, 64, SMALL_ARCH)
            hp = TrainConfig.for_loss("return_weighted_ce", batch_size=64, max_epochs=3)
            train_period(state, train, val, hp)
            return state

        a, b = run(), run()
        for k in a.params:
            np.testing.assert_array_equal(a.params[k].data, b.params[k].data)

    def test_empty_sample_set_rejected(self, rng):
        state = build_model(SMALL_ARCH, seed=11)
        empty = toy_samples(rng, 0, SMALL_ARCH) if False else None
        train = toy_samples(rng, 16, SMALL_ARCH)
        with pytest.raises(NumericError):
            train_period(state, train, SampleSet([], [], np.zeros((0, 10, 6)),
                                                 np.zeros((0, 5)), [], [], []),
                         TrainConfig.for_loss("ce"))

    def test_schedule_profiles(self):
        new = TrainConfig.for_loss("return_weighted_ce")
        assert (new.initial_lr, new.min_lr, new.dropout) == (0.01, 0.001, 0.35)
        m = TrainConfig.for_loss("mse")
        assert (m.initial_lr, m.min_lr, m.dropout) == (0.01, 0.001, 0.40)
        c = TrainConfig.for_loss("ce")
        assert (c.initial_lr, c.min_lr, c.dropout) == (0.005, 0.0005, 0.40)


class TestFullModelGradients:
    @pytest.mark.parametrize("loss", ["return_weighted_ce", "ce", "mse"])
    def test_full_stack_vs_finite_differences(self, loss, rng):
        arch = ArchConfig(m=12, n=5, conv=((3, 6), (3, 6)), dense=(6,), loss=loss)
        state = build_model(arch, seed=4)
        kind = LossKind(loss)
        B = 4
        X = rng.normal(size=(B, 12, 5))
        ids = rng.integers(0, 12, size=B)
        labels = np.eye(5)[rng.integers(0, 5, size=B)]
        targets = rng.normal(0, 0.03, size=B)
        weights = np.minimum(np.abs(targets), 0.5)

        def loss_value():
            drop_rng = np.random.default_rng(99)
            out = forward(state, X, ids, train=True, dropout_rate=arch.dropout,
                          rng=drop_rng, update_bn_stats=False)
            return batch_loss(kind, out, labels, targets, weights)

        value = loss_value()
        for p in state.params.values():
            p.grad = None
        value.backward()
        h = 1e-5
        probe_rng = np.random.default_rng(12)
        worst = 0.0
        for name, p in state.params.items():
            flat = p.data.ravel()
            for i in probe_rng.choice(flat.size, size=min(4, flat.size), replace=False):
                orig = flat[i]
                flat[i] = orig + h
                up = loss_value().item()
                flat[i] = orig - h
                down = loss_value().item()
                flat[i] = orig
                fd = (up - down) / (2 * h)
                an = 0.0 if p.grad is None else float(p.grad.ravel()[i])
                denom = max(abs(fd), abs(an))
                if denom > 1e-7:
                    worst = max(worst, abs(fd - an) / denom)
        assert worst < 1e-4, f"{loss}: worst rel err {worst:.2e}"


class TestCheckpoints:
    def test_model_round_trip_bit_identical(self, rng, tmp_path):
        state = build_model(SMALL_ARCH, seed=21)
        train = toy_samples(rng, 64, SMALL_ARCH)
        val = toy_samples(rng, 32, SMALL_ARCH)
        train_period(state, train, val,
                     TrainConfig.for_loss("return_weighted_ce", batch_size=32, max_epochs=2))
        p1 = tmp_path / "a.ckpt"
        p2 = tmp_path / "b.ckpt"
        save_checkpoint(state, p1)
        loaded = load_checkpoint(p1)
        save_checkpoint(loaded, p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_loaded_model_predicts_identically(self, rng, tmp_path):
        state = build_model(SMALL_ARCH, seed=21)
        path = tmp_path / "m.ckpt"
        save_checkpoint(state, path)
        loaded = load_checkpoint(path)
        x = rng.normal(size=(10, 6))
        np.testing.assert_array_equal(predict(state, x, 4), predict(loaded, x, 4))

    def test_loaded_model_resumes_training_identically(self, rng, tmp_path):
        train = toy_samples(rng, 64, SMALL_ARCH)
        val = toy_samples(rng, 32, SMALL_ARCH)
        hp = TrainConfig.for_loss("return_weighted_ce", batch_size=32, max_epochs=2)
        a = build_model(SMALL_ARCH, seed=3)
        train_period(a, train, val, hp)
        path = tmp_path / "m.ckpt"
        save_checkpoint(a, path)
        b = load_checkpoint(path)
        train_period(a, train, val, hp)
        train_period(b, train, val, hp)
        for k in a.params:
            np.testing.assert_array_equal(a.params[k].data, b.params[k].data)

    def test_ensemble_round_trip(self, tmp_path):
        members = [build_model(SMALL_ARCH, seed=s) for s in (1, 2, 3)]
        ens = EnsembleState(members=members)
        ens.record_period_returns([0.05, -0.01, 0.02])
        p1 = tmp_path / "e1.ens"
        p2 = tmp_path / "e2.ens"
        save_ensemble(ens, p1)
        loaded = load_ensemble(p1)
        save_ensemble(loaded, p2)
        assert p1.read_bytes() == p2.read_bytes()
        assert loaded.trailing_returns == ens.trailing_returns
        assert loaded.combine_mode == ens.combine_mode
        np.testing.assert_allclose(ensemble_weights(loaded), ensemble_weights(ens))
