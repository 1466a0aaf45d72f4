import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import brute_force_threshold, explicit_mahalanobis, hand_covariance
from replay_sentinel import detector as dt
from replay_sentinel import tcn_ae as ta
from replay_sentinel.errors import NumericalError
from replay_sentinel.replay_attack import LabeledDataset
from replay_sentinel.series import MultivariateSeries


class TestScaler:
    def test_hand_values(self):
        p = dt.fit_scaler(np.array([[1.0], [2.0], [3.0]]))
        z = dt.apply_scaler(np.array([[1.0], [2.0], [3.0]]), p)
        np.testing.assert_allclose(z.ravel(), [-1.224745, 0.0, 1.224745], atol=1e-6)
        assert p.std[0] == pytest.approx(math.sqrt(2 / 3))

    def test_constant_channel(self):
        x = np.column_stack([np.full(5, 7.0), np.arange(5.0)])
        z = dt.apply_scaler(x, dt.fit_scaler(x))
        assert not np.any(z[:, 0])

    def test_round_trip(self):
        x = np.random.default_rng(0).normal(3, 5, size=(50, 4))
        p = dt.fit_scaler(x)
        np.testing.assert_allclose(dt.invert_scaler(dt.apply_scaler(x, p), p), x, rtol=0, atol=1e-12)

    def test_series_channel_check(self):
        s = MultivariateSeries(np.ones((3, 2)), ["a", "b"])
        p = dt.fit_scaler(s)
        assert p.channel_names == ["a", "b"]
        with pytest.raises(ValueError):
            dt.apply_scaler(MultivariateSeries(np.ones((3, 2)), ["b", "a"]), p)
        assert dt.ScalerParams.from_dict(json.loads(json.dumps(p.to_dict()))).channel_names == ["a", "b"]

    def test_empty(self):
        with pytest.raises(ValueError):
            dt.fit_scaler(np.zeros((0, 3)))


class TestErrorsAndWindows:
    def test_error(self):
        x = np.arange(6.0).reshape(3, 2)
        assert not np.any(dt.reconstruction_error(x, x))
        np.testing.assert_array_equal(dt.reconstruction_error(x, x + 1), -np.ones((3, 2)))
        with pytest.raises(ValueError):
            dt.reconstruction_error(x, x[:2])

    def test_windows_1d(self):
        w = dt.sliding_error_windows(np.arange(1.0, 6.0), 3)
        np.testing.assert_array_equal(w, [[1, 2, 3], [2, 3, 4], [3, 4, 5]])

    def test_windows_time_major(self):
        e = np.arange(8.0).reshape(4, 2)
        np.testing.assert_array_equal(dt.sliding_error_windows(e, 2)[1], [2, 3, 4, 5])

    @settings(max_examples=40, deadline=None)
    @given(T=st.integers(1, 40), d=st.integers(1, 4), data=st.data())
    def test_row_count(self, T, d, data):
        l = data.draw(st.integers(1, T))
        e = np.random.default_rng(T * d).normal(size=(T, d))
        w = dt.sliding_error_windows(e, l)
        assert w.shape == (T - l + 1, l * d)
        np.testing.assert_array_equal(w[-1], e[T - l:].ravel())

    def test_bad_window(self):
        with pytest.raises(ValueError):
            dt.sliding_error_windows(np.ones((5, 1)), 6)
        with pytest.raises(ValueError):
            dt.sliding_error_windows(np.ones((5, 1)), 0)


class TestStats:
    def test_identical_windows(self):
        w = np.tile([1.0, -2.0, 3.0], (10, 1))
        st_ = dt.estimate_stats(w, ridge=0.5)
        np.testing.assert_array_equal(st_.mu, [1.0, -2.0, 3.0])
        np.testing.assert_allclose(st_.cov, 0.5 * np.eye(3), atol=1e-15)

    def test_hand_fixture(self):
        rows = [(0, 0), (2, 0), (0, 2), (2, 2)]
        st_ = dt.estimate_stats(np.array(rows, float), ridge=0.0)
        mu, cov = hand_covariance(rows)
        np.testing.assert_allclose(st_.mu, [1.0, 1.0])
        np.testing.assert_allclose(st_.cov, [[4 / 3, 0], [0, 4 / 3]], atol=1e-15)
        np.testing.assert_allclose(st_.cov, cov, atol=1e-15)

    def test_default_ridge_and_symmetry(self):
        w = np.random.default_rng(0).normal(size=(300, 12)) @ np.random.default_rng(1).normal(size=(12, 12))
        st_ = dt.estimate_stats(w)
        raw = np.cov(w, rowvar=False)
        assert st_.ridge == pytest.approx(1e-3 * np.trace(raw) / 12)
        assert np.max(np.abs(st_.cov - st_.cov.T)) <= 1e-15
        np.testing.assert_allclose(st_.chol @ st_.chol.T, st_.cov, rtol=1e-12, atol=1e-12)

    def test_chunked_matches_numpy(self):
        w = np.random.default_rng(2).normal(size=(5000, 6))
        st_ = dt.estimate_stats(w, ridge=0.0)
        np.testing.assert_allclose(st_.cov, np.cov(w, rowvar=False), rtol=1e-10, atol=1e-13)

    def test_singular_without_ridge(self):
        w = np.tile([1.0, 2.0], (5, 1))
        with pytest.raises(NumericalError, match="ridge"):
            dt.estimate_stats(w, ridge=0.0)

    def test_too_few(self):
        with pytest.raises(ValueError):
            dt.estimate_stats(np.ones((1, 3)))


class TestMahalanobis:
    def _stats(self, cov, mu=None):
        cov = np.asarray(cov, float)
        mu = np.zeros(cov.shape[0]) if mu is None else mu
        return dt.ErrorWindowStats(mu, cov, 0.0, np.linalg.cholesky(cov))

    def test_hand_values(self):
        assert dt.mahalanobis_scores(np.zeros((1, 3)), self._stats(np.eye(3)))[0] == 0.0
        assert dt.mahalanobis_scores(np.array([[0, 1.0, 0]]), self._stats(np.eye(3)))[0] == pytest.approx(1.0)
        assert dt.mahalanobis_scores(np.array([[2.0, 1.0]]), self._stats(np.diag([4.0, 1.0])))[0] \
            == pytest.approx(2.0)

    def test_diag_mode(self):
        w = np.random.default_rng(0).normal(size=(400, 5)) * [1, 2, 3, 4, 5]
        st_ = dt.estimate_stats(w, diag_cov=True, ridge=0.0)
        assert st_.diag and st_.chol is None
        ref = np.sum((w - st_.mu) ** 2 / np.diag(st_.cov), axis=1)
        np.testing.assert_allclose(dt.mahalanobis_scores(w, st_), ref, rtol=1e-12)

    def test_width_mismatch(self):
        with pytest.raises(ValueError):
            dt.mahalanobis_scores(np.ones((2, 4)), self._stats(np.eye(3)))

    def test_chunking_boundary(self):
        rng = np.random.default_rng(5)
        w = rng.normal(size=(dt.CHUNK * 2 + 3, 4))
        st_ = dt.estimate_stats(w)
        ref = explicit_mahalanobis(w[-5:], st_.mu, st_.cov)
        np.testing.assert_allclose(dt.mahalanobis_scores(w, st_)[-5:], ref, rtol=1e-10)


class TestThreshold:
    def test_hand_example(self):
        assert dt.optimize_threshold([1, 1, 9], [0, 0, 1]) == (5.0, 1.0)

    def test_candidates(self):
        np.testing.assert_array_equal(dt.threshold_candidates([3.0, 1.0, 1.0]), [-np.inf, 2.0, np.inf])

    def test_separable(self):
        s = np.random.default_rng(0).normal(size=101)
        y = s >= np.median(s)
        _, f1 = dt.optimize_threshold(s, y)
        assert f1 == 1.0

    def test_ties_prefer_largest_threshold(self):
        # flagging everything and cutting at 3.5 both give F1 = 2/3; keep 3.5
        M, f1 = dt.optimize_threshold([1.0, 2.0, 3.0, 4.0], [1, 0, 0, 1])
        assert (M, f1) == (3.5, pytest.approx(2 / 3))
        assert (M, f1) == brute_force_threshold([1.0, 2.0, 3.0, 4.0], [1, 0, 0, 1])

    @settings(max_examples=60, deadline=None)
    @given(st.lists(st.tuples(st.integers(0, 20), st.booleans()), min_size=2, max_size=60))
    def test_matches_brute_force_property(self, pairs):
        s = [float(a) for a, _ in pairs]
        y = [b for _, b in pairs]
        if all(y) or not any(y):
            return
        assert dt.optimize_threshold(s, y) == brute_force_threshold(s, y)

    def test_single_class(self):
        with pytest.raises(ValueError, match="single class"):
            dt.optimize_threshold([1.0, 2.0], [0, 0])

    def test_non_finite(self):
        with pytest.raises(NumericalError):
            dt.optimize_threshold([1.0, np.nan], [0, 1])


class TestFlagsAndMetrics:
    def test_flags(self):
        np.testing.assert_array_equal(dt.flag_anomalies(np.array([0.0, 5.0, 1.0]), 2.0, 1), [0, 1, 0])
        f = dt.flag_anomalies(np.array([0.0, 5.0, 1.0]), 2.0, 3)
        np.testing.assert_array_equal(f, [0, 0, 0, 1, 0])
        assert not dt.flag_anomalies(np.arange(4.0), np.inf, 2).any()
        np.testing.assert_array_equal(dt.flag_anomalies(np.arange(4.0), 0.0, 2), [0, 1, 1, 1, 1])

    def test_center_alignment(self):
        f = dt.flag_anomalies(np.array([0.0, 5.0, 1.0]), 2.0, 3, alignment="center")
        np.testing.assert_array_equal(f, [0, 0, 1, 0, 0])
        with pytest.raises(ValueError):
            dt.window_positions(5, 3, "left")

    def test_timeline(self):
        t = dt.scores_to_timeline(np.array([1.0, 2.0]), 4, 3)
        assert np.isnan(t[:2]).all() and list(t[2:]) == [1.0, 2.0]

    def test_fixture_counts(self):
        m = dt.metrics_from_counts(2, 1, 6, 1)
        assert m.accuracy == 0.8
        assert m.precision == pytest.approx(2 / 3) and m.recall == pytest.approx(2 / 3)
        assert m.f1 == pytest.approx(2 / 3) and m.degenerate == []

    def test_perfect(self):
        y = np.array([0, 1, 1, 0])
        m = dt.metrics(y, y)
        assert (m.accuracy, m.f1) == (1.0, 1.0)

    def test_degenerate(self):
        m = dt.metrics(np.zeros(5), np.zeros(5))
        assert m.accuracy == 1.0 and m.precision == 0.0 and m.recall == 0.0
        assert set(m.degenerate) == {"precision", "recall", "f1"}

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            dt.metrics(np.zeros(3), np.zeros(4))

    @settings(max_examples=60, deadline=None)
    @given(st.lists(st.tuples(st.booleans(), st.booleans()), min_size=1, max_size=50))
    def test_counts_consistent(self, pairs):
        a = np.array([p for p, _ in pairs])
        y = np.array([q for _, q in pairs])
        m = dt.metrics(a, y)
        assert m.TP + m.FP + m.TN + m.FN == len(pairs)
        assert 0.0 <= m.f1 <= 1.0

    def test_rle_round_trip(self):
        f = np.array([0, 0, 1, 1, 1, 0, 1])
        assert dt.run_length_encode(f) == [[0, 2], [1, 3], [0, 1], [1, 1]]
        np.testing.assert_array_equal(dt.run_length_decode(dt.run_length_encode(f)), f)
        assert dt.run_length_encode([]) == []


def _toy_dataset(T=600, attack=((40, 70), (300, 340)), seed=0):
    rng = np.random.default_rng(seed)
    t = np.arange(T)
    x = np.column_stack([np.sin(t / 15.0), np.cos(t / 23.0)]) + 0.01 * rng.normal(size=(T, 2))
    y = np.zeros(T, int)
    for a, b in attack:
        x[a:b, 0] += 3.0
        y[a:b] = 1
    return x, y


class TestDetect:
    def _setup(self):
        x, y = _toy_dataset()
        benign, _ = _toy_dataset(attack=(), seed=1)
        cfg = ta.TcnAeConfig(d=2, n_filters=4, dilations=(1, 2), latent_channels=2, sample_factor=2,
                             T_train=64, n_epochs=1, batch_size=2)
        m = ta.build_model(cfg)
        sc = dt.fit_scaler(benign)
        names = ["a", "b"]
        train = MultivariateSeries(benign, names)
        stats = dt.fit_error_stats(m, sc, train, 16)
        return m, sc, stats, LabeledDataset(MultivariateSeries(x, names), y)

    def test_report_and_determinism(self):
        m, sc, stats, ds = self._setup()
        r1 = dt.detect(m, sc, stats, ds, l=16, prefix_fraction=0.2)
        r2 = dt.detect(m, sc, stats, ds, l=16, prefix_fraction=0.2)
        assert r1.to_json() == r2.to_json()
        assert r1.prefix_len == 120 and r1.flags.shape == (600,)
        assert not r1.flags[:15].any()
        doc = json.loads(r1.to_json())
        assert doc["metrics"]["TP"] + doc["metrics"]["FN"] == int(ds.labels[120:].sum())
        np.testing.assert_array_equal(dt.run_length_decode(doc["flags_rle"]), r1.flags)
        # the offsets in this toy set are large, so even an untrained model finds the second attack
        assert r1.metrics.recall > 0.5

    def test_single_class_prefix_names_stage(self):
        m, sc, stats, ds = self._setup()
        with pytest.raises(dt.StageError) as exc:
            dt.detect(m, sc, stats, ds, l=16, prefix_fraction=0.05)
        assert exc.value.stage == "threshold"

    def test_infinite_threshold_serialised(self):
        m, sc, stats, ds = self._setup()
        r = dt.detect(m, sc, stats, ds, l=16, prefix_fraction=0.2)
        r.threshold = math.inf
        assert json.loads(r.to_json(include_scores=False))["threshold"] == "inf"


class TestScoreProperties:
    @settings(max_examples=25, deadline=None)
    @given(seed=st.integers(0, 10_000), d=st.integers(1, 3), l=st.integers(1, 4))
    def test_channel_permutation_invariance(self, seed, d, l):
        rng = np.random.default_rng(seed)
        e = rng.normal(size=(60, d)) @ rng.normal(size=(d, d))
        perm = rng.permutation(d)
        a = dt.sliding_error_windows(e, l)
        b = dt.sliding_error_windows(e[:, perm], l)
        sa = dt.mahalanobis_scores(a, dt.estimate_stats(a))
        sb = dt.mahalanobis_scores(b, dt.estimate_stats(b))
        np.testing.assert_allclose(sa, sb, rtol=1e-8, atol=1e-10)

    @settings(max_examples=40, deadline=None)
    @given(st.lists(st.floats(0, 100), min_size=1, max_size=40), st.floats(0, 100), st.floats(0, 100))
    def test_raising_threshold_never_adds_positives(self, scores, t1, t2):
        lo, hi = sorted((t1, t2))
        s = np.array(scores)
        y = np.arange(len(s)) % 2
        m_lo = dt.metrics(dt.flag_anomalies(s, lo, 1), y)
        m_hi = dt.metrics(dt.flag_anomalies(s, hi, 1), y)
        assert m_hi.TP <= m_lo.TP and m_hi.FP <= m_lo.FP

    def test_high_energy_window_is_flagged(self):
        # an error burst beyond the benign 99.9th percentile gets at least one flag inside it
        rng = np.random.default_rng(3)
        benign = rng.normal(size=(3000, 2))
        stats = dt.estimate_stats(dt.sliding_error_windows(benign, 8))
        base = dt.mahalanobis_scores(dt.sliding_error_windows(benign, 8), stats)
        test = rng.normal(size=(400, 2))
        test[200:240] += 4.0
        y = np.zeros(400, int)
        y[200:240] = 1
        s = dt.mahalanobis_scores(dt.sliding_error_windows(test, 8), stats)
        flags = dt.flag_anomalies(s, np.percentile(base, 99.9), 8)
        assert flags[200:240].any()
