import numpy as np
import pytest

from ecgfusion.aggregate import power_mean, pool_record, q_sweep
from ecgfusion.errors import DataError


def direct_power_mean(probs, q, eps=1e-6):
    """Direct-domain evaluation of the pooling formula (the oracle)."""
    p = np.clip(np.asarray(probs, dtype=np.float64), eps, 1.0 - eps)
    return float(np.mean(p ** q) ** (1.0 / q))


class TestPowerMean:
    def test_constant_bag(self):
        assert power_mean([0.5, 0.5, 0.5], 3.0) == pytest.approx(0.5, abs=1e-9)

    def test_q1_is_arithmetic_mean(self):
        assert power_mean([0.2, 0.4, 0.6], 1.0) == pytest.approx(0.4, abs=1e-9)

    def test_extreme_pair(self):
        # ((1^3 + 0^3)/2)^(1/3) after clamping
        assert power_mean([1.0, 0.0], 3.0) == pytest.approx(0.5 ** (1.0 / 3.0), abs=1e-4)

    def test_log_domain_matches_direct(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            m = int(rng.integers(1, 50))
            p = rng.uniform(1e-6, 1.0 - 1e-6, size=m)
            q = float(rng.uniform(1.0, 16.0))
            assert power_mean(p, q) == pytest.approx(direct_power_mean(p, q), abs=1e-9)

    def test_bounds(self):
        rng = np.random.default_rng(1)
        for _ in range(100):
            p = rng.uniform(0.0, 1.0, size=int(rng.integers(1, 30)))
            q = float(rng.uniform(1.0, 32.0))
            clipped = np.clip(p, 1e-6, 1.0 - 1e-6)
            pm = power_mean(p, q)
            assert clipped.min() - 1e-12 <= pm <= clipped.max() + 1e-12

    def test_monotone_in_q(self):
        rng = np.random.default_rng(2)
        for _ in range(100):
            p = rng.uniform(0.0, 1.0, size=int(rng.integers(2, 20)))
            qs = np.sort(rng.uniform(1.0, 32.0, size=5))
            vals = [power_mean(p, q) for q in qs]
            assert all(b >= a - 1e-12 for a, b in zip(vals, vals[1:]))

    def test_permutation_invariance(self):
        rng = np.random.default_rng(3)
        p = rng.uniform(0.0, 1.0, size=17)
        # float summation order shifts the result by at most ~1 ulp
        assert power_mean(p, 3.0) == pytest.approx(
            power_mean(rng.permutation(p), 3.0), abs=1e-12
        )

    def test_stability_large_bag_tiny_probs(self):
        p = np.full(10 ** 6, 1e-6)
        v = power_mean(p, 3.0)
        assert np.isfinite(v)
        assert v == pytest.approx(1e-6, rel=1e-6)

    def test_output_clamped(self):
        assert power_mean([1.0], 3.0) <= 1.0 - 1e-6
        assert power_mean([0.0], 3.0) >= 1e-6

    def test_empty_bag(self):
        with pytest.raises(DataError):
            power_mean([], 3.0)

    def test_bad_exponent(self):
        with pytest.raises(DataError):
            power_mean([0.5], 0.5)


class TestPoolRecord:
    def test_single_slice_identity(self):
        pred = pool_record(np.array([[0.3, 0.8]]), 3.0, record_id="r")
        np.testing.assert_allclose(pred.probs, [0.3, 0.8], atol=1e-9)
        assert pred.n_slices == 1

    def test_constant_columns(self):
        mat = np.column_stack([np.full(5, 0.9), np.full(5, 0.1)])
        pred = pool_record(mat, 3.0)
        np.testing.assert_allclose(pred.probs, [0.9, 0.1], atol=1e-9)

    def test_matches_columnwise_scalar_oracle(self):
        rng = np.random.default_rng(4)
        mat = rng.uniform(0.0, 1.0, size=(100, 5))
        pred = pool_record(mat, 3.0)
        for c in range(5):
            assert pred.probs[c] == pytest.approx(power_mean(mat[:, c], 3.0), abs=1e-9)

    def test_empty(self):
        with pytest.raises(DataError):
            pool_record(np.zeros((0, 3)), 3.0)


class TestQSweep:
    def test_constant_bag_flat(self):
        table = q_sweep([0.42, 0.42, 0.42])
        vals = [pred.probs[0] for pred in table.values()]
        np.testing.assert_allclose(vals, vals[0], atol=1e-9)

    def test_ordering_on_two_point_bag(self):
        table = q_sweep([0.1, 0.9], q_list=(1.0, 3.0, 8.0))
        p1, p3, p8 = (table[q].probs[0] for q in (1.0, 3.0, 8.0))
        assert p1 == pytest.approx(0.5, abs=1e-9)
        # direct oracle: ((0.1^3 + 0.9^3)/2)^(1/3)
        assert p3 == pytest.approx(direct_power_mean([0.1, 0.9], 3.0), abs=1e-9)
        assert p3 == pytest.approx(0.7146569, abs=1e-6)
        assert 0.5 < p3 < p8 < 0.9

    def test_large_q_approaches_max(self):
        table = q_sweep([0.1, 0.9], q_list=(64.0,))
        assert abs(table[64.0].probs[0] - 0.9) < 0.02
