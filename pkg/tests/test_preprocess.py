import numpy as np
import pytest

from ecgfusion.errors import DataError, NumericError
from ecgfusion.preprocess import bandpass_filter, slice_record, znorm_instance

FS = 500.0


def fft_amplitude(x, freq_hz, fs=FS):
    """Single-bin FFT amplitude on the steady-state middle of the signal."""
    n = len(x)
    seg = x[n // 4 : n // 4 + n // 2]
    m = len(seg)
    k = int(round(freq_hz * m / fs))
    assert abs(freq_hz * m / fs - k) < 1e-9, "bin must align exactly"
    return 2.0 * np.abs(np.fft.rfft(seg)[k]) / m


class TestBandpass:
    def test_dc_rejection(self):
        x = np.ones((12, 5000))
        y = bandpass_filter(x, fs=FS)
        # the 0.5 Hz edge leaves a ~2 s transient at each end of the
        # forward-backward pass; steady state is the region between
        steady = y[:, 2000:4500]
        assert np.max(np.abs(steady)) < 1e-3

    def test_passband_10hz(self):
        t = np.arange(5000) / FS
        x = np.sin(2 * np.pi * 10.0 * t)
        y = bandpass_filter(x, fs=FS)
        amp = fft_amplitude(y, 10.0)
        assert 0.7 <= amp <= 1.05

    def test_stopband_100hz(self):
        t = np.arange(5000) / FS
        x = np.sin(2 * np.pi * 100.0 * t)
        y = bandpass_filter(x, fs=FS)
        assert fft_amplitude(y, 100.0) <= 0.1

    def test_linearity(self):
        rng = np.random.default_rng(0)
        x = rng.standard_normal((12, 2000))
        y = rng.standard_normal((12, 2000))
        a, b = 2.5, -1.25
        lhs = bandpass_filter(a * x + b * y, fs=FS)
        rhs = a * bandpass_filter(x, fs=FS) + b * bandpass_filter(y, fs=FS)
        np.testing.assert_allclose(lhs, rhs, atol=1e-9)

    def test_shape_preserved(self):
        x = np.random.default_rng(1).standard_normal((12, 777))
        assert bandpass_filter(x, fs=FS).shape == (12, 777)

    def test_bad_cutoffs(self):
        x = np.zeros((12, 1000))
        with pytest.raises(NumericError):
            bandpass_filter(x, low_hz=0.0, fs=FS)
        with pytest.raises(NumericError):
            bandpass_filter(x, low_hz=40.0, high_hz=0.5, fs=FS)
        with pytest.raises(NumericError):
            bandpass_filter(x, high_hz=300.0, fs=FS)

    def test_too_short(self):
        with pytest.raises(NumericError):
            bandpass_filter(np.zeros((12, 10)), order=4, fs=FS)


class TestZnorm:
    def test_constant_row_maps_to_zero(self):
        x = np.full((1, 100), 5.0)
        assert np.all(znorm_instance(x) == 0.0)

    def test_alternating_row_unchanged(self):
        x = np.tile([-1.0, 1.0], 50)[None, :]
        np.testing.assert_allclose(znorm_instance(x), x, atol=1e-6)

    def test_small_row_arithmetic(self):
        # (x - 1.5) / sqrt(1.25), population std
        expected = (np.array([0.0, 1.0, 2.0, 3.0]) - 1.5) / np.sqrt(1.25)
        got = znorm_instance(np.array([[0.0, 1.0, 2.0, 3.0]]))[0]
        np.testing.assert_allclose(got, expected, atol=1e-9)
        np.testing.assert_allclose(
            got, [-1.3416407865, -0.4472135955, 0.4472135955, 1.3416407865], atol=1e-6
        )

    def test_output_moments(self):
        rng = np.random.default_rng(2)
        x = rng.standard_normal((12, 500)) * 7.0 + 3.0
        y = znorm_instance(x)
        np.testing.assert_allclose(y.mean(axis=1), 0.0, atol=1e-6)
        np.testing.assert_allclose(y.std(axis=1), 1.0, atol=1e-6)

    def test_idempotent(self):
        rng = np.random.default_rng(3)
        x = rng.standard_normal((12, 300))
        once = znorm_instance(x)
        twice = znorm_instance(once)
        np.testing.assert_allclose(once, twice, atol=1e-6)

    def test_affine_invariance(self):
        rng = np.random.default_rng(4)
        x = rng.standard_normal((12, 300))
        a = rng.uniform(0.5, 3.0, size=(12, 1))
        b = rng.uniform(-5.0, 5.0, size=(12, 1))
        np.testing.assert_allclose(znorm_instance(a * x + b), znorm_instance(x), atol=1e-6)


class TestSliceRecord:
    def test_offsets_enumeration(self):
        bag = slice_record(np.zeros((12, 5000)), 2500, 1250)
        assert bag.offsets == [0, 1250, 2500]
        assert len(bag) == 3

    def test_exact_window(self):
        bag = slice_record(np.zeros((12, 2500)), 2500, 1250)
        assert bag.offsets == [0]

    def test_short_record_zero_padded(self):
        x = np.ones((12, 2000))
        bag = slice_record(x, 2500, 1250)
        assert len(bag) == 1
        assert bag.slices[0].shape == (12, 2500)
        assert np.all(bag.slices[0][:, :2000] == 1.0)
        assert np.all(bag.slices[0][:, 2000:] == 0.0)

    def test_count_formula(self):
        rng = np.random.default_rng(5)
        for _ in range(50):
            n = int(rng.integers(1, 4000))
            window = int(rng.integers(1, 1000))
            stride = int(rng.integers(1, window + 1))
            bag = slice_record(np.zeros((12, n)), window, stride)
            assert len(bag) == (max(n, window) - window) // stride + 1

    def test_slices_are_views_of_content(self):
        rng = np.random.default_rng(6)
        x = rng.standard_normal((12, 4000))
        bag = slice_record(x, 2500, 1250)
        for s, off in zip(bag.slices, bag.offsets):
            np.testing.assert_array_equal(s, x[:, off : off + 2500])

    def test_bad_params(self):
        with pytest.raises(DataError):
            slice_record(np.zeros((12, 100)), 0, 1)
        with pytest.raises(DataError):
            slice_record(np.zeros((12, 100)), 10, 20)
