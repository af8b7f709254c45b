import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from dsrlab.errors import FormatError
from dsrlab.features import (
    DSRF_MAGIC,
    ContextWindowSpec,
    FeatureKind,
    FeatureMatrix,
    MelFilterbankSpec,
    assemble_context,
    cmvn,
    compensate_delay,
    context_center,
    dct_coefficients,
    delay_frames,
    delta,
    deltas,
    fbank,
    frame_importance,
    mel_filterbank,
    mfcc,
    pearson_lag_correlation,
    read_features,
    synthetic_speech,
    write_features,
)
from dsrlab.signal import AudioSignal, correlate_arrays

FS = 16000.0

finite = st.floats(-1e3, 1e3, allow_nan=False)


def tone(freq, seconds=0.5, amp=0.5):
    t = np.arange(int(seconds * FS)) / FS
    return AudioSignal(amp * np.sin(2 * np.pi * freq * t), FS)


def triangle_oracle(n_filters, fs, n_fft):
    mel = lambda f: 2595.0 * math.log10(1.0 + f / 700.0)
    inv = lambda m: 700.0 * (10.0 ** (m / 2595.0) - 1.0)
    top = mel(fs / 2)
    edges = [inv(top * i / (n_filters + 1)) for i in range(n_filters + 2)]
    out = np.zeros((n_filters, n_fft // 2 + 1))
    for m in range(n_filters):
        lo, c, hi = edges[m], edges[m + 1], edges[m + 2]
        for k in range(n_fft // 2 + 1):
            f = k * fs / n_fft
            if lo <= f <= c:
                out[m, k] = (f - lo) / (c - lo)
            elif c < f <= hi:
                out[m, k] = (hi - f) / (hi - c)
    return out


class TestFeatureMatrix:
    def test_fixed_dims(self):
        with pytest.raises(ValueError):
            FeatureMatrix(np.zeros((3, 12)), kind="MFCC")
        FeatureMatrix(np.zeros((3, 39)), kind=FeatureKind.MFCC_D_DD)

    def test_finite(self):
        with pytest.raises(ValueError):
            FeatureMatrix(np.array([[np.nan]]))


class TestFbank:
    def test_tone_lands_in_nearest_filter(self):
        fb = fbank(tone(1000.0))
        assert fb.dims == 40
        weights = mel_filterbank(MelFilterbankSpec(), FS, 512)
        freqs = np.arange(257) * FS / 512
        centres = freqs[np.argmax(weights, axis=1)]
        nearest = int(np.argmin(np.abs(centres - 1000.0)))
        assert np.all(np.argmax(fb.values, axis=1) == nearest)

    @pytest.mark.parametrize("k", [0.01, 3.0, 250.0])
    def test_scaling_shifts_log_energy(self, k):
        s = synthetic_speech(0.5, seed=1)
        a = fbank(s).values
        b = fbank(s.with_samples(k * s.samples)).values
        np.testing.assert_allclose(b - a, math.log(k * k), atol=1e-8)

    def test_triangles_match_oracle(self):
        w = mel_filterbank(MelFilterbankSpec(n_filters=5), FS, 512)
        np.testing.assert_allclose(w, triangle_oracle(5, FS, 512), atol=1e-9)

    def test_silence_is_floored(self):
        fb = fbank(AudioSignal(np.zeros(8000), FS))
        np.testing.assert_allclose(fb.values, math.log(1e-10))
        assert np.all(np.isfinite(mfcc(AudioSignal(np.zeros(8000), FS)).values))

    @settings(max_examples=25, deadline=None)
    @given(hnp.arrays(np.float64, st.integers(400, 2000), elements=finite))
    def test_never_nan(self, x):
        s = AudioSignal(x, FS)
        assert np.all(np.isfinite(fbank(s).values))
        assert np.all(np.isfinite(mfcc(s).values))

    def test_too_short(self):
        with pytest.raises(ValueError):
            fbank(AudioSignal(np.zeros(100), FS))

    def test_spec_validation(self):
        with pytest.raises(ValueError):
            MelFilterbankSpec(n_filters=1)
        with pytest.raises(ValueError):
            MelFilterbankSpec(f_min=100, f_max=50)
        with pytest.raises(ValueError):
            mel_filterbank(MelFilterbankSpec(f_max=9000), FS, 512)


class TestMfcc:
    def test_constant_logmel_gives_only_c0(self):
        c = dct_coefficients(np.full(40, 2.5))
        assert c[0] == pytest.approx(2.5 * math.sqrt(40))
        np.testing.assert_allclose(c[1:], 0.0, atol=1e-12)

    def test_direct_cosine_sum(self, rng):
        x = rng.standard_normal(40)
        n = 40
        oracle = []
        for k in range(13):
            scale = math.sqrt(1.0 / n) if k == 0 else math.sqrt(2.0 / n)
            oracle.append(scale * sum(x[i] * math.cos(math.pi * k * (2 * i + 1) / (2 * n)) for i in range(n)))
        np.testing.assert_allclose(dct_coefficients(x), oracle, atol=1e-9)

    def test_thirteen_dims(self):
        m = mfcc(synthetic_speech(0.3))
        assert m.dims == 13 and m.kind is FeatureKind.MFCC


class TestDeltas:
    def test_constant_gives_zero(self):
        np.testing.assert_array_equal(delta(np.ones((20, 3))), 0.0)

    def test_ramp(self):
        ramp = np.arange(30, dtype=float)[:, None] * 0.7
        d = delta(ramp)
        np.testing.assert_allclose(d[2:-2], 0.7, atol=1e-12)
        dd = delta(d)
        np.testing.assert_allclose(dd[4:-4], 0.0, atol=1e-12)

    def test_regression_oracle(self, rng):
        c = rng.standard_normal((25, 4))
        t = len(c)
        clamp = lambda i: min(max(i, 0), t - 1)
        oracle = np.array([[sum(n * (c[clamp(k + n), j] - c[clamp(k - n), j]) for n in (1, 2)) / 10.0
                            for j in range(4)] for k in range(t)])
        np.testing.assert_allclose(delta(c), oracle, atol=1e-12)

    def test_dims_and_kind(self):
        m = mfcc(synthetic_speech(0.3))
        assert deltas(m, 1).dims == 26
        full = deltas(m)
        assert full.dims == 39 and full.kind is FeatureKind.MFCC_D_DD
        np.testing.assert_array_equal(full.values[:, :13], m.values)
        with pytest.raises(ValueError):
            deltas(m, 3)


class TestCmvn:
    @settings(max_examples=50, deadline=None)
    @given(hnp.arrays(np.float64, st.tuples(st.integers(2, 60), st.integers(1, 8)), elements=finite))
    def test_moments_and_idempotence(self, v):
        out = cmvn(FeatureMatrix(v)).values
        assert np.all(np.abs(out.mean(axis=0)) <= 1e-10)
        var = out.var(axis=0)
        live = v.std(axis=0) > 1e-9 * (1 + np.abs(v).max())
        np.testing.assert_allclose(var[live], 1.0, atol=1e-9)
        twice = cmvn(cmvn(FeatureMatrix(v))).values
        np.testing.assert_allclose(twice, out, atol=1e-9)

    def test_constant_dim_zeroed(self):
        v = np.column_stack([np.full(10, 3.0), np.arange(10.0)])
        out = cmvn(FeatureMatrix(v)).values
        np.testing.assert_array_equal(out[:, 0], 0.0)


class TestContext:
    def test_balance_factor(self):
        assert round(100 * ContextWindowSpec(11, 7).rho) == 61
        assert ContextWindowSpec().rho == 0.5

    def test_identity_window(self, rng):
        v = rng.standard_normal((12, 5))
        np.testing.assert_array_equal(assemble_context(v, ContextWindowSpec(0, 0)), v)

    def test_symmetric_baseline_width(self, rng):
        v = rng.standard_normal((30, 13))
        spec = ContextWindowSpec(9, 9)
        assert spec.width == 19
        assert assemble_context(v, spec).shape == (30, 19 * 13)

    def test_edges_replicated(self):
        v = np.arange(5, dtype=float)[:, None]
        out = assemble_context(v, ContextWindowSpec(2, 1))
        np.testing.assert_array_equal(out[0], [0, 0, 0, 1])
        np.testing.assert_array_equal(out[4], [2, 3, 4, 4])

    @settings(max_examples=60, deadline=None)
    @given(st.integers(1, 40), st.integers(1, 6), st.integers(0, 12), st.integers(0, 12), st.integers(0, 2**31 - 1))
    def test_center_block_recovers_input(self, t, d, n_past, n_future, seed):
        v = np.random.default_rng(seed).standard_normal((t, d))
        spec = ContextWindowSpec(n_past, n_future)
        stacked = assemble_context(v, spec)
        assert stacked.shape == (t, spec.width * d)
        np.testing.assert_array_equal(context_center(stacked, spec, d), v)

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            assemble_context(np.zeros((0, 3)), ContextWindowSpec(1, 1))
        with pytest.raises(ValueError):
            ContextWindowSpec(-1, 0)


class TestPearson:
    def test_self_correlation(self, rng):
        x = rng.standard_normal((200, 4))
        assert pearson_lag_correlation(x, x, 5, 5).at(0) == pytest.approx(1.0)

    def test_shifted_copy(self, rng):
        x = rng.standard_normal((300, 6))
        y = np.vstack([rng.standard_normal((3, 6)), x[:-3]])
        assert pearson_lag_correlation(x, y, 8, 8).best_lag == 3

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2**31 - 1), hnp.arrays(np.float64, 3, elements=st.floats(0.01, 100)),
           hnp.arrays(np.float64, 3, elements=st.floats(-100, 100)))
    def test_affine_invariance(self, seed, scale, shift):
        r = np.random.default_rng(seed)
        x = r.standard_normal((120, 3))
        y = 0.5 * x + r.standard_normal((120, 3))
        base = pearson_lag_correlation(x, y, 4, 4).r
        np.testing.assert_allclose(pearson_lag_correlation(x * scale + shift, y, 4, 4).r, base, atol=1e-9)
        np.testing.assert_allclose(pearson_lag_correlation(x, y * scale + shift, 4, 4).r, base, atol=1e-9)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_bounded(self, seed):
        r = np.random.default_rng(seed)
        lc = pearson_lag_correlation(r.standard_normal((50, 2)), r.standard_normal((50, 2)), 6, 6)
        assert np.all(np.abs(lc.r) <= 1 + 1e-9)

    def test_zero_variance(self, rng):
        with pytest.raises(ValueError):
            pearson_lag_correlation(np.ones((20, 2)), rng.standard_normal((20, 2)), 1, 1)

    def test_dim_mismatch_and_overlap(self, rng):
        with pytest.raises(ValueError):
            pearson_lag_correlation(rng.standard_normal((20, 2)), rng.standard_normal((20, 3)), 1, 1)
        with pytest.raises(ValueError):
            pearson_lag_correlation(rng.standard_normal((5, 2)), rng.standard_normal((5, 2)), 4, 4)

    def test_signal_level_asymmetry(self):
        r = np.random.default_rng(11)
        n = np.arange(8000)
        # causal decay reaching -60 dB after 0.5 s
        h = np.exp(-n * 3 * math.log(10) / 8000) * r.standard_normal(8000)
        x = r.standard_normal(48000)
        y = np.convolve(x, h)
        rxy = correlate_arrays(x, y, 4000)
        assert np.sum(rxy[4001:] ** 2) > np.sum(rxy[:4000] ** 2)

    def test_delay_helpers(self):
        assert delay_frames(480, FS) == 3
        m = FeatureMatrix(np.arange(10.0)[:, None])
        np.testing.assert_array_equal(compensate_delay(m, 3).values[:, 0], np.arange(3.0, 10.0))
        with pytest.raises(ValueError):
            compensate_delay(m, 10)
        with pytest.raises(ValueError):
            compensate_delay(m, -1)


class TestImportance:
    def test_center_only(self, rng):
        w = np.zeros((8, 5 * 3))
        w[:, 6:9] = rng.standard_normal((8, 3))
        imp = frame_importance(w, 2, 2, 3)
        np.testing.assert_array_equal(imp.lags, [-2, -1, 0, 1, 2])
        np.testing.assert_array_equal(imp.values, [0, 0, 1, 0, 0])

    def test_uniform(self):
        np.testing.assert_array_equal(frame_importance(np.full((4, 21), 0.3), 3, 3, 3).values, 1.0)

    def test_triple_loop_oracle(self, rng):
        n_past, n_future, d, n_neu = 3, 2, 4, 7
        w = rng.standard_normal((n_neu, (n_past + n_future + 1) * d))
        raw = []
        for p in range(n_past + n_future + 1):
            acc = 0.0
            for i in range(d):
                for j in range(n_neu):
                    acc += w[j, p * d + i] ** 2
            raw.append(acc)
        raw = np.array(raw)
        np.testing.assert_allclose(frame_importance(w, n_past, n_future, d).values, raw / raw.max(), atol=1e-12)

    def test_errors(self):
        with pytest.raises(ValueError):
            frame_importance(np.zeros((3, 9)), 1, 1, 3)
        with pytest.raises(ValueError):
            frame_importance(np.ones((3, 8)), 1, 1, 3)


class TestDsrf:
    def test_round_trip_bit_identical(self, tmp_path):
        m = deltas(mfcc(synthetic_speech(0.4)))
        write_features(tmp_path / "a.dsrf", m)
        back = read_features(tmp_path / "a.dsrf")
        write_features(tmp_path / "b.dsrf", back)
        assert (tmp_path / "a.dsrf").read_bytes() == (tmp_path / "b.dsrf").read_bytes()
        assert back.kind is FeatureKind.MFCC_D_DD and back.frame_shift_ms == 10.0
        np.testing.assert_array_equal(back.values, m.values.astype(np.float32))

    def test_layout(self, tmp_path):
        write_features(tmp_path / "x.dsrf", FeatureMatrix(np.array([[1.0, 2.0], [3.0, 4.0]]), 10.0))
        data = (tmp_path / "x.dsrf").read_bytes()
        assert data[:4] == DSRF_MAGIC
        assert np.frombuffer(data[4:16], "<u4").tolist() == [1, 2, 2]
        assert np.frombuffer(data[16:20], "<f4")[0] == 10.0
        assert np.frombuffer(data[20:], "<f4").tolist() == [1.0, 2.0, 3.0, 4.0]

    @pytest.mark.parametrize("mutate", [
        lambda b: b[:10],
        lambda b: b"XXXX" + b[4:],
        lambda b: b[:4] + (9).to_bytes(4, "little") + b[8:],
        lambda b: b[:-4],
    ])
    def test_corrupt(self, tmp_path, mutate):
        write_features(tmp_path / "x.dsrf", FeatureMatrix(np.ones((3, 2))))
        (tmp_path / "x.dsrf").write_bytes(mutate((tmp_path / "x.dsrf").read_bytes()))
        with pytest.raises(FormatError):
            read_features(tmp_path / "x.dsrf")
