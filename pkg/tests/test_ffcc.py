import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from illumest import synth
from illumest.chroma import ChromaHistogram, DegeneratePosterior, Feature, HistogramGeometry, rgb_to_uv, uv_to_rgb
from illumest.evaluation import angular_error
from illumest.ffcc import (
    MAGIC,
    FfccModel,
    LabeledSample,
    ModelFormatError,
    ModelNotTrained,
    TrainConfig,
    TrainingDiverged,
    _Batch,
    decode_model,
    encode_model,
    estimate_ffcc,
    load_model,
    loss,
    make_sample,
    objective,
    posterior,
    save_model,
    score,
    train,
    truth_weights,
)
from illumest.imaging import LinearImage

G8 = HistogramGeometry(8, 0.25)


def random_hists(rng, geom=G8, channels=2):
    out = []
    for feat in (Feature.INTENSITY, Feature.GRADIENT)[:channels]:
        m = rng.random((geom.n, geom.n)) ** 4
        out.append(ChromaHistogram(geom, m / m.sum(), feat))
    return tuple(out)


def random_sample(rng, geom=G8):
    truth = rng.uniform(-0.6, 0.6, size=2)
    return LabeledSample(random_hists(rng, geom), truth, "x")


def random_model(rng, geom=G8, scale=0.5, trained=True):
    n = geom.n
    return FfccModel(geom, rng.standard_normal((2, n, n)) * scale, rng.standard_normal((n, n)) * scale, trained)


class TestScore:
    def test_zero_model(self, rng):
        assert np.all(score(FfccModel.zeros(G8), random_hists(rng)) == 0)

    def test_bias_only(self, rng):
        b = rng.standard_normal((8, 8))
        m = FfccModel(G8, np.zeros((2, 8, 8)), b)
        np.testing.assert_array_equal(score(m, random_hists(rng)), b)

    def test_delta_filter_passes_histogram(self, rng):
        f = np.zeros((2, 8, 8))
        f[0, 0, 0] = 1.0
        hists = random_hists(rng)
        s = score(FfccModel(G8, f, np.zeros((8, 8))), hists)
        np.testing.assert_allclose(s, hists[0].mass, atol=1e-14)

    def test_geometry_mismatch(self, rng):
        other = random_hists(rng, HistogramGeometry(8, 0.125))
        with pytest.raises(ValueError):
            score(FfccModel.zeros(G8), other)
        with pytest.raises(ValueError):
            score(FfccModel.zeros(G8), other[:1])

    @settings(max_examples=30, deadline=None)
    @given(st.floats(0, 1), st.integers(0, 2**31))
    def test_linearity(self, alpha, seed):
        r = np.random.default_rng(seed)
        m = FfccModel(G8, r.standard_normal((2, 8, 8)), np.zeros((8, 8)))
        h1, h2 = random_hists(r), random_hists(r)
        mix = tuple(ChromaHistogram(G8, alpha * a.mass + (1 - alpha) * b.mass, a.feature)
                    for a, b in zip(h1, h2))
        lhs = score(m, mix)
        rhs = alpha * score(m, h1) + (1 - alpha) * score(m, h2)
        assert np.max(np.abs(lhs - rhs)) < 1e-9

    @pytest.mark.parametrize("shift", [(1, 0), (3, 5), (-2, 7)])
    def test_translation_equivariance(self, rng, shift):
        m = FfccModel(G8, rng.standard_normal((2, 8, 8)), np.zeros((8, 8)))
        hists = random_hists(rng)
        rolled = tuple(ChromaHistogram(G8, np.roll(h.mass, shift, axis=(0, 1)), h.feature) for h in hists)
        np.testing.assert_allclose(score(m, rolled), np.roll(score(m, hists), shift, axis=(0, 1)), atol=1e-12)


class TestPosterior:
    def test_constant_is_uniform(self):
        np.testing.assert_allclose(posterior(np.full((8, 8), 3.7)), 1 / 64, rtol=1e-14)

    def test_saturation(self):
        s = np.zeros((8, 8))
        s[2, 5] = 1000.0
        assert posterior(s)[2, 5] >= 1 - 1e-9

    def test_high_precision_oracle(self):
        s = np.random.default_rng(99).standard_normal((8, 8)) * 4
        mpmath.mp.dps = 50
        ex = [mpmath.exp(mpmath.mpf(float(x))) for x in s.ravel()]
        total = mpmath.fsum(ex)
        expected = np.array([float(e / total) for e in ex]).reshape(8, 8)
        assert np.max(np.abs(posterior(s) - expected)) < 1e-12

    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 2**31), st.floats(0.01, 500))
    def test_normalized(self, seed, scale):
        s = np.random.default_rng(seed).standard_normal((8, 8)) * scale
        p = posterior(s)
        assert abs(p.sum() - 1) < 1e-12 and np.all(p >= 0)


class TestEstimate:
    def _image(self, rgb, shape=(8, 8)):
        data = np.broadcast_to(np.asarray(rgb, float), (*shape, 3)).copy()
        return LinearImage(data, np.ones(shape, bool))

    def test_bias_delta_decodes_to_bin(self, rng):
        g = HistogramGeometry()
        truth_uv = np.array([0.31, -0.22])
        iu, iv = (int(i) for i in g.bin_index(*truth_uv))
        bias = np.full((64, 64), -50.0)
        bias[iu, iv] = 50.0
        m = FfccModel(g, np.zeros((2, 64, 64)), bias, trained=True)
        est = estimate_ffcc(m, self._image(rng.uniform(0.1, 0.9, 3)))
        got_uv = rgb_to_uv(est)
        assert np.all(np.abs(got_uv - truth_uv) <= g.bin_size / 2 + 1e-12)
        np.testing.assert_allclose(est, uv_to_rgb(g.bin_center(iu, iv)), atol=1e-9)

    def test_gray_input_unbiased_model(self):
        g = HistogramGeometry()
        f = np.zeros((2, 64, 64))
        f[0, 0, 0] = 40.0
        m = FfccModel(g, f, np.zeros((64, 64)), trained=True)
        est = estimate_ffcc(m, self._image((0.4, 0.4, 0.4)))
        assert np.all(np.abs(rgb_to_uv(est)) <= g.bin_size + 1e-12)
        assert angular_error(est, (1, 1, 1)) < 2.0

    def test_untrained(self):
        with pytest.raises(ModelNotTrained):
            estimate_ffcc(FfccModel.zeros(HistogramGeometry()), self._image((0.4, 0.4, 0.4)))

    def test_uniform_posterior_is_degenerate(self):
        m = FfccModel(HistogramGeometry(), np.zeros((2, 64, 64)), np.zeros((64, 64)), trained=True)
        with pytest.raises(DegeneratePosterior):
            estimate_ffcc(m, self._image((0.4, 0.3, 0.2)))

    def test_flat_image_has_zero_gradient_channel(self):
        s = make_sample(self._image((0.4, 0.3, 0.2)), (1, 1, 1), HistogramGeometry())
        assert s.histograms[1].mass.sum() == 0
        assert s.histograms[0].mass.sum() == pytest.approx(1)


def direct_loss(model, sample):
    """Loss from explicit softmax and bilinear weights, no log-sum-exp tricks."""
    s = score(model, sample.histograms)
    p = np.exp(s) / np.exp(s).sum()
    fu, fv = model.geometry.fractional_index(*sample.truth_uv)
    iu, iv = math.floor(fu), math.floor(fv)
    au, av = fu - iu, fv - iv
    n = model.geometry.n
    mass = ((1 - au) * (1 - av) * p[iu % n, iv % n] + au * (1 - av) * p[(iu + 1) % n, iv % n]
            + (1 - au) * av * p[iu % n, (iv + 1) % n] + au * av * p[(iu + 1) % n, (iv + 1) % n])
    return -math.log(mass)


class TestLoss:
    def test_perfect_prediction(self, rng):
        truth = G8.bin_center(3, 6)
        bias = np.full((8, 8), -1e3)
        bias[3, 6] = 0.0
        m = FfccModel(G8, np.zeros((2, 8, 8)), bias)
        assert loss(m, LabeledSample(random_hists(rng), truth)) == pytest.approx(0.0, abs=1e-12)

    def test_uniform(self, rng):
        sample = LabeledSample(random_hists(rng), G8.bin_center(1, 2))
        assert loss(FfccModel.zeros(G8), sample) == pytest.approx(math.log(64), rel=1e-14)

    def test_direct_oracle(self):
        r = np.random.default_rng(8)
        m, sample = random_model(r), random_sample(r)
        assert abs(loss(m, sample) - direct_loss(m, sample)) < 1e-10

    def test_regularizers(self, rng):
        m, sample = random_model(rng), random_sample(rng)
        extra = 0.1 * np.sum(m.filters ** 2) + 0.2 * np.sum(m.bias ** 2)
        assert loss(m, sample, 0.1, 0.2) == pytest.approx(loss(m, sample) + extra, rel=1e-12)

    def test_truth_weights_bilinear(self):
        cu, cv = G8.bin_center(7, 2)
        w = truth_weights((cu + G8.bin_size / 4, cv), G8)
        assert w.sum() == pytest.approx(1.0)
        assert w[7, 2] == pytest.approx(0.75)
        assert w[0, 2] == pytest.approx(0.25)
        assert np.count_nonzero(w) == 2

    def test_batch_objective_matches_loss(self, rng):
        samples = [random_sample(rng) for _ in range(3)]
        m = random_model(rng)
        value, _, _ = objective(m.filters, m.bias, _Batch(samples), 1e-3, 2e-3)
        expected = np.mean([loss(m, s) for s in samples]) + 1e-3 * np.sum(m.filters ** 2) + 2e-3 * np.sum(m.bias ** 2)
        assert value == pytest.approx(expected, rel=1e-12)


def finite_difference_check(seed, l2f=1e-3, l2b=2e-3, coords=5, h=1e-5):
    """Max relative error between analytic and central-difference gradients."""
    r = np.random.default_rng(seed)
    batch = _Batch([random_sample(r) for _ in range(4)])
    m = random_model(r)
    _, gf, gb = objective(m.filters, m.bias, batch, l2f, l2b)
    worst = 0.0

    def rel(a, n):
        return abs(a - n) / max(abs(a), abs(n), 1e-8)

    for k in range(m.filters.shape[0]):
        for _ in range(coords):
            i, j = r.integers(0, 8, size=2)
            fp, fm = m.filters.copy(), m.filters.copy()
            fp[k, i, j] += h
            fm[k, i, j] -= h
            num = (objective(fp, m.bias, batch, l2f, l2b)[0] - objective(fm, m.bias, batch, l2f, l2b)[0]) / (2 * h)
            worst = max(worst, rel(gf[k, i, j], num))
    for _ in range(coords):
        i, j = r.integers(0, 8, size=2)
        bp, bm = m.bias.copy(), m.bias.copy()
        bp[i, j] += h
        bm[i, j] -= h
        num = (objective(m.filters, bp, batch, l2f, l2b)[0] - objective(m.filters, bm, batch, l2f, l2b)[0]) / (2 * h)
        worst = max(worst, rel(gb[i, j], num))
    return worst


class TestTrain:
    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_gradient_matches_finite_differences(self, seed):
        assert finite_difference_check(seed) < 1e-4

    def test_zero_learning_rate(self, rng):
        samples = [random_sample(rng) for _ in range(3)]
        m = train(samples, TrainConfig(learning_rate=0.0, epochs=5))
        assert m == FfccModel(G8, np.zeros((2, 8, 8)), np.zeros((8, 8)), trained=True)

    def test_single_repeated_sample(self, rng):
        g = HistogramGeometry(16, 0.125)
        s = LabeledSample(random_hists(rng, g), g.bin_center(5, 11))
        trace = []
        m = train([s, s], TrainConfig(epochs=200, learning_rate=0.5, momentum=0.5),
                  on_epoch=lambda e, v: trace.append(v))
        assert len(trace) == 200 and tuple(trace) == m.loss_trace
        assert all(b < a for a, b in zip(trace[3:], trace[4:]))
        p = posterior(score(m, s.histograms))
        assert np.unravel_index(np.argmax(p), p.shape) == (5, 11)

    def test_divergence_names_epoch(self, rng):
        samples = [random_sample(rng) for _ in range(2)]
        with pytest.raises(TrainingDiverged, match="epoch"):
            train(samples, TrainConfig(learning_rate=1e200, momentum=0.0, epochs=20, l2_filter=1.0, l2_bias=1.0))

    def test_deterministic(self, rng):
        samples = [random_sample(rng) for _ in range(4)]
        a = train(samples, TrainConfig(epochs=30))
        b = train(samples, TrainConfig(epochs=30))
        assert np.array(a.loss_trace).tobytes() == np.array(b.loss_trace).tobytes()
        assert encode_model(a) == encode_model(b)

    def test_needs_two_samples(self, rng):
        with pytest.raises(ValueError):
            train([random_sample(rng)])

    def test_mixed_geometry(self, rng):
        with pytest.raises(ValueError):
            train([random_sample(rng), random_sample(rng, HistogramGeometry(16, 0.125))])

    @pytest.mark.parametrize("kwargs", [dict(learning_rate=-1), dict(momentum=1.0), dict(epochs=0), dict(l2_bias=-1)])
    def test_config_validation(self, kwargs):
        with pytest.raises(ValueError):
            TrainConfig(**kwargs)

    def test_learns_small_synthetic_set(self):
        ranges = synth.SpecRanges(width=48, height=48)
        specs = synth.sample_specs(40, ranges, seed=5)
        g = HistogramGeometry()
        data = [synth.generate(sp) for sp in specs]
        samples = [make_sample(img, light, g) for img, light in data]
        m = train(samples[:30], TrainConfig(epochs=150))
        assert m.loss_trace[-1] < m.loss_trace[0]
        errs = [angular_error(estimate_ffcc(m, img), light) for img, light in data[30:]]
        assert np.median(errs) < 3.0


class TestModelFile:
    def test_round_trip(self, tmp_path, rng):
        m = random_model(rng, HistogramGeometry(16, 0.0625, (-0.5, 0.25)))
        p = tmp_path / "m.ffcc"
        save_model(m, p)
        raw = p.read_bytes()
        assert raw[:8] == MAGIC
        back = load_model(p)
        assert back == m and back.trained
        assert encode_model(back) == raw

    def test_bad_magic(self):
        raw = encode_model(FfccModel.zeros(G8))
        with pytest.raises(ModelFormatError, match="magic"):
            decode_model(b"XXXXXXXX" + raw[8:])

    def test_truncated(self):
        raw = encode_model(FfccModel.zeros(G8))
        with pytest.raises(ModelFormatError):
            decode_model(raw[:-8])
        with pytest.raises(ModelFormatError):
            decode_model(raw[:12])

    def test_invalid_model_arrays(self):
        with pytest.raises(ValueError):
            FfccModel(G8, np.zeros((2, 8, 7)), np.zeros((8, 8)))
        with pytest.raises(ValueError):
            FfccModel(G8, np.full((2, 8, 8), np.inf), np.zeros((8, 8)))
