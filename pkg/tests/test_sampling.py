import numpy as np
import pytest

from oracles import randomize
from pixelrnn.data import binarize, crop, load_idx, subsample
from pixelrnn.errors import ConfigurationError, NumericError
from pixelrnn.network import KINDS, MultiScaleModel, MultiScaleSpec, Network, NetworkSpec
from pixelrnn.sampling import (
    complete,
    head_probabilities,
    is_raster_prefix,
    multiscale_sample,
    sample,
    teacher_forced_probabilities,
)
from pixelrnn.training import RunConfig, train


def net_for(kind="row_lstm", head="bernoulli", n=4, h=None, depth=1, seed=0):
    rgb = head.endswith("x3")
    h = h or (6 if rgb else 4)
    return Network(NetworkSpec(kind=kind, depth=depth, h=h, output_head=head, head_width=24 if rgb else 16), n, seed)


def fixed_head(net, logits):
    """Make the head ignore its input and emit ``logits`` (per channel) everywhere."""
    last = net.head[1]
    last.weight.data[...] = 0.0
    last.bias.data[...] = np.tile(logits, net.spec.channels) if net.spec.output_head != "bernoulli" else logits


class TestHeadProbabilities:
    def test_softmax_normalized(self, rng):
        p = head_probabilities(rng.normal(size=(2, 3, 256, 2, 2)))
        np.testing.assert_allclose(p.sum(axis=2), 1.0, atol=1e-12)

    def test_temperature_sharpens(self, rng):
        z = rng.normal(size=(1, 1, 256, 1, 1))
        ent = [-(p * np.log(p)).sum() for p in (head_probabilities(z, t) for t in (2.0, 1.0, 0.5))]
        assert ent[0] > ent[1] > ent[2]

    def test_bernoulli(self):
        assert np.array_equal(head_probabilities(np.array([0.0])), [0.5])


class TestSample:
    def test_argmax_follows_biased_head(self):
        net = net_for(head="softmax256x3")
        bias = np.zeros(256)
        bias[7] = 5.0
        fixed_head(net, bias)
        out = sample(net, 3, argmax=True).images
        assert out.shape == (3, 3, 4, 4) and np.all(out == 7)

    @pytest.mark.parametrize("kind", KINDS)
    def test_same_seed_same_images(self, kind):
        net = net_for(kind)
        a, b = sample(net, 4, rng_seed=5), sample(net, 4, rng_seed=5)
        assert np.array_equal(a.images, b.images) and np.array_equal(a.probs, b.probs)

    def test_values_in_range(self):
        out = sample(net_for(head="softmax256"), 2, rng_seed=1).images
        assert out.min() >= 0 and out.max() <= 255 and out.shape == (2, 1, 4, 4)

    @pytest.mark.parametrize("t", [0.0, -1.0, float("nan"), float("inf")])
    def test_bad_temperature(self, t):
        with pytest.raises(ConfigurationError):
            sample(net_for(), 1, temperature=t)

    def test_bad_count(self):
        with pytest.raises(ConfigurationError):
            sample(net_for(), 0)

    def test_draw_frequencies(self):
        # 10^5 single-pixel chains from a head fixed to a known distribution
        net = net_for(kind="pixelcnn", head="softmax256", n=1)
        p = np.zeros(256)
        p[[3, 50, 200, 255]] = [0.1, 0.2, 0.3, 0.4]
        with np.errstate(divide="ignore"):
            fixed_head(net, np.maximum(np.log(p), -1e3))
        N = 100_000
        out = sample(net, N, rng_seed=11).images.ravel()
        counts = np.bincount(out, minlength=256)
        assert counts.sum() == counts[[3, 50, 200, 255]].sum()
        for k in (3, 50, 200, 255):
            assert abs(counts[k] - N * p[k]) <= 3 * np.sqrt(N * p[k] * (1 - p[k]))

    def test_bernoulli_frequencies(self):
        net = net_for(kind="pixelcnn", n=1)
        fixed_head(net, np.array([np.log(0.3 / 0.7)]))
        N = 100_000
        ones = sample(net, N, rng_seed=2).images.sum()
        assert abs(ones - 0.3 * N) <= 3 * np.sqrt(N * 0.21)


class TestReplay:
    @pytest.mark.parametrize("kind", KINDS)
    @pytest.mark.parametrize("head", ["bernoulli", "softmax256x3"])
    def test_teacher_forcing_reproduces_steps(self, kind, head, rng):
        net = net_for(kind, head, n=4, depth=2)
        randomize(net, rng, 0.3)
        res = sample(net, 3, rng_seed=9)
        tf = teacher_forced_probabilities(net, res.images)
        assert np.max(np.abs(tf - res.probs)) <= 1e-12

    @pytest.mark.parametrize("kind", KINDS)
    def test_poison_mode_is_clean(self, kind, rng):
        net = net_for(kind, "softmax256x3", depth=2)
        randomize(net, rng, 0.3)
        a = sample(net, 2, rng_seed=3, poison=True)
        b = sample(net, 2, rng_seed=3)
        assert np.array_equal(a.images, b.images)
        assert np.max(np.abs(a.probs - b.probs)) <= 1e-12

    def test_poison_catches_a_leak(self, rng):
        net = net_for("pixelcnn", depth=1)
        net.first.weight.mask = None  # an unmasked first layer reads the future
        net.first.weight.data[...] = rng.normal(size=net.first.weight.shape)
        with pytest.raises(NumericError, match="leaked"):
            sample(net, 1, poison=True)


class TestComplete:
    def test_fully_observed_is_unchanged(self, rng):
        net = net_for()
        img = rng.integers(0, 2, size=(1, 4, 4))
        res, mode = complete(net, img, np.ones((4, 4), bool), count=2)
        assert mode == "exact" and np.array_equal(res.images, np.stack([img, img]))

    def test_bottom_half_keeps_top_bits(self, rng):
        net = net_for(n=8)
        img = rng.integers(0, 2, size=(1, 8, 8))
        occ = np.zeros((8, 8), bool)
        occ[:4] = True
        res, mode = complete(net, img, occ, rng_seed=1, count=4)
        assert mode == "exact"
        assert np.array_equal(res.images[:, :, :4], np.repeat(img[None, :, :4], 4, axis=0))

    def test_seeds_give_different_completions(self, rng):
        net = net_for(n=8)
        randomize(net, rng, 0.3)
        img = rng.integers(0, 2, size=(1, 8, 8))
        occ = np.zeros((8, 8), bool)
        occ[:4] = True
        for seed in range(8):
            a = complete(net, img, occ, rng_seed=2 * seed)[0].images
            b = complete(net, img, occ, rng_seed=2 * seed + 1)[0].images
            assert not np.array_equal(a, b)

    def test_centre_hole_uses_clamp(self, rng):
        net = net_for()
        img = rng.integers(0, 2, size=(1, 4, 4))
        occ = np.ones((4, 4), bool)
        occ[1:3, 1:3] = False
        res, mode = complete(net, img, occ)
        assert mode == "clamp"
        assert np.array_equal(res.images[0][:, occ], img[:, occ])
        with pytest.raises(ConfigurationError, match="prefix"):
            complete(net, img, occ, mode="exact")

    def test_clamp_on_prefix_matches_exact(self, rng):
        net = net_for()
        img = rng.integers(0, 2, size=(1, 4, 4))
        occ = np.zeros((4, 4), bool)
        occ[0] = True
        a, _ = complete(net, img, occ, rng_seed=4, mode="exact")
        b, used = complete(net, img, occ, rng_seed=4, mode="clamp")
        assert used == "clamp" and np.array_equal(a.images, b.images)

    @pytest.mark.parametrize("img_shape,occ_shape", [((1, 3, 4), (4, 4)), ((1, 4, 4), (4, 3)), ((3, 4, 4), (4, 4))])
    def test_shape_errors(self, img_shape, occ_shape):
        with pytest.raises(ConfigurationError):
            complete(net_for(), np.zeros(img_shape, int), np.ones(occ_shape, bool))

    def test_unknown_mode(self):
        with pytest.raises(ConfigurationError):
            complete(net_for(), np.zeros((1, 4, 4), int), np.ones((4, 4), bool), mode="guess")

    @pytest.mark.parametrize("rows,want", [(0, True), (2, True), (4, True)])
    def test_prefix_rows(self, rows, want):
        occ = np.zeros((4, 4), bool)
        occ[:rows] = True
        assert is_raster_prefix(occ) is want

    def test_partial_row_prefix(self):
        occ = np.zeros((3, 3), bool)
        occ.ravel()[:4] = True
        assert is_raster_prefix(occ)
        occ[2, 2] = True
        assert not is_raster_prefix(occ)


class TestMultiScale:
    def model(self, seed=0):
        sub = NetworkSpec(kind="row_lstm", depth=1, h=3, output_head="bernoulli", head_width=8)
        return MultiScaleModel(MultiScaleSpec(small_side=2, unconditional=sub, conditional=sub, upsampler_width=3),
                               4, seed)

    def test_shapes(self):
        res = multiscale_sample(self.model(), rng_seed=1, count=3)
        assert res.small.shape == (3, 1, 2, 2) and res.large.shape == (3, 1, 4, 4)
        assert 0.0 <= res.agreement <= 1.0

    def test_zero_upsampler_is_bit_identical(self):
        model = self.model()
        for p in model.upsampler.parameters():
            p.data[...] = 0.0
        res = multiscale_sample(model, rng_seed=6, count=4)
        plain = sample(model.conditional, 4, rng_seed=6)
        assert np.array_equal(res.large, plain.images)

    def test_upsampler_changes_samples(self, rng):
        model = self.model()
        randomize(model.conditional, rng, 0.5)
        for p in model.upsampler.parameters():
            p.data[...] = rng.normal(0, 2.0, size=p.shape)
        res = multiscale_sample(model, rng_seed=6, count=8)
        plain = sample(model.conditional, 8, rng_seed=6)
        assert not np.array_equal(res.large, plain.images)


class TestTrainedReplay:
    def test_briefly_trained_model(self, mnist_path):
        data = subsample(crop(binarize(load_idx(mnist_path).take(64), seed=0), 24), 3)
        net = net_for("row_lstm", n=8, h=4)
        train(net, data, data.take(8), RunConfig(batch_size=16, epochs=2, learning_rate=1e-2))
        res = sample(net, 4, rng_seed=0)
        assert np.max(np.abs(teacher_forced_probabilities(net, res.images) - res.probs)) <= 1e-12
