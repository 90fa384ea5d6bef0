"""Sequential generation, occlusion completion and two-scale sampling.

Every sub-pixel is drawn in raster order, R then G then B inside a pixel,
from a full forward pass over the partially generated image.  Positions not
yet generated hold 0 and, by causality, cannot change the distribution being
sampled; ``poison=True`` replaces them with NaN to prove it.
"""

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .data import preprocess, subsample
from .errors import ConfigurationError, NumericError


@dataclass
class SampleResult:
    """Generated images plus the exact per-step distributions used to draw them.

    ``probs`` is ``B x C x K x n x n`` for softmax heads and ``B x 1 x n x n``
    (probability of a 1) for the Bernoulli head.
    """

    images: np.ndarray
    probs: np.ndarray


def head_probabilities(logits, temperature=1.0):
    """Distributions implied by raw network output at the given temperature."""
    L = np.asarray(logits, dtype=np.float64) / temperature
    if L.ndim == 5:
        z = L - L.max(axis=2, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=2, keepdims=True)
    return 0.5 * (np.tanh(0.5 * L) + 1.0)


def teacher_forced_probabilities(net, images, temperature=1.0, cond=None):
    """All conditionals in one parallel pass over fully observed images."""
    with T.no_grad():
        return head_probabilities(net.logits(images, cond).data, temperature)


def _check_temperature(temperature):
    if not temperature > 0 or not np.isfinite(temperature):
        raise ConfigurationError(f"temperature must be a positive finite number, got {temperature}")


def _draw(p, u, argmax):
    """One categorical draw per row of ``p`` (``B x K``) from uniforms ``u``."""
    if argmax:
        return np.argmax(p, axis=1)
    cdf = np.cumsum(p, axis=1)
    idx = (u[:, None] * cdf[:, -1:] >= cdf).sum(axis=1)
    return np.minimum(idx, p.shape[1] - 1)


def _step_logits(net, images, r, c, ch, cond, poison):
    levels = net.spec.levels
    x = preprocess(images, levels)
    if poison:
        C, n = images.shape[1], images.shape[2]
        order = ((np.arange(n)[:, None] * n + np.arange(n)[None, :])[None] * C
                 + np.arange(C)[:, None, None])
        x[:, order >= (r * n + c) * C + ch] = np.nan
    with T.no_grad():
        if poison:
            with T.nonfinite_allowed():
                out = net.forward(T.Tensor(x), cond).data
        else:
            out = net.forward(T.Tensor(x), cond).data
    out = out[:, ch, ..., r, c] if out.ndim == 5 else out[:, 0, r, c]
    if poison and not np.all(np.isfinite(out)):
        raise NumericError(f"future positions leaked into the distribution at ({r}, {c}, {ch})")
    return out


def _run(net, images, observed, rng, temperature, argmax, cond, poison):
    B, C, n, _ = images.shape
    bernoulli = net.spec.output_head == "bernoulli"
    probs = np.zeros((B, 1, n, n)) if bernoulli else np.zeros((B, C, 256, n, n))
    if cond is not None:
        cond = T.Tensor(cond.data if isinstance(cond, T.Tensor) else np.asarray(cond, dtype=np.float64))
    for r in range(n):
        for c in range(n):
            if observed[r, c]:
                continue
            for ch in range(C):
                logits = _step_logits(net, images, r, c, ch, cond, poison)
                u = rng.random(B)
                if bernoulli:
                    p1 = head_probabilities(logits, temperature)
                    probs[:, 0, r, c] = p1
                    value = (p1 >= 0.5) if argmax else (u < p1)
                else:
                    p = head_probabilities(logits[:, None, :, None, None], temperature)[:, 0, :, 0, 0]
                    probs[:, ch, :, r, c] = p
                    value = _draw(p, u, argmax)
                images[:, ch, r, c] = value
    return SampleResult(images, probs)


def sample(net, count, rng_seed=0, temperature=1.0, argmax=False, cond=None, poison=False):
    """Draw ``count`` images in raster order.

    Args:
        net: a built :class:`~pixelrnn.network.Network`.
        count: number of independent chains (one batch).
        rng_seed: seed (or seed sequence) of the only random stream used.
        temperature: logits are divided by this before normalizing.
        argmax: take the most probable value instead of drawing (the zero
            temperature limit).
        cond: optional conditioning map for a conditional network.
        poison: fill not-yet-generated sub-pixels with NaN and fail if any
            leaks into a sampled distribution.

    Returns:
        A :class:`SampleResult` with ``count x C x n x n`` integer images.
    """
    _check_temperature(temperature)
    if count < 1:
        raise ConfigurationError("count must be positive")
    C, n = net.spec.channels, net.n
    images = np.zeros((count, C, n, n), dtype=np.int64)
    observed = np.zeros((n, n), dtype=bool)
    return _run(net, images, observed, np.random.default_rng(rng_seed), temperature, argmax, cond, poison)


def is_raster_prefix(occlusion):
    flat = np.asarray(occlusion, dtype=bool).ravel()
    k = int(flat.sum())
    return bool(flat[:k].all())


def complete(net, image, occlusion, rng_seed=0, count=1, mode="auto", temperature=1.0, cond=None):
    """Fill the unobserved pixels of ``image`` (``C x n x n``) ``count`` times.

    ``occlusion`` is an ``n x n`` boolean map, true where the pixel is kept.
    ``exact`` requires the observed set to be a raster-order prefix, so every
    sampled pixel is conditioned on everything before it.  ``clamp`` accepts
    any pattern and copies observed pixels in as generation passes them,
    which only approximates conditioning on observed pixels that come later.
    ``auto`` picks ``exact`` when possible.

    Returns:
        ``(SampleResult, mode_used)``.
    """
    _check_temperature(temperature)
    image = np.asarray(image)
    occlusion = np.asarray(occlusion, dtype=bool)
    C, n = net.spec.channels, net.n
    if image.shape != (C, n, n):
        raise ConfigurationError(f"image must be {C}x{n}x{n}, got {image.shape}")
    if occlusion.shape != (n, n):
        raise ConfigurationError(f"occlusion must be {n}x{n}, got {occlusion.shape}")
    if count < 1:
        raise ConfigurationError("count must be positive")
    if mode not in ("auto", "exact", "clamp"):
        raise ConfigurationError(f"completion mode must be auto, exact or clamp, got {mode!r}")
    prefix = is_raster_prefix(occlusion)
    if mode == "exact" and not prefix:
        raise ConfigurationError("exact completion needs a raster-order prefix occlusion; use clamp mode")
    used = "exact" if prefix and mode != "clamp" else "clamp"
    images = np.repeat(image[None].astype(np.int64), count, axis=0)
    images[:, :, ~occlusion] = 0
    result = _run(net, images, occlusion, np.random.default_rng(rng_seed), temperature, False, cond, False)
    return result, used


@dataclass
class MultiScaleResult:
    small: np.ndarray
    large: np.ndarray
    agreement: float


def multiscale_sample(model, rng_seed=0, count=1, temperature=1.0):
    """Sample ``s x s`` images, then ``n x n`` images conditioned on them.

    The large image uses ``rng_seed`` itself, so it matches plain sampling
    from the conditional network at the same seed whenever the conditioning
    contributes nothing; the small image uses a stream derived from it.
    ``agreement`` is the fraction of sub-pixels where the subsampled large
    image equals the small one (reported, not enforced).
    """
    small = sample(model.unconditional, count, [rng_seed, 1], temperature).images
    with T.no_grad():
        cond = model.conditioning(small)
    large = sample(model.conditional, count, rng_seed, temperature, cond=cond).images
    agreement = float(np.mean(subsample(large, model.factor) == small))
    return MultiScaleResult(small, large, agreement)
