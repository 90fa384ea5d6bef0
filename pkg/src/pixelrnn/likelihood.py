"""Discrete likelihoods: NLL in nats, bits/dim, and the dequantization equivalence check."""

import csv
import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigurationError, DataError

HEAD_VALUES = {"softmax256": 256, "bernoulli": 2}


def softmax(logits, axis):
    z = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(logits, axis):
    m = logits.max(axis=axis, keepdims=True)
    return logits - m - np.log(np.exp(logits - m).sum(axis=axis, keepdims=True))


def nll_nats(logits, targets):
    """Total and per-image NLL in nats.

    ``logits`` is ``B x C x K x H x W`` (softmax over ``K``) or, for a
    Bernoulli head, ``B x 1 x H x W`` of pre-sigmoid values.  ``targets``
    holds the integer sub-pixel values.
    """
    L = logits.data if isinstance(logits, T.Tensor) else np.asarray(logits, dtype=np.float64)
    t = np.asarray(targets)
    if not np.issubdtype(t.dtype, np.integer):
        if not np.all(t == np.round(t)):
            raise DataError("targets must be integers")
        t = t.astype(np.int64)
    levels = L.shape[2] if L.ndim == 5 else 2
    if t.size and (t.min() < 0 or t.max() >= levels):
        raise DataError(f"target values must lie in [0, {levels - 1}], got [{t.min()}, {t.max()}]")
    with T.no_grad():
        if L.ndim == 5:
            per = T.categorical_nll(T.Tensor(L), t).data
        else:
            per = T.bernoulli_nll(T.Tensor(L), t).data
    return float(per.sum()), per


def bits_per_dim(total_nll_nats, image_count, dims_per_image):
    if image_count <= 0 or dims_per_image <= 0:
        raise ConfigurationError("image_count and dims_per_image must be positive")
    return total_nll_nats / (image_count * dims_per_image * math.log(2.0))


@dataclass
class EvalReport:
    split: str
    images: int
    nats_total: float
    nats_per_image: float
    bits_per_dim: float

    FIELDS = ("split", "images", "nats_total", "nats_per_image", "bits_per_dim")

    @classmethod
    def from_total(cls, split, total, images, dims):
        return cls(split, images, total, total / images, bits_per_dim(total, images, dims))

    def row(self):
        return [self.split, self.images, repr(self.nats_total), repr(self.nats_per_image), f"{self.bits_per_dim:.6f}"]


def write_report(path, reports):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(EvalReport.FIELDS)
        for r in reports:
            w.writerow(r.row())


# ---------------------------------------------------------------------------
# dequantization


@dataclass
class EquivalenceReport:
    passed: bool
    draws: int
    discrete_log_prob: float
    max_abs_diff: float
    infinite: bool


def piecewise_uniform_log_density(probs, y):
    """Log density of the piecewise-constant density equal to ``probs[k]`` on ``[k, k+1)``."""
    probs = np.asarray(probs, dtype=np.float64)
    edges = np.arange(len(probs) + 1, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    bins = np.searchsorted(edges, y, side="right") - 1
    inside = (bins >= 0) & (bins < len(probs))
    dens = np.where(inside, probs[np.clip(bins, 0, len(probs) - 1)] / (edges[1] - edges[0]), 0.0)
    with np.errstate(divide="ignore"):
        return np.log(dens)


def continuous_equivalence_check(discrete_probs, target, mc_samples=1000, rng=None, tol=1e-12):
    """Compare discrete ``log p(target)`` with the dequantized continuous log density, draw by draw.

    Each draw adds ``u ~ U[0, 1)`` to ``target`` and evaluates the
    piecewise-uniform density there; the check passes only when every draw
    agrees with the discrete value (both infinite counts as agreement and is
    flagged).
    """
    rng = np.random.default_rng(rng)
    probs = np.asarray(discrete_probs, dtype=np.float64)
    with np.errstate(divide="ignore"):
        discrete = float(np.log(probs[int(target)]))
    noise = rng.random(mc_samples)
    cont = piecewise_uniform_log_density(probs, int(target) + noise)
    if np.isinf(discrete):
        same = np.all(cont == discrete)
        return EquivalenceReport(bool(same), mc_samples, discrete, 0.0 if same else math.inf, True)
    diff = np.abs(cont - discrete)
    worst = float(diff.max()) if diff.size else 0.0
    return EquivalenceReport(bool(np.all(diff <= tol)), mc_samples, discrete, worst, False)


def marginal_baseline(train_images, eval_images):
    """Per-image NLL (nats) of independent per-pixel Bernoullis fitted to ``train_images``.

    Marginals use add-one smoothing, ``(ones + 1) / (count + 2)``, so pixels
    never lit in training do not give an infinite score.
    """
    train_images = np.asarray(train_images, dtype=np.float64)
    eval_images = np.asarray(eval_images, dtype=np.float64)
    p = (train_images.sum(axis=0) + 1.0) / (train_images.shape[0] + 2.0)
    ll = eval_images * np.log(p) + (1.0 - eval_images) * np.log1p(-p)
    return float(-ll.reshape(len(eval_images), -1).sum(axis=1).mean())
