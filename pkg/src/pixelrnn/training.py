"""RMSProp training, evaluation, and the residual/skip and depth ablations."""

import csv
import time
from dataclasses import dataclass, field, fields, replace

import numpy as np

from . import tensor as T
from .errors import ConfigurationError, NumericError
from .likelihood import EvalReport
from .masking import apply_mask


@dataclass(frozen=True)
class RunConfig:
    """Training hyperparameters; every field can be set from a ``key = value`` file.

    ``lr_decay`` multiplies the learning rate every ``lr_decay_every`` steps
    (0 disables the schedule).  ``max_steps`` and ``time_budget`` (seconds)
    stop training early when positive.
    """

    learning_rate: float = 1e-3
    rms_decay: float = 0.95
    rms_epsilon: float = 1e-8
    batch_size: int = 16
    epochs: int = 1
    seed: int = 0
    eval_every: int = 100
    lr_decay: float = 1.0
    lr_decay_every: int = 0
    max_steps: int = 0
    time_budget: float = 0.0

    def validate(self):
        if self.learning_rate < 0:
            raise ConfigurationError("learning_rate must be non-negative")
        if not 0 < self.rms_decay < 1:
            raise ConfigurationError("rms_decay must lie in (0, 1)")
        if self.rms_epsilon <= 0:
            raise ConfigurationError("rms_epsilon must be positive")
        if self.batch_size < 1 or self.epochs < 1 or self.eval_every < 1:
            raise ConfigurationError("batch_size, epochs and eval_every must be positive")
        if not 0 < self.lr_decay <= 1 or self.lr_decay_every < 0:
            raise ConfigurationError("lr_decay must lie in (0, 1] and lr_decay_every must be non-negative")
        if self.max_steps < 0 or self.time_budget < 0:
            raise ConfigurationError("max_steps and time_budget must be non-negative")
        return self

    @classmethod
    def from_mapping(cls, mapping, base=None):
        """Build from string values; unknown keys are an error."""
        base = base or cls()
        types = {f.name: f.type for f in fields(cls)}
        updates = {}
        for key, raw in mapping.items():
            if key not in types:
                raise ConfigurationError(f"unknown training option {key!r}")
            kind = int if types[key] in (int, "int") else float
            try:
                updates[key] = kind(raw)
            except (TypeError, ValueError):
                raise ConfigurationError(f"{key} expects {kind.__name__}, got {raw!r}") from None
        return replace(base, **updates).validate()

    def learning_rate_at(self, step):
        if self.lr_decay_every == 0:
            return self.learning_rate
        return self.learning_rate * self.lr_decay ** (step // self.lr_decay_every)


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class RMSPropState:
    acc: dict = field(default_factory=dict)
    step: int = 0


def rmsprop_step(params, grads, state, cfg):
    """One RMSProp update in place, then re-zero every masked position.

    ``acc <- rho * acc + (1 - rho) * g**2`` and
    ``theta <- theta - lr * g / sqrt(acc + eps)``.
    """
    if len(params) != len(grads):
        raise ConfigurationError("params and grads differ in length")
    if len({p.name for p in params}) != len(params):
        raise ConfigurationError("parameter names must be unique; optimizer state is keyed by name")
    for p, g in zip(params, grads):
        if g.shape != p.shape:
            raise ConfigurationError(f"{p.name}: gradient shape {g.shape} does not match {p.shape}")
        if not np.all(np.isfinite(g)):
            bad = int(np.size(g) - np.isfinite(g).sum())
            raise NumericError(f"non-finite gradient in {p.name} ({bad} entries) at step {state.step}")
    lr = cfg.learning_rate_at(state.step)
    rho, eps = cfg.rms_decay, cfg.rms_epsilon
    for p, g in zip(params, grads):
        acc = state.acc.get(p.name)
        if acc is None:
            acc = np.zeros_like(p.data)
        acc = rho * acc + (1.0 - rho) * g * g
        state.acc[p.name] = acc
        if lr:
            p.data -= lr * g / np.sqrt(acc + eps)
        apply_mask(p)
    state.step += 1
    return state


# ---------------------------------------------------------------------------
# metrics


@dataclass
class Metrics:
    """Per-step training NLL and periodic validation results.

    Equality ignores wall-clock times, so two runs with equal seeds compare
    equal.
    """

    steps: list = field(default_factory=list)
    train_nll: list = field(default_factory=list)
    seconds: list = field(default_factory=list)
    evals: list = field(default_factory=list)  # (step, val_nll, val_bits_per_dim)

    def __eq__(self, other):
        if not isinstance(other, Metrics):
            return NotImplemented
        return (self.steps == other.steps and self.train_nll == other.train_nll
                and self.evals == other.evals)

    def best_eval(self):
        return min(self.evals, key=lambda e: e[1]) if self.evals else None

    def write_csv(self, path):
        val = {s: (v, b) for s, v, b in self.evals}
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "train_nll", "val_nll", "val_bits_per_dim", "seconds"])
            for s, tr, sec in zip(self.steps, self.train_nll, self.seconds):
                v, b = val.get(s, ("", ""))
                w.writerow([s, repr(tr), repr(v) if v != "" else "", repr(b) if b != "" else "", f"{sec:.6f}"])


@dataclass
class TrainResult:
    metrics: Metrics
    best_val_nll: float
    best_step: int
    stopped_early: bool


# ---------------------------------------------------------------------------
# loops


def evaluate(model, dataset, batch_size=64, split=None):
    """Exact NLL of ``dataset`` under ``model`` as an :class:`EvalReport`."""
    images = dataset.images
    total = 0.0
    with T.no_grad():
        for i in range(0, len(images), batch_size):
            total += float(np.sum(model.nll(images[i:i + batch_size]).data))
    return EvalReport.from_total(split or dataset.split, total, len(images), dataset.dims)


def _loss(model, batch):
    return T.mean(model.nll(batch))


def _save_checkpoint(model, path):
    if path is not None:
        model.save(path)


def train(model, train_set, val_set, cfg, checkpoint_path=None, metrics_path=None, log=None):
    """Minimize mean per-image NLL with RMSProp.

    Mini-batches come from a per-epoch shuffle drawn from ``cfg.seed``, so
    runs are bit-reproducible.  Validation runs every ``cfg.eval_every``
    steps and at the end; the best-validation parameters are written to
    ``checkpoint_path``.  A non-finite loss or gradient aborts with
    :class:`NumericError`, leaving the last good checkpoint on disk.
    """
    cfg.validate()
    if len(train_set) == 0:
        raise ConfigurationError("training set is empty")
    rng = np.random.default_rng(cfg.seed)
    params = model.parameters()
    state = RMSPropState()
    metrics = Metrics()
    best = (np.inf, -1)
    start = time.perf_counter()
    stopped = False

    def validate_now(step):
        nonlocal best
        report = evaluate(model, val_set)
        metrics.evals.append((step, report.nats_per_image, report.bits_per_dim))
        if not np.isfinite(report.nats_per_image):
            raise NumericError(f"non-finite validation NLL at step {step}")
        if report.nats_per_image < best[0]:
            best = (report.nats_per_image, step)
            _save_checkpoint(model, checkpoint_path)
        if log:
            log(f"step {step}: val nll {report.nats_per_image:.4f} nats, {report.bits_per_dim:.4f} bits/dim")

    for _epoch in range(cfg.epochs):
        order = rng.permutation(len(train_set))
        for i in range(0, len(order), cfg.batch_size):
            batch = train_set.images[np.sort(order[i:i + cfg.batch_size])]
            t0 = time.perf_counter()
            T.zero_grad(params)
            loss = _loss(model, batch)
            value = float(loss.data)
            if not np.isfinite(value):
                raise NumericError(f"non-finite training loss at step {state.step}")
            T.backward(loss)
            rmsprop_step(params, [p.grad for p in params], state, cfg)
            metrics.steps.append(state.step)
            metrics.train_nll.append(value)
            metrics.seconds.append(time.perf_counter() - t0)
            if state.step % cfg.eval_every == 0:
                validate_now(state.step)
            if cfg.max_steps and state.step >= cfg.max_steps:
                stopped = True
            if cfg.time_budget and time.perf_counter() - start >= cfg.time_budget:
                stopped = True
            if stopped:
                break
        if stopped:
            break
    if not metrics.evals or metrics.evals[-1][0] != state.step:
        validate_now(state.step)
    if metrics_path is not None:
        metrics.write_csv(metrics_path)
    return TrainResult(metrics, best[0], best[1], stopped)


# ---------------------------------------------------------------------------
# ablations

#: Published large-scale bits/dim, kept alongside desk-scale runs for comparison.
REFERENCE_GRID = {(False, False): 3.22, (False, True): 3.09, (True, False): 3.07, (True, True): 3.06}
REFERENCE_DEPTHS = {1: 3.30, 2: 3.20, 3: 3.17, 6: 3.09, 9: 3.08, 12: 3.06}


@dataclass
class AblationResult:
    grid: list  # rows (use_residual, use_skip, val_nll, val_bits_per_dim, reference)
    depths: list  # rows (depth, val_nll, val_bits_per_dim, reference)

    def write_csv(self, grid_path, depth_path):
        with open(grid_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["use_residual", "use_skip", "val_nll", "val_bits_per_dim", "reference_bits_per_dim"])
            w.writerows(self.grid)
        with open(depth_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["depth", "val_nll", "val_bits_per_dim", "reference_bits_per_dim"])
            w.writerows(self.depths)


def _fit(spec, n, train_set, val_set, cfg):
    from .network import Network

    net = Network(spec, n, cfg.seed)
    train(net, train_set, val_set, cfg)
    report = evaluate(net, val_set)
    return report.nats_per_image, report.bits_per_dim


def ablation_grid(base_spec, n, train_set, val_set, cfg, depths=(1, 2, 3), log=None):
    """Train the residual x skip grid and a depth sweep; returns an :class:`AblationResult`.

    Each cell is a fresh network with seed ``cfg.seed``.  Values are reported
    as measured; no ordering between cells is assumed.
    """
    grid = []
    for residual in (False, True):
        for skip in (False, True):
            spec = replace(base_spec, use_residual=residual, use_skip=skip)
            nll, bpd = _fit(spec, n, train_set, val_set, cfg)
            grid.append((residual, skip, nll, bpd, REFERENCE_GRID[(residual, skip)]))
            if log:
                log(f"residual={residual} skip={skip}: {nll:.4f} nats, {bpd:.4f} bits/dim")
    sweep = []
    for depth in depths:
        nll, bpd = _fit(replace(base_spec, depth=depth), n, train_set, val_set, cfg)
        sweep.append((depth, nll, bpd, REFERENCE_DEPTHS.get(depth, "")))
        if log:
            log(f"depth={depth}: {nll:.4f} nats, {bpd:.4f} bits/dim")
    return AblationResult(grid, sweep)
