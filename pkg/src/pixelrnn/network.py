"""Full models: PixelCNN, Row LSTM and Diagonal BiLSTM networks, plus multi-scale conditioning.

Layer stack (``h`` is the feature width)::

    7x7 conv, mask A            C   -> 2h
    residual blocks             2h  -> 2h   (recurrent layer or 3x3 mask-B conv)
    [skip: sum of 1x1 mask-B projections of every layer output]
    ReLU, 1x1 conv mask B       2h  -> head_width
    ReLU, 1x1 conv mask B       head_width -> logits

For PixelCNN ``depth`` counts the 7x7 layer, so depth 1 is that layer
alone; for the recurrent kinds ``depth`` is the number of LSTM layers.
"""

from collections import OrderedDict
from dataclasses import asdict, dataclass, fields, replace

import numpy as np

from . import checkpoint
from . import tensor as T
from .data import preprocess, subsample
from .errors import ConfigurationError, DataError
from .layers import ConvInner, DiagBiLSTMLayer, MaskedConv, ResidualBlock, RowLSTMLayer

KINDS = ("pixelcnn", "row_lstm", "diag_bilstm")
HEADS = {
    # name: (channels, values per sub-pixel)
    "softmax256x3": (3, 256),
    "softmax256": (1, 256),
    "bernoulli": (1, 2),
}


@dataclass(frozen=True)
class NetworkSpec:
    kind: str = "pixelcnn"
    depth: int = 1
    h: int = 16
    use_residual: bool = True
    use_skip: bool = True
    output_head: str = "bernoulli"
    head_width: int = 32
    first_kernel: int = 7
    row_kernel: int = 3
    conditioning_width: int = 0

    @property
    def channels(self):
        return HEADS[self.output_head][0]

    @property
    def levels(self):
        return HEADS[self.output_head][1]

    @property
    def group_count(self):
        return self.channels

    @property
    def block_count(self):
        return self.depth - 1 if self.kind == "pixelcnn" else self.depth

    def validate(self):
        if self.kind not in KINDS:
            raise ConfigurationError(f"unknown network kind {self.kind!r}; choose from {KINDS}")
        if self.output_head not in HEADS:
            raise ConfigurationError(f"unknown output head {self.output_head!r}; choose from {tuple(HEADS)}")
        if self.depth < 1 or self.h < 1 or self.head_width < 1:
            raise ConfigurationError("depth, h and head_width must be positive")
        if self.first_kernel != 7:
            raise ConfigurationError("the first layer is always a 7x7 mask-A convolution")
        G = self.group_count
        if self.h % G or self.head_width % G:
            raise ConfigurationError(f"h={self.h} and head_width={self.head_width} must be divisible by {G}")
        return self

    def to_header(self):
        return OrderedDict((k, str(v)) for k, v in asdict(self).items())

    @classmethod
    def from_header(cls, header):
        kwargs = {}
        for f in fields(cls):
            if f.name not in header:
                continue
            raw = header[f.name]
            if f.type in (bool, "bool"):
                if raw not in ("True", "False"):
                    raise ConfigurationError(f"{f.name} must be True or False, got {raw!r}")
                kwargs[f.name] = raw == "True"
            elif f.type in (int, "int"):
                try:
                    kwargs[f.name] = int(raw)
                except ValueError:
                    raise ConfigurationError(f"{f.name} must be an integer, got {raw!r}") from None
            else:
                kwargs[f.name] = raw
        return cls(**kwargs).validate()


MNIST_REFERENCE = NetworkSpec(kind="diag_bilstm", depth=7, h=16, output_head="bernoulli", head_width=32)
CIFAR_REFERENCE = NetworkSpec(kind="row_lstm", depth=12, h=128, output_head="softmax256x3", head_width=1024)


class Network:
    """A built model: parameters with masks applied, deterministic for a fixed seed."""

    def __init__(self, spec, n, seed=0):
        spec.validate()
        if n < 1:
            raise ConfigurationError("image side must be positive")
        self.spec, self.n, self.seed = spec, n, seed
        rng = np.random.default_rng(seed)
        G, h, C = spec.group_count, spec.h, spec.channels
        cw = spec.conditioning_width
        k = spec.first_kernel
        self.first = MaskedConv("input", C, 2 * h, k, k, "A", G, rng)
        self.blocks = []
        for b in range(spec.block_count):
            name = f"block{b}"
            if spec.kind == "pixelcnn":
                inner = ConvInner(f"{name}.conv", 2 * h, h, G, rng, cond_width=cw)
            elif spec.kind == "row_lstm":
                inner = RowLSTMLayer(f"{name}.row_lstm", 2 * h, h, n, G, rng, k=spec.row_kernel, cond_width=cw)
            else:
                inner = DiagBiLSTMLayer(f"{name}.diag_bilstm", 2 * h, h, n, G, rng, cond_width=cw)
            self.blocks.append(ResidualBlock(name, inner, h, G, rng, residual=spec.use_residual))
        self.skips = []
        if spec.use_skip:
            self.skips = [MaskedConv(f"skip{i}", 2 * h, 2 * h, 1, 1, "B", G, rng)
                          for i in range(len(self.blocks) + 1)]
        self.head = [
            MaskedConv("head0", 2 * h, spec.head_width, 1, 1, "B", G, rng),
            MaskedConv("head1", spec.head_width, self.out_features, 1, 1, "B", G, rng),
        ]
        names = [p.name for p in self.parameters()]
        if len(set(names)) != len(names):
            raise AssertionError("duplicate parameter names")

    @property
    def out_features(self):
        return 1 if self.spec.output_head == "bernoulli" else self.spec.channels * 256

    def parameters(self):
        params = self.first.parameters()
        for b in self.blocks:
            params += b.parameters()
        for s in self.skips:
            params += s.parameters()
        for hd in self.head:
            params += hd.parameters()
        return params

    def masked_parameters(self):
        return [p for p in self.parameters() if p.mask is not None]

    def state_dict(self):
        return OrderedDict((p.name, p.data.copy()) for p in self.parameters())

    def load_state_dict(self, state):
        params = {p.name: p for p in self.parameters()}
        missing = set(params) - set(state)
        extra = set(state) - set(params)
        if missing or extra:
            raise ConfigurationError(f"state mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for name, arr in state.items():
            p = params[name]
            if arr.shape != p.shape:
                raise ConfigurationError(f"{name}: shape {arr.shape} does not match {p.shape}")
            p.data[...] = arr

    def header(self):
        head = self.spec.to_header()
        head["side"] = str(self.n)
        head["seed"] = str(self.seed)
        return head

    def save(self, path):
        checkpoint.save(path, self.state_dict(), self.header())

    @classmethod
    def load(cls, path):
        header, state = checkpoint.load(path)
        return cls.from_checkpoint(header, state)

    @classmethod
    def from_checkpoint(cls, header, state):
        spec = NetworkSpec.from_header(header)
        try:
            n = int(header["side"])
            seed = int(header.get("seed", "0"))
        except (KeyError, ValueError):
            raise ConfigurationError("checkpoint header lacks a valid 'side'") from None
        net = cls(spec, n, seed)
        net.load_state_dict(state)
        return net

    # -- evaluation ---------------------------------------------------------

    def _check_input(self, x):
        B, C, n, width = x.shape
        if C != self.spec.channels:
            raise ConfigurationError(f"expected {self.spec.channels} channels, got {C}")
        if n != self.n or width != self.n:
            raise ConfigurationError(f"network built for {self.n}x{self.n} images, got {n}x{width}")

    def forward(self, x, cond=None):
        """Teacher-forced logits for a preprocessed ``B x C x n x n`` batch.

        Returns ``B x C x 256 x n x n`` for softmax heads and ``B x 1 x n x n``
        (pre-sigmoid) for the Bernoulli head.
        """
        x = T.tensor(x)
        if x.ndim != 4:
            raise ConfigurationError(f"forward expects B x C x n x n, got {x.shape}")
        self._check_input(x)
        if cond is not None:
            cond = T.tensor(cond)
            if cond.shape[0] != x.shape[0] or cond.shape[2:] != x.shape[2:]:
                raise ConfigurationError(f"conditioning map {cond.shape} does not match batch {x.shape}")
            if self.spec.conditioning_width != cond.shape[1]:
                raise ConfigurationError(
                    f"network expects {self.spec.conditioning_width} conditioning features, got {cond.shape[1]}")
        y = self.first(x)
        outputs = [y]
        for block in self.blocks:
            y = block(y, cond)
            outputs.append(y)
        if self.skips:
            y = self.skips[0](outputs[0])
            for skip, out in zip(self.skips[1:], outputs[1:]):
                y = T.add(y, skip(out))
        y = self.head[1](T.relu(self.head[0](T.relu(y))))
        B = x.shape[0]
        if self.spec.output_head == "bernoulli":
            return y
        return T.reshape(y, (B, self.spec.channels, 256, self.n, self.n))

    def logits(self, images, cond=None):
        return self.forward(preprocess(images, self.spec.levels), cond)

    def nll(self, images, cond=None):
        """Per-image negative log-likelihood in nats, as a ``(B,)`` tensor."""
        images = np.asarray(images)
        if images.ndim != 4:
            raise ConfigurationError(f"images must be B x C x n x n, got shape {images.shape}")
        if images.min(initial=0) < 0 or images.max(initial=0) >= self.spec.levels:
            raise DataError(f"pixel values must lie in [0, {self.spec.levels - 1}]")
        logits = self.logits(images, cond)
        if self.spec.output_head == "bernoulli":
            return T.bernoulli_nll(logits, images)
        return T.categorical_nll(logits, images)

    # -- dependency analysis ------------------------------------------------

    def dependency_maps(self):
        """Boolean ``C x n x n x (C*n*n)``: which input sub-pixels each output sub-pixel may read."""
        C, n = self.spec.channels, self.n
        M = C * n * n
        dep = np.zeros((C, n, n, M), dtype=bool)
        dep.reshape(M, M)[np.arange(M), np.arange(M)] = True
        y = self.first.dependencies(dep)
        outputs = [y]
        for block in self.blocks:
            y = block.dependencies(y)
            outputs.append(y)
        if self.skips:
            y = np.zeros_like(outputs[0])
            for skip, out in zip(self.skips, outputs):
                y |= skip.dependencies(out)
        y = self.head[1].dependencies(self.head[0].dependencies(y))
        return y

    def dependency_field(self, position):
        """Set of input sub-pixels ``(row, col, channel)`` the output at ``position`` depends on."""
        row, col, channel = _position(position, self.n, self.spec.channels)
        deps = self.dependency_maps()[channel, row, col].reshape(self.spec.channels, self.n, self.n)
        return {(int(r), int(c), int(ch)) for ch, r, c in zip(*np.nonzero(deps))}


def _position(position, n, channels):
    if len(position) == 2:
        position = tuple(position) + (0,)
    row, col, channel = (int(v) for v in position)
    if not (0 <= row < n and 0 <= col < n and 0 <= channel < channels):
        raise ConfigurationError(f"position {position} out of range for {n}x{n}x{channels}")
    return row, col, channel


def build(spec, n, rng_seed=0):
    return Network(spec, n, rng_seed)


def dependency_field(net, position):
    return net.dependency_field(position)


def preceding_set(n, position, channels=1):
    """All sub-pixels strictly before ``position`` in raster order, channel order R, G, B inside a pixel."""
    row, col, channel = _position(position, n, channels)
    t = (row * n + col) * channels + channel
    return {(r, c, ch) for r in range(n) for c in range(n) for ch in range(channels)
            if (r * n + c) * channels + ch < t}


# ---------------------------------------------------------------------------
# multi-scale


@dataclass(frozen=True)
class MultiScaleSpec:
    small_side: int
    unconditional: NetworkSpec
    conditional: NetworkSpec
    upsampler_width: int = 8


class Upsampler:
    """Nearest-neighbour enlargement followed by two unmasked 3x3 convolutions with a ReLU between."""

    def __init__(self, channels, width, factor, rng):
        self.factor = factor
        self.conv0 = MaskedConv("upsampler0", channels, width, 3, 3, None, 1, rng)
        self.conv1 = MaskedConv("upsampler1", width, width, 3, 3, None, 1, rng)

    def parameters(self):
        return self.conv0.parameters() + self.conv1.parameters()

    def __call__(self, small_x):
        return self.conv1(T.relu(self.conv0(T.upsample_nearest(small_x, self.factor))))


class MultiScaleModel:
    """An unconditional network on ``s x s`` subsampled images and a conditional one on ``n x n``."""

    def __init__(self, spec, n, seed=0):
        s = spec.small_side
        if s < 1 or n % s:
            raise ConfigurationError(f"small side {s} must divide n={n}")
        if spec.unconditional.output_head != spec.conditional.output_head:
            raise ConfigurationError("both scales must share an output head")
        if spec.upsampler_width < 1:
            raise ConfigurationError("upsampler width must be positive")
        self.spec, self.n = spec, n
        self.unconditional = Network(spec.unconditional, s, seed)
        self.conditional = Network(replace(spec.conditional, conditioning_width=spec.upsampler_width), n, seed + 1)
        rng = np.random.default_rng([seed, 2])
        self.upsampler = Upsampler(spec.conditional.channels, spec.upsampler_width, n // s, rng)
        # both scales share layer names, so prefix them to keep every parameter name unique
        for prefix, sub in (("small/", self.unconditional), ("large/", self.conditional)):
            for p in sub.parameters():
                p.name = prefix + p.name

    @property
    def factor(self):
        return self.n // self.spec.small_side

    def parameters(self):
        return self.unconditional.parameters() + self.conditional.parameters() + self.upsampler.parameters()

    def masked_parameters(self):
        return [p for p in self.parameters() if p.mask is not None]

    def _named(self):
        for p in self.parameters():
            yield p.name, p

    def state_dict(self):
        return OrderedDict((name, p.data.copy()) for name, p in self._named())

    def load_state_dict(self, state):
        params = dict(self._named())
        if set(params) != set(state):
            raise ConfigurationError("state does not match the multi-scale model's parameters")
        for name, arr in state.items():
            if arr.shape != params[name].shape:
                raise ConfigurationError(f"{name}: shape {arr.shape} does not match {params[name].shape}")
            params[name].data[...] = arr

    def header(self):
        head = OrderedDict(model="multiscale", side=str(self.n), small_side=str(self.spec.small_side),
                           upsampler_width=str(self.spec.upsampler_width))
        for prefix, sub in (("small.", self.spec.unconditional), ("large.", self.spec.conditional)):
            for k, v in sub.to_header().items():
                head[prefix + k] = v
        return head

    def save(self, path):
        checkpoint.save(path, self.state_dict(), self.header())

    def conditioning(self, small_images):
        s = self.spec.small_side
        small_images = np.asarray(small_images)
        if small_images.shape[2:] != (s, s):
            raise ConfigurationError(f"small images must be {s}x{s}, got {small_images.shape[2:]}")
        return self.upsampler(T.Tensor(preprocess(small_images, self.conditional.spec.levels)))

    def nll(self, images):
        """Per-image NLL of the subsampled image plus that of the full image given it."""
        small = subsample(images, self.factor)
        return T.add(self.unconditional.nll(small), self.conditional.nll(images, self.conditioning(small)))


def multiscale_forward(model, batch, small_batch):
    """Conditional-network logits for ``batch`` given its subsampled ``small_batch``."""
    return model.conditional.logits(batch, model.conditioning(small_batch))

