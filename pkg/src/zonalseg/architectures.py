"""U-Net and its squeeze-and-excitation variants.

Three variants share one encoder/decoder skeleton:

* ``unet``        plain U-Net;
* ``enc_use``     an SE block after every down-path encoder block;
* ``enc_dec_use`` an SE block after every encoder, the bottleneck and every
  decoder block (``2 * depth + 1`` sites).

Every block is two (3x3 conv -> ReLU) stages. The head is a 1x1 convolution
followed by a sigmoid, predicting the central gland probability.
"""

from __future__ import annotations

import hashlib
import json
from collections import OrderedDict
from dataclasses import asdict, dataclass, field

import numpy as np

from .array_core import (
    ShapeError,
    Tensor,
    channel_scale,
    concat_channels,
    conv2d,
    dense,
    global_avg_pool,
    max_pool_2x2,
    relu,
    sigmoid,
    upsample_block,
)

VARIANTS = ("unet", "enc_use", "enc_dec_use")


class ArchitectureError(ValueError):
    pass


@dataclass(frozen=True)
class SEBlockSpec:
    channels: int
    reduction: int = 8

    def __post_init__(self):
        if self.channels < 1 or self.reduction < 1:
            raise ArchitectureError("SE channels and reduction must be positive")
        if self.channels % self.reduction:
            raise ArchitectureError(
                f"SE block with {self.channels} channels is not divisible by reduction {self.reduction}"
            )

    @property
    def hidden(self):
        return self.channels // self.reduction

    @property
    def weight_count(self):
        return 2 * self.channels * self.hidden


@dataclass(frozen=True)
class ModelSpec:
    variant: str = "enc_dec_use"
    depth: int = 4
    base_width: int = 8
    se_reduction: int = 8
    in_channels: int = 1

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ArchitectureError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.depth < 1:
            raise ArchitectureError("depth must be >= 1")
        if self.base_width < 1 or self.se_reduction < 1 or self.in_channels < 1:
            raise ArchitectureError("widths and reduction must be positive")

    def width(self, level):
        return self.base_width * 2**level

    def se_sites(self):
        """Ordered ``(site name, channels)`` for every SE block of the variant."""
        sites = []
        if self.variant in ("enc_use", "enc_dec_use"):
            sites += [(f"enc{i}", self.width(i)) for i in range(self.depth)]
        if self.variant == "enc_dec_use":
            sites.append(("bottleneck", self.width(self.depth)))
            sites += [(f"dec{i}", self.width(i)) for i in reversed(range(self.depth))]
        return sites

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class ModelState:
    spec: ModelSpec
    seed: int
    weights: "OrderedDict[str, Tensor]" = field(default_factory=OrderedDict)

    def parameter_count(self):
        return int(sum(t.data.size for t in self.weights.values()))

    def parameters(self):
        return list(self.weights.values())

    def se_site_names(self):
        return sorted({name.split(".")[0] for name in self.weights if ".se_w" in name})

    def checksum(self):
        h = hashlib.sha256()
        for name, t in self.weights.items():
            h.update(name.encode())
            h.update(np.ascontiguousarray(t.data).tobytes())
        return h.hexdigest()

    def copy(self):
        return ModelState(
            self.spec,
            self.seed,
            OrderedDict((k, Tensor(v.data.copy(), requires_grad=v.requires_grad, name=k)) for k, v in self.weights.items()),
        )

    def astype(self, dtype):
        return ModelState(
            self.spec,
            self.seed,
            OrderedDict((k, Tensor(v.data.astype(dtype), requires_grad=v.requires_grad, name=k)) for k, v in self.weights.items()),
        )


def se_block_forward(U, w1, w2):
    """Squeeze-and-excitation recalibration of a feature map.

    Parameters
    ----------
    U : Tensor
        Feature map of shape (batch, F, H, W).
    w1 : Tensor
        First excitation weights, shape (F, F // r). Applied as ``z @ w1``,
        i.e. this is the transpose of the column-vector matrix W1.
    w2 : Tensor
        Second excitation weights, shape (F // r, F).

    Returns
    -------
    (Tensor, Tensor)
        The rescaled map and the per-channel gates ``s`` in [0, 1].
    """
    if U.shape[1] != w1.shape[0] or w1.shape[1] != w2.shape[0] or w2.shape[1] != U.shape[1]:
        raise ShapeError(f"SE block: feature map {U.shape} does not conform to weights {w1.shape}, {w2.shape}")
    z = global_avg_pool(U)
    s = sigmoid(dense(relu(dense(z, w1)), w2))
    return channel_scale(U, s), s


def _conv_init(rng, c_out, c_in, k, dtype):
    std = np.sqrt(2.0 / (c_in * k * k))
    return rng.standard_normal((c_out, c_in, k, k)).astype(dtype) * std


def build_model(spec, seed=0, dtype=np.float64):
    """Create deterministic initial weights for ``spec``.

    Kernels are drawn from a fan-in scaled normal distribution, biases start
    at zero. Weights are created in a fixed order so equal seeds give
    bit-identical states.
    """
    for site, channels in spec.se_sites():
        if channels % spec.se_reduction:
            raise ArchitectureError(
                f"SE site {site!r} has {channels} channels, not divisible by reduction {spec.se_reduction}"
            )
    rng = np.random.default_rng(seed)
    w = OrderedDict()
    se_names = {name for name, _ in spec.se_sites()}

    def block(name, c_in, c_out):
        w[f"{name}.conv1.kernel"] = _conv_init(rng, c_out, c_in, 3, dtype)
        w[f"{name}.conv1.bias"] = np.zeros(c_out, dtype)
        w[f"{name}.conv2.kernel"] = _conv_init(rng, c_out, c_out, 3, dtype)
        w[f"{name}.conv2.bias"] = np.zeros(c_out, dtype)
        if name in se_names:
            hidden = c_out // spec.se_reduction
            w[f"{name}.se_w1"] = rng.standard_normal((c_out, hidden)).astype(dtype) * np.sqrt(2.0 / c_out)
            w[f"{name}.se_w2"] = rng.standard_normal((hidden, c_out)).astype(dtype) * np.sqrt(1.0 / hidden)

    c_in = spec.in_channels
    for i in range(spec.depth):
        block(f"enc{i}", c_in, spec.width(i))
        c_in = spec.width(i)
    block("bottleneck", c_in, spec.width(spec.depth))
    for i in reversed(range(spec.depth)):
        c_up = spec.width(i + 1)
        c_out = spec.width(i)
        w[f"dec{i}.up.kernel"] = rng.standard_normal((c_up, c_out, 2, 2)).astype(dtype) * np.sqrt(1.0 / c_up)
        w[f"dec{i}.up.bias"] = np.zeros(c_out, dtype)
        block(f"dec{i}", 2 * c_out, c_out)
    w["head.kernel"] = _conv_init(rng, 1, spec.base_width, 1, dtype)
    w["head.bias"] = np.zeros(1, dtype)

    weights = OrderedDict((k, Tensor(v, requires_grad=True, name=k)) for k, v in w.items())
    return ModelState(spec, seed, weights)


def forward(state, batch, bypass_se=False, se_probe=None):
    """Run the network on ``batch`` of shape (batch, C, H, W).

    Returns the (batch, 1, H, W) sigmoid probability map. With ``bypass_se``
    every SE block is replaced by an identity pass-through. ``se_probe``, if
    given, is called with ``(site, gates)`` after each SE scale step.
    """
    spec = state.spec
    x = batch if isinstance(batch, Tensor) else Tensor(batch)
    if x.ndim != 4 or x.shape[1] != spec.in_channels:
        raise ShapeError(f"forward: expected (batch, {spec.in_channels}, H, W), got {x.shape}")
    h, wd = x.shape[2:]
    if h % 2**spec.depth or wd % 2**spec.depth:
        raise ShapeError(f"forward: spatial size {h}x{wd} not divisible by 2**depth = {2**spec.depth}")
    W = state.weights

    def block(name, t):
        t = relu(conv2d(t, W[f"{name}.conv1.kernel"], W[f"{name}.conv1.bias"]))
        t = relu(conv2d(t, W[f"{name}.conv2.kernel"], W[f"{name}.conv2.bias"]))
        if f"{name}.se_w1" in W and not bypass_se:
            t, s = se_block_forward(t, W[f"{name}.se_w1"], W[f"{name}.se_w2"])
            if se_probe is not None:
                se_probe(name, s.data)
        return t

    skips = []
    for i in range(spec.depth):
        x = block(f"enc{i}", x)
        skips.append(x)
        x = max_pool_2x2(x)
    x = block("bottleneck", x)
    for i in reversed(range(spec.depth)):
        x = upsample_block(x, W[f"dec{i}.up.kernel"], W[f"dec{i}.up.bias"])
        x = concat_channels(skips[i], x)
        x = block(f"dec{i}", x)
    x = conv2d(x, W["head.kernel"], W["head.bias"])
    return sigmoid(x)


# --------------------------------------------------------------------------
# checkpoints
#
# A checkpoint is an uncompressed NumPy ``.npz`` archive (a zip of ``.npy``
# members, little-endian). Each weight is stored under its own name; the
# member ``__meta__`` holds a UTF-8 JSON document encoded as uint8 with the
# keys ``format``, ``spec``, ``seed``, ``names`` and ``extra``.

CHECKPOINT_FORMAT = "zonalseg-checkpoint/1"


def save_checkpoint(state, path, extra=None):
    meta = {
        "format": CHECKPOINT_FORMAT,
        "spec": asdict(state.spec),
        "seed": int(state.seed),
        "names": list(state.weights),
        "extra": extra or {},
    }
    arrays = {name: t.data.astype(t.data.dtype.newbyteorder("<")) for name, t in state.weights.items()}
    arrays["__meta__"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path):
    with np.load(path, allow_pickle=False) as z:
        meta = json.loads(bytes(z["__meta__"]).decode())
        if meta.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"{path}: not a checkpoint (format {meta.get('format')!r})")
        weights = OrderedDict((n, Tensor(z[n].copy(), requires_grad=True, name=n)) for n in meta["names"])
    return ModelState(ModelSpec.from_dict(meta["spec"]), meta["seed"], weights)
