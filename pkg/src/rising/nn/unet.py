"""Residual U-Net with additive level skips and a global input-to-output residual.

The convolutional path sees ``2x - 1``. The global residual enters before the
final ``tanh`` through the inverse of the output map,
``r = atanh((1 - margin) * (2 * clip(x, 0, 1) - 1))``, so the network returns
``(tanh(head(features) + r) + 1) / 2``: outputs lie in ``[0, 1]`` and a zero
head passes the (slightly range-compressed) input straight through.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .layers import Conv2d, MaxPool2d, ReLU, Tanh, TapeError, Upsample2d, check_tensor4


@dataclass(frozen=True)
class NetworkSpec:
    levels: int = 3
    base_channels: int = 16
    convs_per_level: int = 2
    kernel_size: int = 3
    residual_margin: float = 0.01

    def __post_init__(self):
        if self.levels < 1:
            raise ValueError("levels must be >= 1")
        if self.base_channels < 1 or self.convs_per_level < 1:
            raise ValueError("base_channels and convs_per_level must be >= 1")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ValueError("kernel_size must be a positive odd integer")
        if not 0 < self.residual_margin < 1:
            raise ValueError("residual_margin must lie in (0, 1)")

    def channels(self, level: int) -> int:
        return self.base_channels * 2 ** level

    def parameter_count(self) -> int:
        k2 = self.kernel_size ** 2

        def conv(cin, cout, ksq=k2):
            return cin * cout * ksq + cout

        total = 0
        cin = 1
        for level in range(self.levels + 1):
            c = self.channels(level)
            total += conv(cin, c) + (self.convs_per_level - 1) * conv(c, c)
            cin = c
        for level in range(self.levels):
            c = self.channels(level)
            total += conv(self.channels(level + 1), c) + self.convs_per_level * conv(c, c)
        return total + conv(self.channels(0), 1, 1)

    def to_dict(self) -> dict:
        return asdict(self)


class _Block:
    """``convs_per_level`` conv+ReLU pairs."""

    def __init__(self, prefix, cin, cout, spec: NetworkSpec, dtype, first_name="conv0"):
        self.pairs = []
        for i in range(spec.convs_per_level):
            name = f"{prefix}.{first_name}" if i == 0 else f"{prefix}.conv{i}"
            self.pairs.append((Conv2d(cin if i == 0 else cout, cout, spec.kernel_size, name, dtype), ReLU()))

    def forward(self, h):
        for conv, relu in self.pairs:
            h = relu.forward(conv.forward(h))
        return h

    def backward(self, g):
        for conv, relu in reversed(self.pairs):
            g = conv.backward(relu.backward(g))
        return g

    def convs(self):
        return [conv for conv, _ in self.pairs]


class ResUNet:
    """Encoder/decoder network operating on ``(batch, 1, H, W)`` arrays.

    Parameters
    ----------
    spec : NetworkSpec
    init_seed : int
        Seed of the Kaiming-uniform weight initialisation. Biases and the
        1x1 head start at zero, so an untrained network is the pass-through.
    dtype : numpy dtype
        ``float32`` for training, ``float64`` for gradient checks.
    """

    def __init__(self, spec: NetworkSpec = NetworkSpec(), init_seed: int = 0, dtype=np.float32):
        self.spec = spec
        self.init_seed = init_seed
        self.dtype = np.dtype(dtype)
        L = spec.levels
        self.encoder = []
        cin = 1
        for level in range(L):
            self.encoder.append(_Block(f"enc{level}", cin, spec.channels(level), spec, dtype))
            cin = spec.channels(level)
        self.pools = [MaxPool2d() for _ in range(L)]
        self.bottom = _Block("bottom", cin, spec.channels(L), spec, dtype)
        self.ups = [Upsample2d() for _ in range(L)]
        self.up_convs = []
        self.decoder = []
        for level in range(L):
            c = spec.channels(level)
            self.up_convs.append((Conv2d(spec.channels(level + 1), c, spec.kernel_size, f"dec{level}.up", dtype), ReLU()))
            self.decoder.append(_Block(f"dec{level}", c, c, spec, dtype))
        self.head = Conv2d(spec.channels(0), 1, 1, "head", dtype)
        self.tanh = Tanh()
        self._initialize()

    def convs(self) -> list[Conv2d]:
        out = []
        for block in self.encoder:
            out += block.convs()
        out += self.bottom.convs()
        for (up, _), block in zip(self.up_convs, self.decoder):
            out += [up] + block.convs()
        return out + [self.head]

    def _initialize(self):
        rng = np.random.default_rng(self.init_seed)
        for conv in self.convs():
            fan_in = conv.weight.shape[1] * conv.weight.shape[2] * conv.weight.shape[3]
            bound = math.sqrt(6.0 / fan_in)
            conv.weight[...] = rng.uniform(-bound, bound, size=conv.weight.shape)
            conv.bias[...] = 0
        # start from the residual pass-through
        self.head.weight[...] = 0

    def parameters(self) -> dict[str, np.ndarray]:
        params = {}
        for conv in self.convs():
            params.update(conv.parameters())
        return params

    def gradients(self) -> dict[str, np.ndarray]:
        grads = {}
        for conv in self.convs():
            if not conv.grads:
                raise TapeError(f"{conv.name}: no gradient available, run backward first")
            grads.update(conv.grads)
        return grads

    def load_parameters(self, params: dict[str, np.ndarray]) -> None:
        own = self.parameters()
        missing = set(own) - set(params)
        if missing:
            raise KeyError(f"missing parameters: {sorted(missing)}")
        for name, value in own.items():
            if params[name].shape != value.shape:
                raise ValueError(f"{name}: shape {params[name].shape} != {value.shape}")
            value[...] = params[name]

    def _check_input(self, x):
        x = check_tensor4(x)
        if x.shape[1] != 1:
            raise ValueError(f"expected single-channel input, got {x.shape[1]} channels")
        m = 2 ** self.spec.levels
        if x.shape[2] % m or x.shape[3] % m:
            raise ValueError(f"input size {x.shape[2]}x{x.shape[3]} not divisible by 2^levels = {m}")
        return np.asarray(x, dtype=self.dtype)

    def forward(self, x: np.ndarray) -> np.ndarray:
        x = self._check_input(x)
        h = 2 * x - 1
        s = (1 - self.spec.residual_margin) * (2 * np.clip(x, 0, 1) - 1)
        r = np.arctanh(s)
        self._residual_cache = (s, (x >= 0) & (x <= 1))
        skips = []
        for block, pool in zip(self.encoder, self.pools):
            h = block.forward(h)
            skips.append(h)
            h = pool.forward(h)
        h = self.bottom.forward(h)
        # decoder runs from the coarsest level up; skips are the pre-pool encoder features
        for level in reversed(range(self.spec.levels)):
            conv, relu = self.up_convs[level]
            h = relu.forward(conv.forward(self.ups[level].forward(h)))
            h = self.decoder[level].forward(h + skips[level])
        z = self.head.forward(h) + r
        return (self.tanh.forward(z) + 1) / 2

    def passthrough(self, x: np.ndarray) -> np.ndarray:
        """Output of the network when the head is zero."""
        return (1 - self.spec.residual_margin) * (np.clip(x, 0, 1) - 0.5) + 0.5

    def backward(self, grad: np.ndarray) -> np.ndarray:
        """Backpropagate ``d loss / d output``; fills per-layer gradients and returns ``d loss / d x``."""
        g = self.tanh.backward(np.asarray(grad, dtype=self.dtype) / 2)
        s, inside = self._residual_cache
        g_x = g * inside * (2 * (1 - self.spec.residual_margin) / (1 - s * s))
        g = self.head.backward(g)
        skip_grads = {}
        for level in range(self.spec.levels):
            g = self.decoder[level].backward(g)
            skip_grads[level] = g
            conv, relu = self.up_convs[level]
            g = self.ups[level].backward(conv.backward(relu.backward(g)))
        g = self.bottom.backward(g)
        for level in reversed(range(self.spec.levels)):
            g = self.pools[level].backward(g) + skip_grads[level]
            g = self.encoder[level].backward(g)
        return 2 * g + g_x

    def predict(self, x: np.ndarray, batch_size: int = 16) -> np.ndarray:
        """Forward pass in batches without keeping the backward tape."""
        outs = []
        for start in range(0, len(x), batch_size):
            outs.append(self.forward(x[start : start + batch_size]))
            self.clear()
        return np.concatenate(outs, axis=0)

    def clear(self) -> None:
        self._residual_cache = None
        for conv in self.convs():
            conv._cache = None
        for layer in [*self.pools, *self.ups, self.tanh]:
            layer._cache = None
        for block in [*self.encoder, self.bottom, *self.decoder]:
            for _, relu in block.pairs:
                relu._cache = None
        for _, relu in self.up_convs:
            relu._cache = None
