"""Hierarchical patch encoder: 64x64 patch -> 64-d embedding in [-1, 1]."""
from __future__ import annotations

import numpy as np

from pedenet.errors import InvalidArgumentError
from pedenet.numerics import Conv, Tensor, leaky_relu
from pedenet.numerics.tensor import reshape, tanh, transpose

PATCH_SIZE = 64
SUB_PATCH = 32
EMBED_DIM = 64
SLOPE = 0.1

# (out_channels, stride) for the nine layers; the first five form the
# sub-patch encoder, the rest reduce the aggregated 8x8 grid to 1x1.
SMALL_LAYERS = [(32, 2), (64, 2), (128, 1), (128, 2), (64, 1)]
LARGE_LAYERS = [(64, 2), (32, 2), (32, 2)]


def param_count(network) -> int:
    """Total scalar parameters of anything exposing ``param_shapes()``."""
    return int(sum(np.prod(s) for s in network.param_shapes().values()))


class PeNetwork:
    def __init__(self, in_channels: int = 3, embed_dim: int = EMBED_DIM):
        self.embed_dim = embed_dim
        self.small: list[Conv] = []
        c = in_channels
        for i, (f, s) in enumerate(SMALL_LAYERS):
            self.small.append(Conv(f"pe.small{i}", c, f, 3, s, 1, channels_last=True))
            c = f
        self.large: list[Conv] = []
        for i, (f, s) in enumerate(LARGE_LAYERS):
            self.large.append(Conv(f"pe.large{i}", c, f, 3, s, 1, channels_last=True))
            c = f
        self.head = Conv("pe.out", c, embed_dim, k=1, stride=1, padding=0, channels_last=True)

    @property
    def layers(self) -> list[Conv]:
        return self.small + self.large + [self.head]

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        shapes: dict[str, tuple[int, ...]] = {}
        for layer in self.layers:
            shapes.update(layer.param_shapes())
        return shapes

    def init(self, rng: np.random.Generator, dtype) -> dict[str, np.ndarray]:
        params: dict[str, np.ndarray] = {}
        for layer in self.layers:
            params.update(layer.init(rng, dtype))
        return params

    def __call__(self, params: dict[str, Tensor], patches: Tensor) -> Tensor:
        return embed(self, params, patches)


def split_sub_patches(x: Tensor) -> Tensor:
    """(N, 64, 64, C) -> (4N, 32, 32, C), sub-patches in row-major order per patch."""
    n, _, _, c = x.shape
    x = reshape(x, (n, 2, SUB_PATCH, 2, SUB_PATCH, c))
    x = transpose(x, (0, 1, 3, 2, 4, 5))
    return reshape(x, (4 * n, SUB_PATCH, SUB_PATCH, c))


def merge_sub_features(f: Tensor) -> Tensor:
    """(4N, h, w, C) -> (N, 2h, 2w, C), placing each map at its sub-patch position."""
    n4, h, w, c = f.shape
    n = n4 // 4
    f = reshape(f, (n, 2, 2, h, w, c))
    f = transpose(f, (0, 1, 3, 2, 4, 5))
    return reshape(f, (n, 2 * h, 2 * w, c))


def embed(net: PeNetwork, params: dict[str, Tensor], patches: Tensor) -> Tensor:
    """Embed a (N, C, 64, 64) batch into (N, 64); activations run channels-last."""
    if patches.ndim != 4 or patches.shape[2:] != (PATCH_SIZE, PATCH_SIZE):
        raise InvalidArgumentError(f"expected (N, C, 64, 64) patches, got {patches.shape}")
    x = split_sub_patches(transpose(patches, (0, 2, 3, 1)))
    for layer in net.small:
        x = leaky_relu(layer(params, x), SLOPE)
    x = merge_sub_features(x)
    for layer in net.large:
        x = leaky_relu(layer(params, x), SLOPE)
    x = tanh(net.head(params, x))
    return reshape(x, (x.shape[0], net.embed_dim))
