"""Shuffle-style candidate blocks of the architecture search space.

Four candidates per searchable slot: shuffle units with depthwise kernel
3, 5 or 7, and a depthwise-3 triple-stack variant. Stride-1 blocks with
equal channel counts split the input in half, process one half and
re-interleave with a group-2 channel shuffle. Transition blocks (stride
2 and/or a channel change, only ever the first block of a stage)
process the full input on two parallel paths that each end at half the
output width.

Normalization layers keep running statistics frozen at identity (mean
0, var 1) with learnable per-channel scale and shift, so forward passes
are independent of batch composition.
"""

from __future__ import annotations

import numpy as np

from mixtrack import autodiff as ad
from mixtrack.autodiff import Tensor

KIND_NAMES = ("shuffle3", "shuffle5", "shuffle7", "xception3")
KERNEL_OF_KIND = {0: 3, 1: 5, 2: 7, 3: 3}
N_KINDS = len(KIND_NAMES)


def _he_uniform(rng, shape, fan_in):
    limit = np.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, shape)


class Depthwise:
    def __init__(self, k, channels, stride, rng):
        self.stride = stride
        self.w = Tensor(_he_uniform(rng, (k, k, channels), k * k), requires_grad=True)

    def __call__(self, x):
        return ad.depthwise_conv(x, self.w, self.stride)

    def params(self, prefix):
        yield f"{prefix}/dw_w", self.w


class Pointwise:
    def __init__(self, c_in, c_out, rng):
        self.w = Tensor(_he_uniform(rng, (c_in, c_out), c_in), requires_grad=True)

    def __call__(self, x):
        return ad.pointwise_conv(x, self.w)

    def params(self, prefix):
        yield f"{prefix}/pw_w", self.w


class Norm:
    def __init__(self, channels):
        self.gamma = Tensor(np.ones(channels), requires_grad=True)
        self.beta = Tensor(np.zeros(channels), requires_grad=True)

    def __call__(self, x):
        return ad.channel_affine(x, self.gamma, self.beta)

    def params(self, prefix):
        yield f"{prefix}/norm_g", self.gamma
        yield f"{prefix}/norm_b", self.beta


class Relu:
    def __call__(self, x):
        return ad.relu(x)

    def params(self, prefix):
        return iter(())


class Chain:
    """A named sequence of primitive layers."""

    def __init__(self, layers):
        self.layers = list(layers)

    def __call__(self, x):
        for layer in self.layers:
            x = layer(x)
        return x

    def params(self, prefix):
        for i, layer in enumerate(self.layers):
            yield from layer.params(f"{prefix}/l{i}")


def _shuffle_main(k, half, stride, rng):
    return Chain(
        [
            Pointwise(half, half, rng),
            Norm(half),
            Relu(),
            Depthwise(k, half, stride, rng),
            Norm(half),
            Pointwise(half, half, rng),
            Norm(half),
            Relu(),
        ]
    )


def _xception_main(half, rng):
    layers = []
    for _ in range(3):
        layers += [Depthwise(3, half, 1, rng), Norm(half), Pointwise(half, half, rng), Norm(half), Relu()]
    return Chain(layers)


def _shuffle_transition_main(k, c_in, half, stride, rng):
    return Chain(
        [
            Pointwise(c_in, half, rng),
            Norm(half),
            Relu(),
            Depthwise(k, half, stride, rng),
            Norm(half),
            Pointwise(half, half, rng),
            Norm(half),
            Relu(),
        ]
    )


def _xception_transition_main(c_in, half, stride, rng):
    layers = [Depthwise(3, c_in, stride, rng), Norm(c_in), Pointwise(c_in, half, rng), Norm(half), Relu()]
    for _ in range(2):
        layers += [Depthwise(3, half, 1, rng), Norm(half), Pointwise(half, half, rng), Norm(half), Relu()]
    return Chain(layers)


class Block:
    """One search-space candidate: (kind, stride, in/out channels).

    Stride-1 equal-channel blocks use the split/passthrough form; any
    stride-2 or channel-changing block uses the two-path transition form.
    """

    def __init__(self, kind, c_in, c_out, stride, rng):
        if kind not in KERNEL_OF_KIND:
            raise ValueError(f"unknown block kind {kind}")
        if c_out % 2 != 0:
            raise ValueError(f"block output channels must be even, got {c_out}")
        if stride not in (1, 2):
            raise ValueError(f"block stride must be 1 or 2, got {stride}")
        self.kind = kind
        self.c_in = c_in
        self.c_out = c_out
        self.stride = stride
        k = KERNEL_OF_KIND[kind]
        half = c_out // 2
        self.transition = stride == 2 or c_in != c_out
        if self.transition:
            if kind == 3:
                self.main = _xception_transition_main(c_in, half, stride, rng)
            else:
                self.main = _shuffle_transition_main(k, c_in, half, stride, rng)
            self.proj = Chain(
                [Depthwise(k, c_in, stride, rng), Norm(c_in), Pointwise(c_in, half, rng), Norm(half), Relu()]
            )
        else:
            if c_in % 2 != 0:
                raise ValueError(f"split block needs even input channels, got {c_in}")
            self.main = _xception_main(half, rng) if kind == 3 else _shuffle_main(k, half, 1, rng)
            self.proj = None

    def __call__(self, x):
        if self.transition:
            a = self.proj(x)
            b = self.main(x)
            return ad.channel_shuffle(ad.concat_channels([a, b]), 2)
        keep, work = ad.split_channels(x, [self.c_in // 2, self.c_in // 2])
        return ad.channel_shuffle(ad.concat_channels([keep, self.main(work)]), 2)

    def params(self, prefix):
        yield from self.main.params(f"{prefix}/main")
        if self.proj is not None:
            yield from self.proj.params(f"{prefix}/proj")


def make_candidates(c_in, c_out, stride, rng):
    """All four block candidates for one slot, initialized independently."""
    return [Block(kind, c_in, c_out, stride, rng) for kind in range(N_KINDS)]
