"""EPSA channel attention and SA spatial attention."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nn import Conv2d, ConvSpec, Linear, Module, global_avg_pool
from .tensor import ShapeError, Tensor, concat, mean, max_, relu, reshape, sigmoid, softmax, split


@dataclass(frozen=True)
class EpsaSpec:
    channels: int
    kernels: tuple = (3, 5, 7, 9)
    groups: tuple = (1, 4, 8, 16)
    reduction: int = 4

    def __post_init__(self):
        object.__setattr__(self, "kernels", tuple(self.kernels))
        object.__setattr__(self, "groups", tuple(self.groups))
        if len(self.groups) != len(self.kernels):
            raise ShapeError("EPSA needs one group count per branch kernel")
        if self.channels % self.branches:
            raise ShapeError(f"EPSA: {self.channels} channels not divisible by {self.branches} branches")
        for k in self.kernels:
            if k % 2 == 0:
                raise ShapeError(f"EPSA: kernel size {k} must be odd")

    @property
    def branches(self) -> int:
        return len(self.kernels)

    @property
    def branch_width(self) -> int:
        return self.channels // self.branches

    def branch_groups(self, i: int) -> int:
        """Requested group count, capped at the branch width and reduced until it divides it."""
        g = min(self.groups[i], self.branch_width)
        while self.branch_width % g:
            g -= 1
        return g

    @property
    def se_hidden(self) -> int:
        return max(1, self.branch_width // self.reduction)


class EPSA(Module):
    """Pyramid split attention: multi-kernel branches weighted by a cross-branch softmax.

    The SE excitation network is shared by all branches.
    """

    def __init__(self, spec: EpsaSpec, rng: np.random.Generator):
        super().__init__()
        self.spec = spec
        w = spec.branch_width
        self.convs = [
            Conv2d(ConvSpec(w, w, k, 1, k // 2, spec.branch_groups(i)), rng, bias=False)
            for i, k in enumerate(spec.kernels)
        ]
        self.se_reduce = Linear(w, spec.se_hidden, rng)
        self.se_expand = Linear(spec.se_hidden, w, rng)

    def descriptors(self, branch_out: Tensor) -> Tensor:
        return sigmoid(self.se_expand(relu(self.se_reduce(global_avg_pool(branch_out)))))

    def forward_with_weights(self, x: Tensor):
        """Return the block output and the [N, S, C/S] cross-branch weights."""
        if x.ndim != 4 or x.shape[1] != self.spec.channels:
            raise ShapeError(f"EPSA: input {x.shape} does not have {self.spec.channels} channels")
        s, w = self.spec.branches, self.spec.branch_width
        n = x.shape[0]
        parts = split(x, s, axis=1) if s > 1 else [x]
        feats = [conv(p) for conv, p in zip(self.convs, parts)]
        desc = concat([reshape(self.descriptors(f), (n, 1, w)) for f in feats], axis=1)
        weights = softmax(desc, axis=1)
        fused = concat(feats, axis=1) if s > 1 else feats[0]
        out = fused * reshape(weights, (n, s * w, 1, 1))
        return out, weights

    def forward(self, x: Tensor) -> Tensor:
        return self.forward_with_weights(x)[0]


@dataclass(frozen=True)
class SaSpec:
    kernel: int = 7

    def __post_init__(self):
        if self.kernel % 2 == 0:
            raise ShapeError(f"SA: kernel size {self.kernel} must be odd")


class SpatialAttention(Module):
    """Sigmoid mask from channel-mean and channel-max maps, multiplied into x."""

    def __init__(self, spec: SaSpec, rng: np.random.Generator):
        super().__init__()
        self.spec = spec
        self.conv = Conv2d(ConvSpec(2, 1, spec.kernel, 1, spec.kernel // 2), rng)

    def mask(self, x: Tensor) -> Tensor:
        pooled = concat([mean(x, axis=1, keepdims=True), max_(x, axis=1, keepdims=True)], axis=1)
        return sigmoid(self.conv(pooled))

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim != 4:
            raise ShapeError(f"SA: expected NCHW input, got {x.shape}")
        return x * self.mask(x)
