"""Convolutional capsules with locally-constrained dynamic routing.

A capsule grid is carried as an NCHW tensor whose channel axis is the
flattened ``(types, dim)`` pair, type-major. :func:`grid_shape` gives the
``(H, W, T, A)`` view used when talking about the schedule.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .nn import Module, Parameter, he_normal


class ScheduleError(ValueError):
    """Raised when a capsule grid does not match the configured layer."""


def grid_shape(t: Tensor, types: int) -> tuple[int, int, int, int]:
    """(H, W, T, A) of a flattened capsule tensor for one sample."""
    _, c, h, w = t.shape
    if c % types:
        raise ScheduleError(f"{c} channels cannot hold {types} capsule types")
    return (h, w, types, c // types)


def to_capsules(t: Tensor, types: int) -> Tensor:
    n, c, h, w = t.shape
    if c % types:
        raise ScheduleError(f"{c} channels cannot hold {types} capsule types")
    return ad.reshape(t, (n, types, c // types, h, w))


def squash(s: Tensor, axis: int = -1) -> Tensor:
    return ad.squash(s, axis=axis)


def capsule_votes(children: Tensor, transforms: Tensor, child_types: int, parent_types: int,
                  stride: int = 2, allow_small_grid: bool = False) -> Tensor:
    """Map every child capsule in each receptive field to every parent type.

    ``children`` is (N, T_in*A_in, H, W). ``transforms`` has shape
    (T_in*T_out*A_out, A_in, K, K): a grouped convolution with one group per
    child type, so each (child type, parent type) pair owns one kernel that is
    shared over all positions. Returns votes (N, T_in, T_out, A_out, H', W').
    Grids smaller than the kernel are rejected unless ``allow_small_grid``;
    zero padding keeps them well defined, which tiny test models rely on.
    """
    n, c, h, w = children.shape
    if c % child_types:
        raise ScheduleError(f"children have {c} channels, not divisible by {child_types} types")
    a_in = c // child_types
    out_ch, k_in, k, _ = transforms.shape
    if k_in != a_in or out_ch % (child_types * parent_types):
        raise ScheduleError(
            f"transforms {transforms.shape} do not fit {child_types} child types of dim {a_in}"
            f" voting for {parent_types} parent types")
    if (h < k or w < k) and not allow_small_grid:
        raise ScheduleError(f"child grid {h}x{w} smaller than the {k}x{k} kernel")
    a_out = out_ch // (child_types * parent_types)
    flat = ad.conv2d(children, transforms, stride=stride, padding=(k - 1) // 2, groups=child_types)
    _, _, ho, wo = flat.shape
    return ad.reshape(flat, (n, child_types, parent_types, a_out, ho, wo))


@dataclass
class RoutingTrace:
    """Coupling coefficients after each routing iteration, for inspection."""

    couplings: list[np.ndarray]
    logits: list[np.ndarray]


def dynamic_routing(votes: Tensor, iterations: int, trace: RoutingTrace | None = None) -> Tensor:
    """Route votes (N, T_in, T_out, A, H, W) to parents (N, T_out, A, H, W).

    Logits start at zero on every call. Coupling is a softmax over parent
    types, so each child distributes a unit of output. The whole loop stays
    in the graph.
    """
    if iterations < 1:
        raise ValueError(f"routing needs at least one iteration, got {iterations}")
    n, t_in, t_out, _, h, w = votes.shape
    logits = Tensor(np.zeros((n, t_in, t_out, 1, h, w), dtype=votes.dtype))
    v = None
    for it in range(iterations):
        c = ad.softmax(logits, axis=2)
        if trace is not None:
            trace.couplings.append(c.data[:, :, :, 0].copy())
            trace.logits.append(logits.data[:, :, :, 0].copy())
        s = ad.sum(ad.mul(c, votes), axis=1)
        v = ad.squash(s, axis=2)
        if it < iterations - 1:
            agreement = ad.sum(ad.mul(votes, ad.reshape(v, (n, 1, t_out, -1, h, w))), axis=3, keepdims=True)
            logits = ad.add(logits, agreement)
    return v


class ConvCapsuleLayer(Module):
    """Votes by strided 5x5 grouped convolution, then dynamic routing.

    Input: (N, in_types*in_dim, H, W). Output: (N, out_types*out_dim, H/2, W/2).
    """

    def __init__(self, in_types: int, in_dim: int, out_types: int, out_dim: int,
                 routing: int = 3, kernel: int = 5, stride: int = 2, rng=None, dtype=np.float32,
                 allow_small_grid: bool = False):
        super().__init__()
        self.allow_small_grid = allow_small_grid
        self.in_types, self.in_dim = in_types, in_dim
        self.out_types, self.out_dim = out_types, out_dim
        self.routing = routing
        self.stride = stride
        fan_in = in_dim * kernel * kernel
        self.transforms = Parameter(he_normal(rng, (in_types * out_types * out_dim, in_dim, kernel, kernel),
                                              fan_in, dtype, gain=1.0))

    def votes(self, x: Tensor) -> Tensor:
        self._check(x)
        return capsule_votes(x, self.transforms, self.in_types, self.out_types, self.stride, self.allow_small_grid)

    def _check(self, x: Tensor) -> None:
        if x.ndim != 4 or x.shape[1] != self.in_types * self.in_dim:
            raise ScheduleError(
                f"capsule layer expects {self.in_types}x{self.in_dim} input capsules, got tensor {x.shape}")

    def forward(self, x: Tensor, trace: RoutingTrace | None = None) -> Tensor:
        v = dynamic_routing(self.votes(x), self.routing, trace)
        n, t, a, h, w = v.shape
        return ad.reshape(v, (n, t * a, h, w))
