"""Hybrid infection / lung / edge loss and the edge ground truth it needs."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 0.7
    beta: float = 0.3
    gamma: float = 1.0

    def __post_init__(self):
        if min(self.alpha, self.beta, self.gamma) < 0:
            raise ValueError(f"loss weights must be non-negative, got {self}")


def bce(logits: Tensor, targets, weight=None) -> Tensor:
    """Summed BCE between sigmoid(logits) and binary targets."""
    return ad.bce_with_logits(logits, np.asarray(targets), weight)


def _shift_stack(padded: np.ndarray, h: int, w: int) -> np.ndarray:
    return np.stack([padded[..., i:i + h, j:j + w] for i in range(3) for j in range(3)])


def dilate(mask: np.ndarray) -> np.ndarray:
    m = np.asarray(mask, dtype=bool)
    h, w = m.shape[-2:]
    pad = [(0, 0)] * (m.ndim - 2) + [(1, 1), (1, 1)]
    return _shift_stack(np.pad(m, pad, constant_values=False), h, w).any(axis=0)


def erode(mask: np.ndarray) -> np.ndarray:
    m = np.asarray(mask, dtype=bool)
    h, w = m.shape[-2:]
    pad = [(0, 0)] * (m.ndim - 2) + [(1, 1), (1, 1)]
    return _shift_stack(np.pad(m, pad, constant_values=False), h, w).all(axis=0)


def morphological_gradient(mask: np.ndarray) -> np.ndarray:
    """Dilation minus erosion with a 3x3 square; outside the image counts as background.

    Works on the last two axes, so batches of masks are fine.
    """
    return dilate(mask) & ~erode(mask)


def class_targets(labels: np.ndarray, num_classes: int) -> np.ndarray:
    """Per-channel binary targets (N, C, H, W) from a (N, H, W) label map.

    Binary mode treats any nonzero label as infection; two-class mode splits
    label 1 (GGO) and label 2 (CON).
    """
    labels = np.asarray(labels)
    if labels.ndim == 4:
        labels = labels[:, 0]
    if num_classes == 1:
        return (labels > 0)[:, None].astype(np.float64)
    return np.stack([labels == 1, labels == 2], axis=1).astype(np.float64)


def hybrid_loss(out, infection_gt, lung_gt=None, weights: LossWeights | None = None,
                lung_available=None) -> tuple[Tensor, dict[str, Tensor]]:
    """alpha*L_inf + beta*L_lung + gamma*L_edge over a batch.

    ``infection_gt`` is a label map (N, H, W). ``lung_gt`` may be None, in
    which case the lung term is skipped; ``lung_available`` (N,) switches
    the lung term off for individual samples.
    """
    weights = weights or LossWeights()
    num_classes = out.infection_logits.shape[1]
    inf_t = class_targets(infection_gt, num_classes)
    edge_t = morphological_gradient(inf_t.astype(bool)).astype(np.float64)
    l_inf = bce(out.infection_logits, inf_t)
    l_edge = bce(out.edge_logits, edge_t)
    if lung_gt is None:
        warnings.warn("no lung masks supplied; lung loss term skipped", stacklevel=2)
        l_lung = Tensor(np.zeros((), dtype=out.lung_logits.dtype))
    else:
        lung = np.asarray(lung_gt, dtype=np.float64)
        if lung.ndim == 3:
            lung = lung[:, None]
        sample_w = None
        if lung_available is not None:
            avail = np.asarray(lung_available, dtype=bool)
            if not avail.all():
                warnings.warn(f"lung loss disabled for {int((~avail).sum())} sample(s) without lung masks",
                              stacklevel=2)
            sample_w = avail.astype(np.float64)[:, None, None, None]
            lung = np.where(avail[:, None, None, None], lung, 0.0)
        l_lung = bce(out.lung_logits, lung, sample_w)
    components = {"inf": l_inf, "lung": l_lung, "edge": l_edge}
    return combine(components, weights), components


def combine(components: dict[str, Tensor], weights: LossWeights) -> Tensor:
    total = ad.scale(components["inf"], weights.alpha)
    total = ad.add(total, ad.scale(components["lung"], weights.beta))
    return ad.add(total, ad.scale(components["edge"], weights.gamma))
