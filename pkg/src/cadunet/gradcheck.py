"""Central finite-difference checks of the analytic gradients.

Outputs are reduced to a scalar with a fixed random projection, so every
output element contributes. Small cases perturb every input element; large
ones (the end-to-end model) compare directional derivatives along random
unit directions instead. A perturbation whose two sides take different
relu or max-pool branches than the base point straddles a kink, where the
difference quotient means nothing; such perturbations are skipped and
counted, and skipped directions are redrawn.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

DEFAULT_STEP = 1e-5
DEFAULT_TOL = 1e-4
# gradients below this magnitude are compared in absolute terms
ABS_FLOOR = 1e-8
MAX_REDRAWS = 20


@dataclass
class GradcheckReport:
    name: str
    seed: int
    max_rel_err: float
    checks: int
    tol: float = DEFAULT_TOL
    worst: str = ""
    per_input: dict[str, float] = field(default_factory=dict)
    # perturbations that crossed a relu or max-pool switch and were left out
    skipped: int = 0

    @property
    def passed(self) -> bool:
        return bool(self.max_rel_err < self.tol)


def _rel(a, n) -> np.ndarray:
    a, n = np.asarray(a), np.asarray(n)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), ABS_FLOOR)


def gradcheck(fn: Callable[..., Tensor], inputs, seed: int = 0, params=(), h: float = DEFAULT_STEP,
              tol: float = DEFAULT_TOL, directions: int | None = None, name: str = "op") -> GradcheckReport:
    """Compare backward() against central differences at float64.

    ``inputs`` is a list of arrays or shapes (shapes are filled with standard
    normals from ``seed``). ``params`` are extra tensors, e.g. module weights,
    perturbed in place. ``directions=None`` checks every element; an integer
    checks that many random directional derivatives instead. Failures are
    reported, never raised.
    """
    rng = np.random.default_rng(seed)
    arrays = [rng.standard_normal(x) if isinstance(x, (tuple, list)) else np.array(x, dtype=np.float64)
              for x in inputs]
    leaves = [Tensor(a, requires_grad=True) for a in arrays] + list(params)
    labels = [f"input{i}" for i in range(len(arrays))] + [p.name or f"param{i}" for i, p in enumerate(params)]
    for p in params:
        if p.dtype != np.float64:
            raise TypeError("gradcheck needs float64 parameters")
    projection = None

    def scalar() -> Tensor:
        nonlocal projection
        out = fn(*leaves[:len(arrays)])
        if projection is None:
            projection = np.random.default_rng(seed + 7919).standard_normal(out.shape)
        return ad.sum(ad.mul(out, Tensor(projection)))

    with ad.checked():
        for leaf in leaves:
            leaf.grad = None
        with ad.record_branches() as base:
            loss = scalar()
        analytic = ad.backward(loss, leaves)

        def value(reference) -> tuple[float, bool]:
            with ad.record_branches() as branches:
                v = float(scalar().data)
            same = len(branches) == len(reference) and all(
                np.array_equal(a, b) for a, b in zip(branches, reference))
            return v, same

        worst, worst_label, checks, skipped = 0.0, "", 0, 0
        per_input: dict[str, float] = {}
        if directions is None:
            for leaf, grad, label in zip(leaves, analytic, labels):
                flat = leaf.data.reshape(-1)
                num = np.full(flat.size, np.nan)
                for i in range(flat.size):
                    orig = flat[i]
                    flat[i] = orig + h
                    up, ok_up = value(base)
                    flat[i] = orig - h
                    down, ok_down = value(base)
                    flat[i] = orig
                    if ok_up and ok_down:
                        num[i] = (up - down) / (2 * h)
                valid = ~np.isnan(num)
                skipped += int((~valid).sum())
                errs = np.zeros(flat.size)
                errs[valid] = _rel(grad.reshape(-1)[valid], num[valid])
                checks += int(valid.sum())
                per_input[label] = float(errs.max()) if errs.size else 0.0
                if per_input[label] > worst:
                    worst = per_input[label]
                    worst_label = f"{label}[{int(errs.argmax())}]"
        else:
            drng = np.random.default_rng(seed + 104729)
            origs = [leaf.data.copy() for leaf in leaves]
            while checks < directions and skipped < MAX_REDRAWS * directions:
                dirs = [drng.standard_normal(leaf.shape) for leaf in leaves]
                norm = np.sqrt(sum(float((d * d).sum()) for d in dirs))
                dirs = [d / norm for d in dirs]
                for leaf, d, o in zip(leaves, dirs, origs):
                    leaf.data[...] = o + h * d
                up, ok_up = value(base)
                for leaf, d, o in zip(leaves, dirs, origs):
                    leaf.data[...] = o - h * d
                down, ok_down = value(base)
                for leaf, o in zip(leaves, origs):
                    leaf.data[...] = o
                if not (ok_up and ok_down):
                    skipped += 1
                    continue
                numeric = (up - down) / (2 * h)
                exact = sum(float((g * d).sum()) for g, d in zip(analytic, dirs))
                err = float(_rel(exact, numeric))
                per_input[f"direction{checks}"] = err
                if err > worst:
                    worst, worst_label = err, f"direction{checks}"
                checks += 1
            if checks < directions:
                # too few smooth directions to say anything
                worst, worst_label = float("inf"), "no smooth directions"
    return GradcheckReport(name, seed, worst, checks, tol, worst_label, per_input, skipped)


# ----------------------------------------------------------------------
# registry of checked ops and blocks


def _f64(module, seed: int):
    """Cast to float64 and move batch-norm affines off their 1/0 defaults.

    With beta = 0 a channel that sees all-zero input sits exactly on the
    following relu's kink, where no derivative exists.
    """
    module.astype(np.float64)
    rng = np.random.default_rng(seed + 31)
    for name, p in module.named_parameters():
        if name.endswith("gamma"):
            p.data[...] = rng.uniform(0.5, 1.5, p.shape)
        elif name.endswith("beta"):
            p.data[...] = rng.normal(0.0, 0.2, p.shape)
    return module


def _case_conv(seed):
    return dict(fn=lambda x, w: ad.conv2d(x, w, stride=1, padding=1), inputs=[(1, 2, 5, 5), (3, 2, 3, 3)])


def _case_conv_strided(seed):
    return dict(fn=lambda x, w, b: ad.conv2d(x, w, b, stride=2, padding=2, groups=2),
                inputs=[(2, 4, 6, 6), (6, 2, 5, 5), (6,)])


def _case_conv_pointwise(seed):
    return dict(fn=lambda x, w, b: ad.conv2d(x, w, b), inputs=[(2, 3, 4, 4), (2, 3, 1, 1), (2,)])


def _case_maxpool(seed):
    return dict(fn=ad.maxpool2, inputs=[(2, 2, 4, 6)])


def _case_upsample(seed):
    return dict(fn=ad.upsample2, inputs=[(1, 2, 3, 4)])


def _case_batchnorm_train(seed):
    def fn(x, g, b):
        return ad.batchnorm(x, g, b, np.zeros(3), np.ones(3), training=True)
    return dict(fn=fn, inputs=[(2, 3, 3, 3), (3,), (3,)])


def _case_batchnorm_eval(seed):
    rng = np.random.default_rng(seed + 1)
    mean, var = rng.standard_normal(3), rng.uniform(0.5, 2, 3)
    return dict(fn=lambda x, g, b: ad.batchnorm(x, g, b, mean, var, training=False), inputs=[(2, 3, 3, 3), (3,), (3,)])


def _case_relu(seed):
    return dict(fn=ad.relu, inputs=[(3, 4)])


def _case_sigmoid(seed):
    return dict(fn=ad.sigmoid, inputs=[(3, 4)])


def _case_add(seed):
    return dict(fn=ad.add, inputs=[(2, 3, 4), (2, 1, 4)])


def _case_mul(seed):
    return dict(fn=ad.mul, inputs=[(2, 3, 4), (2, 1, 4)])


def _case_scale(seed):
    return dict(fn=lambda x: ad.scale(x, -1.7), inputs=[(2, 3)])


def _case_concat(seed):
    return dict(fn=lambda a, b: ad.concat_channels([a, b]), inputs=[(1, 2, 3, 3), (1, 3, 3, 3)])


def _case_sum(seed):
    return dict(fn=lambda x: ad.sum(x, axis=1, keepdims=True), inputs=[(2, 3, 4)])


def _case_softmax(seed):
    return dict(fn=lambda x: ad.softmax(x, axis=1), inputs=[(2, 4, 3)])


def _case_squash(seed):
    return dict(fn=lambda s: ad.squash(s, axis=-1), inputs=[(5, 8)])


def _case_bce(seed):
    rng = np.random.default_rng(seed + 3)
    targets = (rng.random((2, 1, 4, 4)) < 0.5).astype(float)
    weight = rng.uniform(0, 2, (2, 1, 1, 1))
    return dict(fn=lambda z: ad.bce_with_logits(z, targets, weight), inputs=[(2, 1, 4, 4)])


def _case_routing(seed):
    from .capsules import dynamic_routing
    return dict(fn=lambda u: dynamic_routing(u, 3), inputs=[(1, 3, 2, 4, 2, 2)])


def _case_capsule_layer(seed):
    from .capsules import ConvCapsuleLayer
    layer = _f64(ConvCapsuleLayer(2, 3, 2, 4, routing=3, rng=np.random.default_rng(seed)), seed)
    return dict(fn=layer, inputs=[(1, 6, 6, 6)], params=layer.parameters())


def _case_resblock(seed):
    from .blocks import ResBlock
    block = _f64(ResBlock(2, 3, rng=np.random.default_rng(seed)), seed)
    return dict(fn=block, inputs=[(2, 2, 4, 4)], params=block.parameters())


def _case_attention(seed):
    from .blocks import AttentionGate
    gate = _f64(AttentionGate(3, 2, 2, rng=np.random.default_rng(seed)), seed)
    return dict(fn=gate, inputs=[(2, 3, 4, 4), (2, 2, 4, 4)], params=gate.parameters())


def _case_coupling(seed):
    from .blocks import Coupling
    couple = _f64(Coupling(4, 3, rng=np.random.default_rng(seed)), seed)
    return dict(fn=lambda out, caps: couple(out, caps)[0], inputs=[(2, 3, 4, 4), (2, 4, 4, 4)],
                params=couple.parameters())


def _case_hybrid_loss(seed):
    from .losses import hybrid_loss
    from .model import ModelOutput
    rng = np.random.default_rng(seed + 5)
    labels = rng.integers(0, 3, (2, 6, 6))
    lung = (rng.random((2, 6, 6)) < 0.7).astype(np.uint8)

    def fn(inf, lung_logits, edge):
        return hybrid_loss(ModelOutput(inf, lung_logits, edge), labels, lung)[0]

    return dict(fn=fn, inputs=[(2, 2, 6, 6), (2, 1, 6, 6), (2, 2, 6, 6)])


def _case_model(seed):
    from .losses import hybrid_loss
    from .model import CADUnet, ModelConfig
    model = _f64(CADUnet(ModelConfig.micro(), seed=seed, dtype=np.float64), seed)
    rng = np.random.default_rng(seed + 11)
    # batch of 4 as in training; with 2 the 1x1 bottleneck normalizes pairs
    labels = (rng.random((4, 16, 16)) < 0.3).astype(np.uint8)
    lung = np.ones((4, 16, 16), dtype=np.uint8)

    def fn(x):
        return hybrid_loss(model(x), labels, lung)[0]

    return dict(fn=fn, inputs=[(4, 1, 16, 16)], params=model.parameters(), directions=6, tol=1e-3)


OPS: dict[str, Callable[[int], dict]] = {
    "conv2d": _case_conv,
    "conv2d_strided_grouped": _case_conv_strided,
    "conv2d_pointwise": _case_conv_pointwise,
    "maxpool2": _case_maxpool,
    "upsample2": _case_upsample,
    "batchnorm_train": _case_batchnorm_train,
    "batchnorm_eval": _case_batchnorm_eval,
    "relu": _case_relu,
    "sigmoid": _case_sigmoid,
    "add": _case_add,
    "mul": _case_mul,
    "scale": _case_scale,
    "concat_channels": _case_concat,
    "sum": _case_sum,
    "softmax": _case_softmax,
    "squash": _case_squash,
    "bce": _case_bce,
}

BLOCKS: dict[str, Callable[[int], dict]] = {
    "dynamic_routing_r3": _case_routing,
    "conv_capsule_layer_r3": _case_capsule_layer,
    "resblock": _case_resblock,
    "attention_gate": _case_attention,
    "couple": _case_coupling,
    "hybrid_loss": _case_hybrid_loss,
    "model_micro": _case_model,
}


def run_case(name: str, seed: int) -> GradcheckReport:
    builder = {**OPS, **BLOCKS}[name]
    case = builder(seed)
    return gradcheck(case["fn"], case["inputs"], seed=seed, params=case.get("params", ()),
                     directions=case.get("directions"), tol=case.get("tol", DEFAULT_TOL), name=name)


def run_suite(seeds=range(20), names=None) -> list[GradcheckReport]:
    names = list(names) if names is not None else [*OPS, *BLOCKS]
    return [run_case(name, seed) for name in names for seed in seeds]
