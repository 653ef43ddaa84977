"""CAD-Unet: parallel capsule and Unet encoders feeding two attention-gated decoders."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor
from .blocks import AttentionGate, Coupling, ResBlock
from .capsules import ConvCapsuleLayer, RoutingTrace, grid_shape
from .nn import Conv2d, Module

DEFAULT_SCHEDULE = ((1, 16), (2, 16), (2, 32), (4, 32), (4, 64))
DEFAULT_ROUTING = (1, 3, 3, 3)


@dataclass
class ModelConfig:
    input_channels: int = 1
    base_channels: int = 16
    capsule_schedule: list = field(default_factory=lambda: [list(t) for t in DEFAULT_SCHEDULE])
    routing_iterations: list = field(default_factory=lambda: list(DEFAULT_ROUTING))
    num_classes: int = 1
    upsample: str = "bilinear"
    primary_kernel: int = 5
    capsule_kernel: int = 5
    # permit capsule grids smaller than the kernel (tiny inputs only)
    allow_small_grids: bool = False

    def __post_init__(self):
        self.capsule_schedule = [tuple(int(v) for v in t) for t in self.capsule_schedule]
        self.routing_iterations = [int(r) for r in self.routing_iterations]
        self.validate()

    @property
    def depth(self) -> int:
        return len(self.routing_iterations)

    def widths(self) -> list[int]:
        return [self.base_channels * 2 ** level for level in range(self.depth + 1)]

    def validate(self) -> None:
        if len(self.capsule_schedule) != self.depth + 1:
            raise ValueError(
                f"capsule schedule has {len(self.capsule_schedule)} entries; expected {self.depth + 1}"
                f" for {self.depth} routed layers")
        if self.num_classes not in (1, 2):
            raise ValueError(f"num_classes must be 1 or 2, got {self.num_classes}")
        if any(r < 1 for r in self.routing_iterations):
            raise ValueError("routing iterations must be >= 1")
        if self.upsample != "bilinear":
            raise ValueError(f"unsupported upsample mode {self.upsample!r}")
        widths = self.widths()
        for level in range(1, self.depth):
            types = self.capsule_schedule[level][0]
            if widths[level - 1] % types:
                raise ValueError(
                    f"coupled features at level {level} ({widths[level - 1]} channels) cannot be split"
                    f" into {types} capsule types")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["capsule_schedule"] = [list(t) for t in self.capsule_schedule]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = set(cls.__dataclass_fields__)
        return cls(**{k: v for k, v in d.items() if k in known})

    @classmethod
    def toy(cls, **kw) -> "ModelConfig":
        """Base width 16; the tested configuration for 128x128 slices."""
        return cls(**kw)

    @classmethod
    def full_scale(cls, **kw) -> "ModelConfig":
        """Base width 64 (57.07 M parameters)."""
        kw.setdefault("base_channels", 64)
        return cls(**kw)

    @classmethod
    def micro(cls, **kw) -> "ModelConfig":
        """Quarter-width schedule for end-to-end gradient checks on 16x16 inputs."""
        kw.setdefault("base_channels", 4)
        kw.setdefault("capsule_schedule", [(t, a // 4) for t, a in DEFAULT_SCHEDULE])
        kw.setdefault("allow_small_grids", True)
        return cls(**kw)


@dataclass
class ModelOutput:
    infection_logits: Tensor
    lung_logits: Tensor
    edge_logits: Tensor


@dataclass
class Encoding:
    skips: list[Tensor]
    capsules: list[Tensor]

    def capsule_shapes(self, schedule) -> list[tuple[int, int, int, int]]:
        return [grid_shape(c, t) for c, (t, _) in zip(self.capsules, schedule)]


class Decoder(Module):
    """One attention-gated decoder branch; the two branches share nothing."""

    def __init__(self, widths: list[int], out_channels: int, edge_channels: int = 0, rng=None, dtype=np.float32):
        super().__init__()
        depth = len(widths) - 1
        self.gates = [AttentionGate(widths[i], widths[i + 1], rng=rng, dtype=dtype) for i in range(depth)]
        self.blocks = [ResBlock(widths[i] + widths[i + 1], widths[i], rng=rng, dtype=dtype) for i in range(depth)]
        self.head = Conv2d(widths[0], out_channels, 1, bias=True, rng=rng, dtype=dtype)
        self.edge_head = Conv2d(widths[0], edge_channels, 1, bias=True, rng=rng, dtype=dtype) if edge_channels else None

    def features(self, skips: list[Tensor]) -> Tensor:
        d = skips[-1]
        for i in reversed(range(len(skips) - 1)):
            up = ad.upsample2(d)
            gated = self.gates[i](skips[i], up)
            d = self.blocks[i](ad.concat_channels([gated, up]))
        return d

    def forward(self, skips: list[Tensor]) -> tuple[Tensor, Tensor | None]:
        feats = self.features(skips)
        edge = self.edge_head(feats) if self.edge_head is not None else None
        return self.head(feats), edge


class CADUnet(Module):
    def __init__(self, config: ModelConfig | None = None, seed: int = 0, dtype=np.float32):
        super().__init__()
        self.config = config = config or ModelConfig()
        rng = np.random.default_rng(seed)
        sched = config.capsule_schedule
        w = config.widths()
        depth = config.depth

        self.primary = Conv2d(config.input_channels, sched[0][0] * sched[0][1], config.primary_kernel,
                              rng=rng, dtype=dtype)
        caps_layers = [ConvCapsuleLayer(sched[0][0], sched[0][1], *sched[1], routing=config.routing_iterations[0],
                                        kernel=config.capsule_kernel, rng=rng, dtype=dtype,
                                        allow_small_grid=config.allow_small_grids)]
        for level in range(1, depth):
            types = sched[level][0]
            caps_layers.append(ConvCapsuleLayer(types, w[level - 1] // types, *sched[level + 1],
                                                routing=config.routing_iterations[level],
                                                kernel=config.capsule_kernel, rng=rng, dtype=dtype,
                                                allow_small_grid=config.allow_small_grids))
        self.capsule_layers = caps_layers
        self.stem = ResBlock(config.input_channels, w[0], rng=rng, dtype=dtype)
        self.couplings = [Coupling(sched[level][0] * sched[level][1], w[level - 1], rng=rng, dtype=dtype)
                          for level in range(1, depth + 1)]
        self.encoder_blocks = [ResBlock(2 * w[level - 1], w[level], rng=rng, dtype=dtype)
                               for level in range(1, depth + 1)]
        self.infection_decoder = Decoder(w, config.num_classes, config.num_classes, rng=rng, dtype=dtype)
        self.lung_decoder = Decoder(w, 1, rng=rng, dtype=dtype)

    @property
    def dtype(self):
        return self.primary.weight.dtype

    def _input(self, x) -> Tensor:
        x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=self.dtype))
        if x.dtype != self.dtype:
            x = Tensor(x.data.astype(self.dtype))
        if x.ndim != 4 or x.shape[1] != self.config.input_channels:
            raise ShapeError(f"expected N x {self.config.input_channels} x H x W input, got {x.shape}")
        factor = 2 ** self.config.depth
        if x.shape[2] % factor or x.shape[3] % factor:
            raise ShapeError(f"input extents {x.shape[2]}x{x.shape[3]} must be divisible by {factor}")
        return x

    def encode(self, x, traces: list[RoutingTrace] | None = None) -> Encoding:
        x = self._input(x)
        depth = self.config.depth
        caps = [self.primary(x)]
        skips = [self.stem(x)]
        out = ad.maxpool2(skips[0])
        caps_input = caps[0]
        for level in range(1, depth + 1):
            trace = traces[level - 1] if traces is not None else None
            caps.append(self.capsule_layers[level - 1](caps_input, trace))
            coupled, product = self.couplings[level - 1](out, caps[level])
            skips.append(self.encoder_blocks[level - 1](coupled))
            if level < depth:
                out = ad.maxpool2(skips[level])
                caps_input = product
        return Encoding(skips, caps)

    def decode(self, skips: list[Tensor], decoder: str = "infection") -> tuple[Tensor, Tensor | None]:
        branch = {"infection": self.infection_decoder, "lung": self.lung_decoder}[decoder]
        return branch(skips)

    def forward(self, x) -> ModelOutput:
        enc = self.encode(x)
        infection, edge = self.decode(enc.skips, "infection")
        lung, _ = self.decode(enc.skips, "lung")
        return ModelOutput(infection, lung, edge)


# ----------------------------------------------------------------------
# checkpoints


def _fname(name: str) -> str:
    return name.replace("/", "_") + ".cadt"


def save_checkpoint(model: CADUnet, directory: str | Path, step: int = 0, extra: dict | None = None) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    params = list(model.named_parameters())
    buffers = list(model.named_buffers())
    for name, p in params:
        ad.save_tensor(directory / _fname(name), p.data)
    for name, b in buffers:
        ad.save_tensor(directory / _fname(name), b)
    manifest = {
        "config": model.config.to_dict(),
        "step": step,
        "parameters": [n for n, _ in params],
        "running_stats": [n for n, _ in buffers],
    }
    if extra:
        manifest.update(extra)
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return directory


def load_checkpoint(directory: str | Path, dtype=np.float32) -> tuple[CADUnet, dict]:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    model = CADUnet(ModelConfig.from_dict(manifest["config"]), dtype=dtype)
    params = dict(model.named_parameters())
    if sorted(params) != sorted(manifest["parameters"]):
        raise ValueError(f"{directory}: checkpoint parameters do not match the configured model")
    for name in manifest["parameters"]:
        arr = ad.load_tensor(directory / _fname(name))
        if arr.shape != params[name].shape:
            raise ValueError(f"{directory}: {name} has shape {arr.shape}, model expects {params[name].shape}")
        params[name].data = arr.astype(dtype)
    owners = _buffer_owners(model)
    for name in manifest["running_stats"]:
        module, attr = owners[name]
        setattr(module, attr, ad.load_tensor(directory / _fname(name)).astype(dtype))
    return model, manifest


def _buffer_owners(module: Module, prefix: str = "") -> dict:
    owners = {}
    for attr in getattr(module, "_buffer_names", ()):
        owners[prefix + attr] = (module, attr)
    for name, child in module._children():
        owners.update(_buffer_owners(child, f"{prefix}{name}."))
    return owners
