"""Network builders: the sliding-window classifier and two valid-convolution U-Nets.

Tensors are NCHW (PyTorch layout). Every model carries its declarative
:class:`NetworkSpec` and a non-trainable input standardisation (per-channel
mean/std buffers), so a checkpoint is self-contained.

Parameter accounting: :func:`parameter_count` counts convolution and
fully-connected weights and biases and leaves batch-normalisation terms
out. Under that convention the default widths reproduce the reference
counts 220,826 (SW-CNN), 31,031,745 (U-Net-D) and 1,862,849 (U-Net-S);
see ``docs/parameter_counts.md``.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

SW_CNN, UNET_D, UNET_S = "SW-CNN", "U-Net-D", "U-Net-S"


@dataclass(frozen=True)
class LayerSpec:
    kind: str  # conv | pool | upconv | fc
    kernel: int
    channels: int
    stride: int = 1


@dataclass(frozen=True)
class NetworkSpec:
    name: str
    input_size: int
    output_size: int
    layers: tuple[LayerSpec, ...]
    base_width: int
    depth: int = 0
    batch_norm: bool = True
    weight_decay: float = 1e-4
    in_channels: int = 3
    extra: dict = field(default_factory=dict, compare=False, hash=False)

    @property
    def is_fcn(self) -> bool:
        return self.name != SW_CNN

    @property
    def n_conv(self) -> int:
        return sum(1 for l in self.layers if l.kind in ("conv", "upconv"))

    @property
    def n_pool(self) -> int:
        return sum(1 for l in self.layers if l.kind == "pool")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["layers"] = [asdict(l) for l in self.layers]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkSpec":
        d = dict(d)
        d["layers"] = tuple(LayerSpec(**l) for l in d["layers"])
        return cls(**d)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


def receptive_margin(spec: NetworkSpec) -> int:
    """Pixels lost per side between an FCN's input and output."""
    if not spec.is_fcn:
        raise ValueError(f"{spec.name} is not fully convolutional")
    return (spec.input_size - spec.output_size) // 2


# -- U-Net geometry -----------------------------------------------------------


def unet_output_size(input_size: int, depth: int) -> int | None:
    """Output side length of a valid-convolution U-Net, or None if the input is incompatible."""
    s = input_size
    for _ in range(depth):
        s -= 4
        if s <= 0 or s % 2:
            return None
        s //= 2
    s -= 4
    if s <= 0:
        return None
    for _ in range(depth):
        s = 2 * s - 4
        if s <= 0:
            return None
    return s


def valid_input_sizes(depth: int, near: int, count: int = 2) -> list[int]:
    below = [s for s in range(near - 1, 0, -1) if unet_output_size(s, depth)][:count]
    above = [s for s in range(near + 1, near + 64 * 2**depth) if unet_output_size(s, depth)][:count]
    return sorted(below) + above


def unet_spec(name: str, depth: int, input_size: int, base_width: int) -> NetworkSpec:
    out = unet_output_size(input_size, depth)
    if out is None:
        raise ValueError(
            f"{name}: input size {input_size} is incompatible with {depth} poolings; "
            f"nearest valid sizes: {valid_input_sizes(depth, input_size)}"
        )
    widths = [base_width * 2**d for d in range(depth + 1)]
    layers = []
    for d in range(depth + 1):
        layers += [LayerSpec("conv", 3, widths[d]), LayerSpec("conv", 3, widths[d])]
        if d < depth:
            layers.append(LayerSpec("pool", 2, widths[d], 2))
    for d in range(depth - 1, -1, -1):
        layers += [
            LayerSpec("upconv", 2, widths[d], 2),
            LayerSpec("conv", 3, widths[d]),
            LayerSpec("conv", 3, widths[d]),
        ]
    layers.append(LayerSpec("conv", 1, 1))
    return NetworkSpec(name, input_size, out, tuple(layers), base_width, depth)


def sw_cnn_spec(width: int = 48, fc_units: int = 200, input_size: int = 95) -> NetworkSpec:
    kernels = (4, 5, 4, 4)
    layers = []
    for k in kernels:
        layers += [LayerSpec("conv", k, width), LayerSpec("pool", 2, width, 2)]
    layers += [LayerSpec("fc", 1, fc_units), LayerSpec("fc", 1, 2)]
    return NetworkSpec(SW_CNN, input_size, 1, tuple(layers), width, extra={"fc_units": fc_units})


# -- modules -------------------------------------------------------------------


class _Standardize(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.register_buffer("mean", torch.zeros(channels))
        self.register_buffer("std", torch.ones(channels))

    def forward(self, x):
        return (x - self.mean.view(1, -1, 1, 1)) / self.std.view(1, -1, 1, 1)


class SegmentationNet(nn.Module):
    """Base class: spec bookkeeping, input statistics, parameter accounting."""

    spec: NetworkSpec

    def __init__(self, spec: NetworkSpec):
        super().__init__()
        self.spec = spec
        self.standardize = _Standardize(spec.in_channels)

    def set_input_stats(self, mean, std) -> None:
        self.standardize.mean.copy_(torch.as_tensor(np.asarray(mean), dtype=torch.float32))
        self.standardize.std.copy_(torch.as_tensor(np.asarray(std), dtype=torch.float32))

    def parameter_count(self) -> int:
        return parameter_count(self)

    def total_parameters(self) -> int:
        return sum(p.numel() for p in self.parameters())


def parameter_count(model: nn.Module) -> int:
    """Convolution and dense weights plus biases; normalisation layers excluded."""
    return sum(
        p.numel()
        for m in model.modules()
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d, nn.Linear))
        for p in m.parameters(recurse=False)
    )


def _conv_block(cin: int, cout: int, kernel: int, bn: bool) -> list[nn.Module]:
    mods: list[nn.Module] = [nn.Conv2d(cin, cout, kernel)]
    if bn:
        mods.append(nn.BatchNorm2d(cout))
    mods.append(nn.ReLU(inplace=True))
    return mods


class SWCNN(SegmentationNet):
    """Patch classifier: four conv/pool stages, one hidden dense layer, two logits."""

    def __init__(self, spec: NetworkSpec):
        super().__init__(spec)
        convs = [l for l in spec.layers if l.kind == "conv"]
        mods: list[nn.Module] = []
        cin, size = spec.in_channels, spec.input_size
        for l in convs:
            mods += _conv_block(cin, l.channels, l.kernel, spec.batch_norm)
            mods.append(nn.MaxPool2d(2))
            cin, size = l.channels, (size - l.kernel + 1) // 2
        self.features = nn.Sequential(*mods)
        hidden = spec.extra["fc_units"]
        self.fc = nn.Linear(cin * size * size, hidden)
        self.head = nn.Linear(hidden, 2)

    def forward(self, x):
        x = self.features(self.standardize(x))
        x = F.relu(self.fc(torch.flatten(x, 1)))
        return self.head(x)


def _center_crop(t: torch.Tensor, size: int) -> torch.Tensor:
    off = (t.shape[-1] - size) // 2
    return t[..., off : off + size, off : off + size]


class UNet(SegmentationNet):
    """Valid-convolution U-Net with centre-crop skip connections.

    The 1x1 head predicts a single object logit ``z``; the forward pass
    returns the two-class logits ``(0, z)``, whose softmax equals
    ``sigmoid(z)`` for the object class.
    """

    def __init__(self, spec: NetworkSpec):
        super().__init__(spec)
        bn, depth = spec.batch_norm, spec.depth
        widths = [spec.base_width * 2**d for d in range(depth + 1)]
        self.down = nn.ModuleList()
        cin = spec.in_channels
        for w in widths:
            self.down.append(nn.Sequential(*_conv_block(cin, w, 3, bn), *_conv_block(w, w, 3, bn)))
            cin = w
        self.up = nn.ModuleList()
        self.dec = nn.ModuleList()
        for w in reversed(widths[:-1]):
            self.up.append(nn.ConvTranspose2d(cin, w, 2, stride=2))
            self.dec.append(nn.Sequential(*_conv_block(2 * w, w, 3, bn), *_conv_block(w, w, 3, bn)))
            cin = w
        self.head = nn.Conv2d(cin, 1, 1)

    def object_logit(self, x):
        x = self.standardize(x)
        skips = []
        for i, block in enumerate(self.down):
            x = block(x)
            if i < len(self.down) - 1:
                skips.append(x)
                x = F.max_pool2d(x, 2)
        for up, dec in zip(self.up, self.dec):
            x = up(x)
            x = dec(torch.cat([_center_crop(skips.pop(), x.shape[-1]), x], dim=1))
        return self.head(x)

    def forward(self, x):
        z = self.object_logit(x)
        return torch.cat([torch.zeros_like(z), z], dim=1)


# -- builders -----------------------------------------------------------------


def _init_weights(model: nn.Module) -> None:
    for m in model.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d, nn.Linear)):
            nn.init.kaiming_normal_(m.weight, nonlinearity="relu")
            nn.init.zeros_(m.bias)


def build(spec: NetworkSpec, seed: int = 0) -> SegmentationNet:
    """Instantiate a spec with deterministic fan-in scaled initialisation."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = SWCNN(spec) if spec.name == SW_CNN else UNet(spec)
        _init_weights(model)
    return model


def build_sw_cnn(width: int = 48, fc_units: int = 200, seed: int = 0) -> SWCNN:
    return build(sw_cnn_spec(width, fc_units), seed)


def build_unet_d(input_size: int = 492, base_width: int = 64, seed: int = 0) -> UNet:
    return build(unet_spec(UNET_D, 4, input_size, base_width), seed)


def build_unet_s(input_size: int = 492, base_width: int = 64, seed: int = 0) -> UNet:
    return build(unet_spec(UNET_S, 2, input_size, base_width), seed)


def with_input_size(spec: NetworkSpec, input_size: int) -> NetworkSpec:
    """Same architecture, different tile size (FCNs only)."""
    if not spec.is_fcn:
        raise ValueError("only fully convolutional networks accept other input sizes")
    return unet_spec(spec.name, spec.depth, input_size, spec.base_width)


# -- checkpoints --------------------------------------------------------------


class CheckpointMismatch(ValueError):
    pass


def save_checkpoint(model: SegmentationNet, path, extra: dict | None = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    spec = model.spec.to_dict()
    torch.save(
        {
            "spec": spec,
            "spec_sha256": model.spec.digest(),
            "state_dict": model.state_dict(),
            "extra": extra or {},
        },
        path,
    )


def load_checkpoint(path, expected: NetworkSpec | None = None) -> SegmentationNet:
    """Load a model; refuse when the embedded spec does not hash to its recorded digest
    or differs from ``expected``."""
    blob = torch.load(Path(path), map_location="cpu", weights_only=False)
    spec = NetworkSpec.from_dict(blob["spec"])
    if spec.digest() != blob["spec_sha256"]:
        raise CheckpointMismatch(f"{path}: embedded network spec does not match its digest")
    if expected is not None and expected.digest() != spec.digest():
        raise CheckpointMismatch(f"{path}: checkpoint is a {spec.name} with a different spec")
    model = build(spec)
    model.load_state_dict(blob["state_dict"])
    model.eval()
    return model
