"""Pyramid feature extractor and shared density decoder.

The extractor exposes K feature maps (low, mid, high).  Each level is
projected to a common width by its own 1x1 adapter, then the single decoder
(six 3x3 convolutions with dilation 2, a 1x1 head and a mass-preserving
upsample) turns any level's map or patch into a density map at input
resolution.
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

from .errors import InvalidInput, InvalidParameter
from .pyramid import receptive_field

LEVEL_NAMES = ("low", "mid", "high")

# first ten convolutions of VGG-16; "M" marks a 2x2 max-pool
VGG16_PREFIX = (64, 64, "M", 128, 128, "M", 256, 256, 256, "M", 512, 512, 512)
# conv index (0-based) whose ReLU output is tapped: conv2_2, conv3_3, conv4_3
VGG16_TAPS = (3, 6, 9)

# all map 0 -> 0 and are non-negative; "abs" and "square" cannot die on a negative region
OUTPUT_ACTIVATIONS = {"relu": F.relu, "abs": torch.abs, "square": torch.square}


@dataclass
class ModelConfig:
    backbone: str = "toy"
    level_taps: tuple[int, ...] = (0, 1, 2)
    toy_widths: tuple[int, ...] = (16, 32, 64)
    decoder_width: int = 32
    decoder_channels: tuple[int, ...] = (32, 32, 32, 32, 16, 16)
    output_activation: str = "relu"
    # a small positive bias keeps ReLU heads alive: the ranking hinge alone pushes outputs toward zero
    head_bias_init: float = 0.1

    def __post_init__(self):
        self.level_taps = tuple(int(t) for t in self.level_taps)
        self.toy_widths = tuple(int(t) for t in self.toy_widths)
        self.decoder_channels = tuple(int(c) for c in self.decoder_channels)
        if self.backbone not in ("toy", "vgg16-truncated"):
            raise InvalidParameter(f"unknown backbone {self.backbone!r}")
        if not self.level_taps or list(self.level_taps) != sorted(set(self.level_taps)):
            raise InvalidParameter("level_taps must be distinct and ascending")
        if self.output_activation not in OUTPUT_ACTIVATIONS:
            raise InvalidParameter(f"output_activation must be one of {sorted(OUTPUT_ACTIVATIONS)}")
        if self.decoder_width <= 0:
            raise InvalidParameter("decoder_width must be positive")
        if self.backbone == "toy" and max(self.level_taps) >= len(self.toy_widths):
            raise InvalidParameter("level tap beyond the last toy stage")
        if self.backbone == "vgg16-truncated" and max(self.level_taps) >= len(VGG16_TAPS):
            raise InvalidParameter("vgg16-truncated exposes three taps")

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise InvalidParameter(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class PyramidFeatures:
    levels: list[torch.Tensor]
    strides: list[int]
    names: list[str] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.levels)


class ToyBackbone(nn.Module):
    """Stages of conv3x3 -> ReLU -> 2x max-pool; every stage output is a tap."""

    def __init__(self, widths=(16, 32, 64), in_channels=3):
        super().__init__()
        stages, prev = [], in_channels
        for w in widths:
            stages.append(nn.Sequential(nn.Conv2d(prev, w, 3, padding=1), nn.ReLU(inplace=True), nn.MaxPool2d(2)))
            prev = w
        self.stages = nn.ModuleList(stages)
        self.tap_channels = list(widths)
        self.tap_strides = [2 ** (i + 1) for i in range(len(widths))]
        self.tap_layers = []
        layers = []
        for _ in widths:
            layers += [(3, 1, 1), (2, 2, 1)]
            self.tap_layers.append(list(layers))
        self.min_input = 64

    def forward(self, x):
        taps = []
        for stage in self.stages:
            x = stage(x)
            taps.append(x)
        return taps


class VGG16Truncated(nn.Module):
    """First ten conv layers of VGG-16. Tap names follow torchvision's ``features.N`` indexing."""

    def __init__(self, in_channels=3):
        super().__init__()
        layers, prev = [], in_channels
        self.tap_indices, conv_i, geom = [], 0, []
        self.tap_layers, self.tap_channels = [], []
        for v in VGG16_PREFIX:
            if v == "M":
                layers.append(nn.MaxPool2d(2, 2))
                geom.append((2, 2, 1))
                continue
            layers += [nn.Conv2d(prev, v, 3, padding=1), nn.ReLU(inplace=True)]
            geom.append((3, 1, 1))
            if conv_i in VGG16_TAPS:
                self.tap_indices.append(len(layers) - 1)
                self.tap_layers.append(list(geom))
                self.tap_channels.append(v)
            prev = v
            conv_i += 1
        self.features = nn.Sequential(*layers)
        self.tap_strides = [receptive_field(g)[0] for g in self.tap_layers]
        self.min_input = 8 * max(self.tap_strides)

    def forward(self, x):
        taps = []
        for i, layer in enumerate(self.features):
            x = layer(x)
            if i in self.tap_indices:
                taps.append(x)
        return taps


class DensityDecoder(nn.Module):
    def __init__(self, in_channels: int, channels=(32, 32, 32, 32, 16, 16), activation: str = "relu"):
        super().__init__()
        self.activation = OUTPUT_ACTIVATIONS[activation]
        layers, prev = [], in_channels
        for c in channels:
            layers += [nn.Conv2d(prev, c, 3, padding=2, dilation=2), nn.ReLU(inplace=True)]
            prev = c
        self.body = nn.Sequential(*layers)
        self.head = nn.Conv2d(prev, 1, 1)

    def forward(self, x, upsample: int = 1):
        d = self.activation(self.head(self.body(x)))
        if upsample > 1:
            # divide by the area factor so the integral is unchanged
            d = F.interpolate(d, scale_factor=upsample, mode="bilinear", align_corners=False) / upsample**2
        return d


class DreamNet(nn.Module):
    """Extractor f, per-level adapters and shared estimator g."""

    def __init__(self, config: ModelConfig | None = None):
        super().__init__()
        self.config = config or ModelConfig()
        if self.config.backbone == "toy":
            self.backbone = ToyBackbone(self.config.toy_widths)
        else:
            self.backbone = VGG16Truncated()
        taps = self.config.level_taps
        self.level_channels = [self.backbone.tap_channels[t] for t in taps]
        self.strides = [self.backbone.tap_strides[t] for t in taps]
        self.level_names = [LEVEL_NAMES[t] if len(LEVEL_NAMES) > t else f"level{t}" for t in taps]
        self.adapters = nn.ModuleList(nn.Conv2d(c, self.config.decoder_width, 1) for c in self.level_channels)
        self.decoder = DensityDecoder(self.config.decoder_width, self.config.decoder_channels,
                                       self.config.output_activation)
        self._init_weights()

    def _init_weights(self):
        for m in self.modules():
            if isinstance(m, nn.Conv2d):
                nn.init.normal_(m.weight, std=0.01)
                nn.init.constant_(m.bias, 0.0)
        # backbone uses He init so the toy extractor trains from scratch
        for m in self.backbone.modules():
            if isinstance(m, nn.Conv2d):
                nn.init.kaiming_normal_(m.weight, nonlinearity="relu")
        for m in list(self.adapters) + [self.decoder]:
            for c in m.modules():
                if isinstance(c, nn.Conv2d) and c is not self.decoder.head:
                    nn.init.kaiming_normal_(c.weight, nonlinearity="relu")
        nn.init.constant_(self.decoder.head.bias, self.config.head_bias_init)

    @property
    def K(self) -> int:
        return len(self.strides)

    @property
    def min_input(self) -> int:
        return self.backbone.min_input

    def receptive_fields(self) -> list[tuple[int, int]]:
        """(stride, receptive-field size) of every exposed level."""
        return [receptive_field(self.backbone.tap_layers[t]) for t in self.config.level_taps]

    def extract(self, image: torch.Tensor) -> PyramidFeatures:
        if image.dim() == 3:
            image = image.unsqueeze(0)
        h, w = image.shape[-2:]
        if h < self.min_input or w < self.min_input:
            raise InvalidInput(f"input {h}x{w} below minimum {self.min_input}x{self.min_input}")
        taps = self.backbone(image)
        levels = [taps[t] for t in self.config.level_taps]
        return PyramidFeatures(levels, list(self.strides), list(self.level_names))

    def estimate_density(self, patch: torch.Tensor, level: int = -1) -> torch.Tensor:
        """Density map (N, 1, H*s, W*s) for a level-``level`` feature patch; s is that level's stride."""
        level = level % self.K
        if patch.dim() == 3:
            patch = patch.unsqueeze(0)
        if patch.shape[1] != self.level_channels[level]:
            raise InvalidInput(
                f"patch has {patch.shape[1]} channels, level {level} expects {self.level_channels[level]}"
            )
        return self.decoder(self.adapters[level](patch), upsample=self.strides[level])

    def count_from_patch(self, patch: torch.Tensor, level: int = -1) -> torch.Tensor:
        # the mass-preserving upsample leaves the sum unchanged, so skip it
        level = level % self.K
        if patch.dim() == 3:
            patch = patch.unsqueeze(0)
        if patch.shape[1] != self.level_channels[level]:
            raise InvalidInput(
                f"patch has {patch.shape[1]} channels, level {level} expects {self.level_channels[level]}"
            )
        return self.decoder(self.adapters[level](patch)).sum(dim=(1, 2, 3))

    def forward(self, image: torch.Tensor) -> torch.Tensor:
        feats = self.extract(image)
        return self.estimate_density(feats.levels[-1], -1)

    def load_backbone_arrays(self, arrays: dict[str, np.ndarray], strict: bool = False) -> list[str]:
        """Copy externally supplied named arrays (e.g. VGG-16 ``features.N.weight``) into the backbone."""
        own = self.backbone.state_dict()
        loaded = []
        for name, value in arrays.items():
            if name in own and tuple(own[name].shape) == tuple(value.shape):
                own[name] = torch.as_tensor(np.asarray(value), dtype=own[name].dtype)
                loaded.append(name)
            elif strict:
                raise InvalidInput(f"backbone array {name!r} does not match")
        self.backbone.load_state_dict(own)
        return loaded


def _state_arrays(model: nn.Module) -> dict[str, np.ndarray]:
    return {k: v.detach().cpu().numpy() for k, v in model.state_dict().items()}


def save_checkpoint(model: DreamNet, path: str | Path, extra: dict | None = None) -> dict:
    """Write ``path`` (.npz of named arrays) and ``path`` with .json (manifest). Returns the manifest."""
    path = Path(path)
    arrays = _state_arrays(model)
    np.savez(path, **arrays)
    manifest = {
        "arrays": [{"name": k, "shape": list(v.shape), "dtype": str(v.dtype)} for k, v in arrays.items()],
        "model_config": model.config.to_dict(),
        "digest": state_digest(model),
    }
    if extra:
        manifest.update(extra)
    path.with_suffix(".json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return manifest


def load_checkpoint(path: str | Path) -> tuple[DreamNet, dict]:
    path = Path(path)
    manifest = json.loads(path.with_suffix(".json").read_text())
    model = DreamNet(ModelConfig.from_dict(manifest["model_config"]))
    with np.load(path) as data:
        state = {k: torch.from_numpy(data[k].copy()) for k in data.files}
    model.load_state_dict(state)
    return model, manifest


def state_digest(model: nn.Module) -> str:
    h = hashlib.sha256()
    for k, v in sorted(model.state_dict().items()):
        h.update(k.encode())
        h.update(v.detach().cpu().numpy().tobytes())
    return h.hexdigest()
