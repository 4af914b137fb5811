"""Audio/visual ResNet-S5 backbones, the audiovisual localization head and classifiers.

ResNet-S5 is a ResNet-18 whose last stage keeps stride 1, so a 224x224
frame yields a 512x14x14 feature map. The ``toy`` profile is a narrow,
one-block-per-stage variant that maps a 112x112 frame to 64x14x14 and trains
on a CPU in minutes.
"""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .errors import ShapeError, StateError

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "sounding-loc-checkpoint"
CHECKPOINT_VERSION = 1
SPEC_SHAPE = (201, 64)
LOC_DIM = 128


@dataclass
class BackboneConfig:
    profile: str = "toy"
    channels: int = 64
    stages: int = 4
    input_channels: int = 3
    widths: tuple[int, ...] = (16, 32, 64, 64)
    blocks_per_stage: int = 1
    strides: tuple[int, ...] = (1, 2, 1, 1)
    input_size: tuple[int, int] | None = (112, 112)

    def __post_init__(self):
        self.widths = tuple(self.widths)
        self.strides = tuple(self.strides)
        if self.input_size is not None:
            self.input_size = tuple(self.input_size)
        if self.profile not in ("paper", "toy"):
            raise ShapeError(f"unknown backbone profile {self.profile!r}")
        if len(self.widths) != self.stages or len(self.strides) != self.stages:
            raise ShapeError("widths and strides need one entry per stage")
        if self.widths[-1] != self.channels:
            raise ShapeError("last stage width must equal channels")

    @classmethod
    def paper(cls, input_channels: int = 3) -> "BackboneConfig":
        return cls("paper", 512, 4, input_channels, (64, 128, 256, 512), 2, (1, 2, 2, 1),
                   (224, 224) if input_channels == 3 else SPEC_SHAPE)

    @classmethod
    def toy(cls, input_channels: int = 3) -> "BackboneConfig":
        return cls("toy", 64, 4, input_channels, (16, 32, 64, 64), 1, (1, 2, 1, 1),
                   (112, 112) if input_channels == 3 else SPEC_SHAPE)

    @classmethod
    def from_dict(cls, d: dict) -> "BackboneConfig":
        return cls(**d)


class BasicBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, stride: int = 1):
        super().__init__()
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, stride, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, 1, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(out_ch)
        self.shortcut = None
        if stride != 1 or in_ch != out_ch:
            self.shortcut = nn.Sequential(nn.Conv2d(in_ch, out_ch, 1, stride, bias=False), nn.BatchNorm2d(out_ch))

    def forward(self, x: Tensor) -> Tensor:
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        identity = x if self.shortcut is None else self.shortcut(x)
        return F.relu(out + identity)


class ResNetS5(nn.Module):
    """ResNet trunk without global pooling or classifier."""

    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        self.cfg = cfg
        w0 = cfg.widths[0]
        if cfg.profile == "paper":
            conv = nn.Conv2d(cfg.input_channels, w0, 7, 2, 3, bias=False)
        else:
            conv = nn.Conv2d(cfg.input_channels, w0, 3, 2, 1, bias=False)
        self.stem = nn.Sequential(conv, nn.BatchNorm2d(w0), nn.ReLU(inplace=True), nn.MaxPool2d(3, 2, 1))
        layers, in_ch = [], w0
        for width, stride in zip(cfg.widths, cfg.strides):
            blocks = [BasicBlock(in_ch, width, stride)]
            blocks += [BasicBlock(width, width) for _ in range(cfg.blocks_per_stage - 1)]
            layers.append(nn.Sequential(*blocks))
            in_ch = width
        self.layers = nn.Sequential(*layers)
        for m in self.modules():
            if isinstance(m, nn.Conv2d):
                nn.init.kaiming_normal_(m.weight, mode="fan_out", nonlinearity="relu")

    def forward(self, x: Tensor) -> Tensor:
        return self.layers(self.stem(x))


class VisualNet(nn.Module):
    """Frames (B, 3, H, W) in [0, 1] -> feature maps f(v) of shape (B, C, h, w)."""

    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        self.cfg = cfg
        self.backbone = ResNetS5(cfg)

    def forward(self, frames: Tensor) -> Tensor:
        if self.cfg.input_size is not None and tuple(frames.shape[-2:]) != self.cfg.input_size:
            raise ShapeError(f"visual input must be {self.cfg.input_size}, got {tuple(frames.shape[-2:])}")
        return self.backbone((frames - 0.5) / 0.25)


class AudioNet(nn.Module):
    """Log-Mel spectrograms (B, 1, 201, 64) -> pre-pool maps; ``embed`` applies global max pooling."""

    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        self.cfg = cfg
        self.bn0 = nn.BatchNorm2d(cfg.input_channels)
        self.backbone = ResNetS5(cfg)

    def forward(self, specs: Tensor) -> Tensor:
        if specs.dim() == 3:
            specs = specs.unsqueeze(1)
        if tuple(specs.shape[-2:]) != SPEC_SHAPE:
            raise ShapeError(f"audio input must be {SPEC_SHAPE}, got {tuple(specs.shape[-2:])}")
        return self.backbone(self.bn0(specs))

    def embed(self, specs: Tensor) -> Tensor:
        return self(specs).amax(dim=(2, 3))


class LocalizationHead(nn.Module):
    """Audio-conditioned localization map l(g(a), f(v)) and its max-pooled score.

    Both modalities are projected to 128 dims by two layers with a ReLU in
    between, L2-normalised, compared by cosine similarity at each position,
    then passed through a learned scalar affine (1x1 conv) and a sigmoid.
    """

    def __init__(self, channels: int, dim: int = LOC_DIM, init_scale: float = 10.0, init_bias: float = -5.0):
        super().__init__()
        self.audio_proj = nn.Sequential(nn.Linear(channels, dim), nn.ReLU(inplace=True), nn.Linear(dim, dim))
        self.visual_proj = nn.Sequential(nn.Conv2d(channels, dim, 1), nn.ReLU(inplace=True), nn.Conv2d(dim, dim, 1))
        self.affine = nn.Conv2d(1, 1, 1)
        self.init_scale, self.init_bias = init_scale, init_bias
        self.reset_affine()

    def reset_affine(self):
        with torch.no_grad():
            self.affine.weight.fill_(self.init_scale)
            self.affine.bias.fill_(self.init_bias)

    def similarity(self, audio: Tensor, feats: Tensor) -> Tensor:
        if audio.shape[-1] != feats.shape[1]:
            raise ShapeError(f"audio dim {audio.shape[-1]} != visual channels {feats.shape[1]}")
        a = F.normalize(self.audio_proj(audio), dim=1)  # zero vectors stay zero
        v = F.normalize(self.visual_proj(feats), dim=1)
        return torch.einsum("bc,bchw->bhw", a, v)

    def forward(self, audio: Tensor, feats: Tensor) -> tuple[Tensor, Tensor]:
        cos = self.similarity(audio, feats)
        maps = torch.sigmoid(self.affine(cos.unsqueeze(1))).squeeze(1)
        return maps, maps.flatten(1).amax(dim=1)


class AVModel(nn.Module):
    """Everything trained in stage 1 and fine-tuned in stage 2."""

    def __init__(self, num_classes: int, visual_cfg: BackboneConfig | None = None,
                 audio_cfg: BackboneConfig | None = None, head_init: tuple[float, float] = (10.0, -5.0)):
        super().__init__()
        self.visual_cfg = visual_cfg or BackboneConfig.toy(3)
        self.audio_cfg = audio_cfg or BackboneConfig.toy(1)
        if self.visual_cfg.channels != self.audio_cfg.channels:
            raise ShapeError("audio and visual backbones must share the channel count")
        self.num_classes = num_classes
        self.head_init = tuple(head_init)
        C = self.visual_cfg.channels
        self.visual = VisualNet(self.visual_cfg)
        self.audio = AudioNet(self.audio_cfg)
        self.head = LocalizationHead(C, init_scale=head_init[0], init_bias=head_init[1])
        self.visual_cls = nn.Linear(C, num_classes)
        self.audio_cls = nn.Linear(C, num_classes)

    @property
    def channels(self) -> int:
        return self.visual_cfg.channels

    def reset_classifiers(self):
        self.visual_cls.reset_parameters()
        self.audio_cls.reset_parameters()

    def audio_logits(self, specs: Tensor) -> Tensor:
        return self.audio_cls(self.audio.embed(specs))

    def visual_logits(self, frames: Tensor) -> Tensor:
        return self.visual_cls(self.visual(frames).mean(dim=(2, 3)))


# Functional wrappers over single samples -------------------------------------


def _frame_tensor(frame) -> Tensor:
    pixels = frame.pixels if hasattr(frame, "pixels") else frame
    t = torch.as_tensor(np.asarray(pixels), dtype=torch.float32)
    if t.dim() == 3 and t.shape[-1] == 3:
        t = t.permute(2, 0, 1)
    return t.unsqueeze(0) if t.dim() == 3 else t


def visual_forward(frame, net: VisualNet) -> Tensor:
    """FeatureMap (C, h, w) of one frame."""
    x = _frame_tensor(frame).to(next(net.parameters()).dtype)
    return net(x)[0]


def audio_forward(spec, net: AudioNet) -> Tensor:
    """AudioEmbedding (C,) of one spectrogram, by global max pooling."""
    values = spec.values if hasattr(spec, "values") else spec
    x = torch.as_tensor(np.asarray(values), dtype=next(net.parameters()).dtype)
    if x.dim() != 2:
        raise ShapeError(f"spectrogram must be 2-D, got {tuple(x.shape)}")
    return net.embed(x[None, None])[0]


def localize(audio_emb: Tensor, feats: Tensor, head: LocalizationHead) -> tuple[Tensor, Tensor]:
    """Localization map (h, w) and score for one embedding/feature-map pair."""
    maps, score = head(audio_emb[None], feats[None])
    return maps[0], score[0]


# Checkpoints -----------------------------------------------------------------


def save_checkpoint(path, model: AVModel, extra: dict | None = None) -> None:
    torch.save({
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "num_classes": model.num_classes,
        "visual_cfg": dataclasses.asdict(model.visual_cfg),
        "audio_cfg": dataclasses.asdict(model.audio_cfg),
        "head_init": list(model.head_init),
        "state_dict": model.state_dict(),
        "extra": extra or {},
    }, path)


def load_checkpoint(path, dtype=torch.float32) -> tuple[AVModel, dict]:
    path = Path(path)
    if not path.exists():
        raise StateError(f"checkpoint not found: {path}")
    blob = torch.load(path, map_location="cpu", weights_only=False)
    if blob.get("format") != CHECKPOINT_FORMAT or blob.get("version") != CHECKPOINT_VERSION:
        raise StateError(f"{path} is not a version-{CHECKPOINT_VERSION} checkpoint")
    model = AVModel(blob["num_classes"], BackboneConfig.from_dict(blob["visual_cfg"]),
                    BackboneConfig.from_dict(blob["audio_cfg"]), tuple(blob["head_init"]))
    model.load_state_dict(blob["state_dict"])
    return model.to(dtype), blob["extra"]


def load_pretrained(module: nn.Module, path) -> list[str]:
    """Copy matching tensors from a state-dict file into ``module``.

    Returns the names that were loaded. Toy runs train from scratch and never
    call this.
    """
    state = torch.load(path, map_location="cpu", weights_only=True)
    own = module.state_dict()
    matched = {k: v for k, v in state.items() if k in own and own[k].shape == v.shape}
    module.load_state_dict(matched, strict=False)
    logger.info("loaded %d/%d tensors from %s", len(matched), len(own), path)
    return sorted(matched)
