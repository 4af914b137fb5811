"""Cocktail-party curriculum: class-aware maps, silent-object filtering and distribution matching.

For a mixed-sound scene the dictionary keys give one map per category,
``m[k] = d[k] . f(v)``. Multiplying by the category-agnostic localization map
``l`` keeps only sounding regions, ``s[k] = m[k] * l``. The spatial means of
the ``s[k]`` go through a softmax to give the visual category distribution of
sounding objects, which is pulled towards the audio classifier's distribution
for the mixed sound by a KL term. The matching objective on cocktail pairs is
added with weight ``lambda``.

Dictionary keys and the audio classifier stay frozen throughout.
"""

from __future__ import annotations

import copy
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .bank import SampleBank, iterate_batches, random_resized_crop
from .data import FrameImage
from .dsp import Spectrogram
from .errors import ConfigError, NumericError, ShapeError, StateError
from .models import AVModel, AudioNet
from .stage1 import JsonlLog, ObjectDictionary, derangement, make_optimizer, matching_objective

logger = logging.getLogger(__name__)

KL_EPS = 1e-8


@dataclass
class Stage2Config:
    lam: float = 0.5
    lr: float = 1e-4
    optimizer: str = "adam"
    seed: int = 0
    epochs: int = 10
    batch_size: int = 16
    enable_product_filter: bool = True
    enable_Lc: bool = True
    enable_L1: bool = True
    augment: bool = True
    freeze_bn: bool = True

    def __post_init__(self):
        if self.lam < 0:
            raise ConfigError("lambda must be >= 0")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2")
        if not self.enable_Lc and not (self.enable_L1 and self.lam > 0):
            raise ConfigError("stage 2 has nothing to optimise: Lc is disabled and lambda * L1 is zero")


# --------------------------------------------------------------------------
# Class-aware maps and distributions
# --------------------------------------------------------------------------


def class_maps(f: torch.Tensor, keys: torch.Tensor) -> torch.Tensor:
    """Inner product of every dictionary key with every feature-map position.

    f: (C, H, W) or (B, C, H, W); keys: (K, C). Returns (K, H, W) or (B, K, H, W).
    """
    if keys.shape[-1] != f.shape[-3]:
        raise ShapeError(f"dictionary key dim {keys.shape[-1]} != feature channels {f.shape[-3]}")
    return torch.einsum("kc,...chw->...khw", keys.to(f.dtype), f)


def sounding_filter(m: torch.Tensor, l: torch.Tensor) -> torch.Tensor:
    """Elementwise product of each class map with the localization map."""
    if m.shape[-2:] != l.shape[-2:] or m.shape[:-3] != l.shape[:-2]:
        raise ShapeError(f"class maps {tuple(m.shape)} and localization map {tuple(l.shape)} disagree")
    return m * l.unsqueeze(-3)


def sounding_distribution(s: torch.Tensor) -> torch.Tensor:
    """Softmax over classes of the full-area spatial mean of each sounding map."""
    if s.shape[-3] < 2:
        raise ShapeError("need at least two categories")
    pooled = s.mean(dim=(-2, -1))
    if not torch.isfinite(pooled).all():
        raise NumericError("non-finite sounding maps")
    return torch.softmax(pooled, dim=-1)


def kl_consistency(pv: torch.Tensor, pa: torch.Tensor, eps: float = KL_EPS) -> torch.Tensor:
    """KL(pv || pa) per sample; ``pa`` is a constant target."""
    if pv.shape != pa.shape:
        raise ShapeError(f"distribution shapes differ: {tuple(pv.shape)} vs {tuple(pa.shape)}")
    pa = pa.detach()
    return (pv * (torch.log(pv.clamp_min(eps)) - torch.log(pa.clamp_min(eps)))).sum(-1)


class AudioEventNet(nn.Module):
    """Frozen stage-1 audio network plus its pseudo-label classifier."""

    def __init__(self, audio: AudioNet, classifier: nn.Linear, trained: bool = True):
        super().__init__()
        self.audio = audio
        self.classifier = classifier
        self.register_buffer("trained", torch.tensor(bool(trained)))

    @classmethod
    def from_model(cls, model: AVModel) -> "AudioEventNet":
        net = cls(copy.deepcopy(model.audio), copy.deepcopy(model.audio_cls)).eval()
        for p in net.parameters():
            p.requires_grad_(False)
        return net

    def forward(self, specs: torch.Tensor) -> torch.Tensor:
        return self.classifier(self.audio.embed(specs))


@torch.no_grad()
def audio_distribution(specs: torch.Tensor, net: AudioEventNet | None) -> torch.Tensor:
    """Softmax of the audio classifier's logits for (B, 201, 64) or (201, 64) inputs."""
    if net is None or not bool(net.trained):
        raise StateError("the audio classifier has not been trained in stage 1")
    single = specs.dim() == 2
    x = specs[None] if single else specs
    net.eval()
    p = torch.softmax(net(x.to(next(net.parameters()).dtype)), dim=-1)
    return p[0] if single else p


# --------------------------------------------------------------------------
# Training
# --------------------------------------------------------------------------


def _freeze_bn(model: nn.Module):
    for m in model.modules():
        if isinstance(m, nn.modules.batchnorm._BatchNorm):
            m.eval()


@dataclass
class Stage2State:
    model: AVModel
    keys: torch.Tensor
    audio_event: AudioEventNet
    cfg: Stage2Config
    optimizer: torch.optim.Optimizer | None = None
    gen: torch.Generator = field(default_factory=torch.Generator)

    @classmethod
    def from_stage1(cls, model: AVModel, dictionary: ObjectDictionary | None, cfg: Stage2Config,
                    audio_event: AudioEventNet | None = None) -> "Stage2State":
        if dictionary is None:
            raise StateError("stage 2 needs the stage-1 object dictionary")
        keys = torch.as_tensor(np.asarray(dictionary.keys)).to(next(model.parameters()).dtype)
        if keys.shape[1] != model.channels:
            raise ShapeError(f"dictionary keys have dim {keys.shape[1]}, model has {model.channels} channels")
        audio_event = audio_event or AudioEventNet.from_model(model)
        params = list(model.visual.parameters()) + list(model.audio.parameters()) + list(model.head.parameters())
        opt = make_optimizer(cfg.optimizer, params, cfg.lr)
        return cls(model, keys.clone(), audio_event, cfg, opt, torch.Generator().manual_seed(cfg.seed))


def stage2_losses(state: Stage2State, specs: torch.Tensor, frames: torch.Tensor, pa: torch.Tensor,
                  perm: torch.Tensor) -> dict[str, torch.Tensor]:
    """Combined objective ``Lc + lambda * L1`` for one batch (no optimiser step)."""
    cfg, model = state.cfg, state.model
    if state.keys is None or state.audio_event is None:
        raise StateError("stage-1 artifacts (dictionary, audio classifier) are not loaded")
    feats = model.visual(frames)
    audio = model.audio.embed(specs)
    l1, l_maps = matching_objective(audio, feats, model.head, perm)
    m = class_maps(feats, state.keys)
    s = sounding_filter(m, l_maps) if cfg.enable_product_filter else m
    pv = sounding_distribution(s)
    lc = kl_consistency(pv, pa).mean()
    total = torch.zeros((), dtype=feats.dtype)
    if cfg.enable_Lc:
        total = total + lc
    if cfg.enable_L1:
        total = total + cfg.lam * l1
    return {"loss": total, "Lc": lc, "L1": l1}


def stage2_step(state: Stage2State, specs: torch.Tensor, frames: torch.Tensor, pa: torch.Tensor) -> dict[str, float]:
    """One optimiser update on a cocktail batch; returns scalar losses."""
    if state.optimizer is None:
        raise StateError("stage-2 state has no optimiser")
    state.model.train()
    if state.cfg.freeze_bn:
        _freeze_bn(state.model)
    losses = stage2_losses(state, specs, frames, pa, derangement(specs.shape[0], state.gen))
    state.optimizer.zero_grad()
    losses["loss"].backward()
    state.optimizer.step()
    return {k: float(v.detach()) for k, v in losses.items()}


def train_stage2(state: Stage2State, bank: SampleBank, log_path=None) -> list[dict]:
    cfg = state.cfg
    torch.manual_seed(cfg.seed)
    log = JsonlLog(log_path)
    pa_all = audio_distribution(bank.specs, state.audio_event)
    for epoch in range(cfg.epochs):
        acc: dict[str, list[float]] = {}
        for idx in iterate_batches(len(bank), cfg.batch_size, state.gen):
            frames = bank.frames[idx]
            if cfg.augment:
                frames = random_resized_crop(frames, state.gen)
            out = stage2_step(state, bank.specs[idx], frames, pa_all[idx])
            for k, v in out.items():
                acc.setdefault(k, []).append(v)
        log(phase="stage2", round=0, epoch=epoch, **{k: float(np.mean(v)) for k, v in acc.items()})
    state.model.eval()
    return log.records


# --------------------------------------------------------------------------
# Inference
# --------------------------------------------------------------------------


@dataclass
class ScenePrediction:
    key_maps: np.ndarray  # (K, h, w) sounding maps per dictionary key
    class_maps: np.ndarray  # (num_classes, h, w) aligned to class ids
    agnostic: np.ndarray  # (h, w) localization map
    softmax: np.ndarray  # (K, h, w) per-location softmax over keys
    pv: np.ndarray
    pa: np.ndarray
    decisions: dict[int, bool]
    tau: float
    key_to_class: list[int]


def aggregate_to_classes(key_maps: np.ndarray, key_to_class, num_classes: int) -> np.ndarray:
    """Max over the keys assigned to each class; classes without a key get zeros."""
    out = np.zeros((num_classes,) + key_maps.shape[1:], dtype=key_maps.dtype)
    filled = np.zeros(num_classes, dtype=bool)
    for k, c in enumerate(key_to_class):
        if 0 <= c < num_classes:
            out[c] = np.maximum(out[c], key_maps[k]) if filled[c] else key_maps[k]
            filled[c] = True
    return out


def sounding_decisions(class_maps_: np.ndarray, tau_fraction: float = 0.10) -> tuple[dict[int, bool], float]:
    """A class is sounding when its map peaks at or above ``tau_fraction`` of the scene maximum."""
    tau = tau_fraction * float(class_maps_.max())
    return {c: bool(tau > 0 and class_maps_[c].max() >= tau) for c in range(class_maps_.shape[0])}, tau


@torch.no_grad()
def predict_scene(model: AVModel, keys: torch.Tensor, audio_event: AudioEventNet | None, spec, frame,
                  key_to_class=None, num_classes: int | None = None, tau_fraction: float = 0.10,
                  product_filter: bool = True) -> ScenePrediction:
    """Class-aware sounding maps and sounding/silent decisions for one scene."""
    model.eval()
    dtype = next(model.parameters()).dtype
    spec_t = torch.as_tensor(spec.values if isinstance(spec, Spectrogram) else spec, dtype=dtype)
    frame_t = torch.as_tensor(frame.pixels if isinstance(frame, FrameImage) else frame, dtype=dtype)
    if frame_t.shape[-1] == 3 and frame_t.shape[0] != 3:
        frame_t = frame_t.permute(2, 0, 1)
    feats = model.visual(frame_t[None])
    l, _ = model.head(model.audio.embed(spec_t[None, None]), feats)
    m = class_maps(feats, keys)
    s = sounding_filter(m, l) if product_filter else m
    pv = sounding_distribution(s)[0]
    pa = audio_distribution(spec_t, audio_event) if audio_event is not None else torch.full_like(pv, float("nan"))
    K = keys.shape[0]
    key_to_class = list(range(K)) if key_to_class is None else [int(c) for c in key_to_class]
    num_classes = num_classes or max(key_to_class) + 1
    key_maps = s[0].double().numpy()
    cm = aggregate_to_classes(key_maps, key_to_class, num_classes)
    decisions, tau = sounding_decisions(cm, tau_fraction)
    return ScenePrediction(
        key_maps=key_maps,
        class_maps=cm,
        agnostic=l[0].double().numpy(),
        softmax=torch.softmax(s[0], dim=0).double().numpy(),
        pv=pv.double().numpy(),
        pa=pa.double().numpy(),
        decisions=decisions,
        tau=tau,
        key_to_class=key_to_class,
    )


def save_prediction(out_dir, scene_id: str, pred: ScenePrediction) -> Path:
    """Write ``<id>.npz`` (float32 maps) and a ``<id>.json`` sidecar."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / f"{scene_id}.npz"
    np.savez(path, class_maps=pred.class_maps.astype(np.float32), key_maps=pred.key_maps.astype(np.float32),
             agnostic=pred.agnostic.astype(np.float32), softmax=pred.softmax.astype(np.float32))
    sidecar = {
        "id": scene_id,
        "decisions": {str(k): v for k, v in pred.decisions.items()},
        "pv": pred.pv.tolist(),
        "pa": [None if np.isnan(x) else x for x in pred.pa.tolist()],
        "tau": pred.tau,
        "key_to_class": pred.key_to_class,
    }
    (out_dir / f"{scene_id}.json").write_text(json.dumps(sidecar, indent=1) + "\n")
    return path
