"""Single-source curriculum: audiovisual matching, masked object features, K-means dictionary.

The schedule alternates between the matching objective and classification
on K-means pseudo labels::

    repeat alt_rounds times:
        matching phase -> extract masked features -> K-means -> re-init
        classifiers -> classification phase (until accuracy saturates)
    matching phase -> extract -> K-means  (final dictionary)
    fit classifier heads on the final pseudo labels (backbones frozen)

The last step keeps the audio classifier's output index aligned with the
dictionary rows, which stage 2 relies on.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from scipy.optimize import linear_sum_assignment
from sklearn.metrics import normalized_mutual_info_score

from .bank import SampleBank, iterate_batches, random_resized_crop
from .errors import ConfigError, DomainError, EmptyMask, LocalizationCollapsed, ShapeError, StateError
from .models import AVModel, BackboneConfig, LocalizationHead

logger = logging.getLogger(__name__)

DICTIONARY_VERSION = 1
BCE_EPS = 1e-7


@dataclass
class Stage1Config:
    mask_threshold: float = 0.05
    K: int = 4
    alt_rounds: int = 2
    loc_epochs: int = 6
    cls_max_epochs: int = 20
    cls_patience: int = 3
    cls_min_delta: float = 0.005
    head_fit_steps: int = 300
    head_fit_lr: float = 1e-2
    optimizer: str = "adam"
    lr: float = 1e-4
    batch_size: int = 16
    seed: int = 0
    kmeans_restarts: int = 10
    kmeans_max_iter: int = 100
    max_empty_rate: float = 0.5
    augment: bool = True
    label_smoothing: float = 0.1
    audio_mix_prob: float = 0.5
    audio_mix_gain: tuple[float, float] = (0.5, 1.5)

    def __post_init__(self):
        if not 0.0 <= self.audio_mix_prob <= 1.0:
            raise ConfigError("audio_mix_prob must be in [0, 1]")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ConfigError("label_smoothing must be in [0, 1)")
        if not 0.0 < self.mask_threshold < 1.0:
            raise ConfigError("mask_threshold must be in (0, 1)")
        if self.K < 2:
            raise ConfigError("K must be >= 2")
        if self.alt_rounds < 0 or self.loc_epochs < 0:
            raise ConfigError("alt_rounds and loc_epochs must be >= 0")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2 to form mismatched pairs")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")


def make_optimizer(name: str, params, lr: float) -> torch.optim.Optimizer:
    if name == "adam":
        return torch.optim.Adam(params, lr=lr)
    return torch.optim.SGD(params, lr=lr, momentum=0.9)


# --------------------------------------------------------------------------
# Matching objective
# --------------------------------------------------------------------------


def derangement(n: int, gen: torch.Generator | None = None) -> torch.Tensor:
    """Permutation with no fixed point: frame ``j`` is paired with audio ``perm[j]``."""
    if n < 2:
        raise ConfigError("need at least 2 samples to form mismatched pairs")
    order = torch.randperm(n, generator=gen)
    perm = torch.empty(n, dtype=torch.long)
    perm[order] = order.roll(-1)
    return perm


def match_loss(scores: torch.Tensor, y_match: torch.Tensor, eps: float = BCE_EPS) -> torch.Tensor:
    """Mean binary cross-entropy between match labels and localization scores."""
    if scores.numel() < 2:
        raise ConfigError("a matching batch needs at least 2 scores")
    s = scores.clamp(eps, 1.0 - eps)
    y = y_match.to(s.dtype)
    return -(y * torch.log(s) + (1.0 - y) * torch.log1p(-s)).mean()


def matching_objective(audio_emb: torch.Tensor, feats: torch.Tensor, head: LocalizationHead,
                       perm: torch.Tensor):
    """BCE over B matched and B deranged pairs.

    Returns ``(loss, matched_maps)`` so callers can reuse the matched maps.
    """
    maps, pos = head(audio_emb, feats)
    _, neg = head(audio_emb[perm], feats)
    scores = torch.cat([pos, neg])
    y = torch.cat([torch.ones_like(pos), torch.zeros_like(neg)])
    return match_loss(scores, y), maps


# --------------------------------------------------------------------------
# Masked object representation
# --------------------------------------------------------------------------


def binarize_map(l: torch.Tensor, threshold: float) -> torch.Tensor:
    return (l >= threshold).to(l.dtype)


def masked_average(feats: torch.Tensor, maps: torch.Tensor, threshold: float):
    """Average of ``feats`` over cells where ``maps >= threshold``.

    Batched: feats (B, C, H, W), maps (B, H, W). Returns ``(reprs, counts)``;
    rows with an empty mask are zero and have count 0.
    """
    if feats.shape[0] != maps.shape[0] or feats.shape[2:] != maps.shape[1:]:
        raise ShapeError(f"feature map {tuple(feats.shape)} and localization map {tuple(maps.shape)} disagree")
    mask = binarize_map(maps, threshold)
    counts = mask.flatten(1).sum(1)
    total = torch.einsum("bchw,bhw->bc", feats, mask)
    return total / counts.clamp_min(1.0)[:, None], counts


def extract_object_repr(f: torch.Tensor, l: torch.Tensor, threshold: float):
    """Object representation of one sample: ``(o, mask)``; raises EmptyMask."""
    if f.shape[1:] != l.shape:
        raise ShapeError(f"feature map {tuple(f.shape)} and localization map {tuple(l.shape)} disagree")
    reprs, counts = masked_average(f[None], l[None], threshold)
    if counts[0] == 0:
        raise EmptyMask(f"no cell reaches threshold {threshold}")
    return reprs[0], binarize_map(l, threshold)


# --------------------------------------------------------------------------
# K-means dictionary
# --------------------------------------------------------------------------


@dataclass
class KMeansResult:
    centroids: np.ndarray
    labels: np.ndarray
    objective: float
    history: list[float]  # objective after each assignment step of the kept run
    restart_objectives: list[float]
    restart_histories: list[list[float]]


def _sqdist(X: np.ndarray, C: np.ndarray) -> np.ndarray:
    return ((X[:, None, :] - C[None, :, :]) ** 2).sum(-1)


def kmeans_pp_init(X: np.ndarray, K: int, rng: np.random.Generator) -> np.ndarray:
    n = X.shape[0]
    chosen = [int(rng.integers(n))]
    d2 = ((X - X[chosen[0]]) ** 2).sum(1)
    for _ in range(1, K):
        total = d2.sum()
        if total > 0:
            idx = int(rng.choice(n, p=d2 / total))
        else:
            # all remaining points coincide with a chosen centre
            rest = np.setdiff1d(np.arange(n), chosen)
            idx = int(rng.choice(rest))
        chosen.append(idx)
        d2 = np.minimum(d2, ((X - X[idx]) ** 2).sum(1))
    return X[chosen].copy()


def lloyd(X: np.ndarray, centroids: np.ndarray, max_iter: int = 100):
    """Lloyd iterations; empty clusters are re-seeded at the farthest points."""
    C = centroids.copy()
    K = C.shape[0]
    history, labels = [], None
    for _ in range(max_iter):
        d = _sqdist(X, C)
        new_labels = d.argmin(1)
        history.append(float(d[np.arange(X.shape[0]), new_labels].sum()))
        if labels is not None and np.array_equal(new_labels, labels):
            break
        labels = new_labels
        for k in range(K):
            members = labels == k
            if members.any():
                C[k] = X[members].mean(0)
        empty = [k for k in range(K) if not (labels == k).any()]
        if empty:
            far = ((X - C[labels]) ** 2).sum(1)
            for k, idx in zip(empty, np.argsort(-far, kind="stable")):
                C[k] = X[idx]
                far[idx] = -1.0
    d = _sqdist(X, C)
    labels = d.argmin(1)
    return C, labels, float(d[np.arange(X.shape[0]), labels].sum()), history


def kmeans(X: np.ndarray, K: int, seed: int = 0, n_init: int = 10, max_iter: int = 100) -> KMeansResult:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise DomainError(f"expected an (N, C) matrix, got {X.shape}")
    if X.shape[0] < K:
        raise DomainError(f"need at least K={K} points, got {X.shape[0]}")
    rng = np.random.default_rng(seed)
    best = None
    objectives, histories = [], []
    for _ in range(n_init):
        C, labels, obj, hist = lloyd(X, kmeans_pp_init(X, K, rng), max_iter)
        objectives.append(obj)
        histories.append(hist)
        if best is None or obj < best[2]:
            best = (C, labels, obj, hist)
    C, labels, obj, hist = best
    return KMeansResult(C, labels, obj, hist, objectives, histories)


@dataclass
class ObjectDictionary:
    keys: np.ndarray  # (K, C)
    assignments: dict[str, int]
    objective: float = 0.0
    semantic_alignment: np.ndarray | None = None  # key index -> class id
    version: int = DICTIONARY_VERSION

    @property
    def K(self) -> int:
        return self.keys.shape[0]

    def one_hot(self, pair_id: str) -> np.ndarray:
        y = np.zeros(self.K, dtype=np.int64)
        y[self.assignments[pair_id]] = 1
        return y

    def labels_for(self, ids: Sequence[str]) -> np.ndarray:
        return np.array([self.assignments[i] for i in ids], dtype=np.int64)

    def save(self, path) -> None:
        ids = list(self.assignments)
        np.savez(
            path,
            version=np.int64(self.version),
            keys=self.keys.astype(np.float32),
            ids=np.array(ids, dtype=str),
            labels=np.array([self.assignments[i] for i in ids], dtype=np.int64),
            objective=np.float64(self.objective),
            alignment=(np.asarray(self.semantic_alignment, dtype=np.int64)
                       if self.semantic_alignment is not None else np.zeros(0, dtype=np.int64)),
        )

    @classmethod
    def load(cls, path) -> "ObjectDictionary":
        path = Path(path)
        if not path.exists():
            raise StateError(f"dictionary not found: {path}")
        with np.load(path) as z:
            if int(z["version"]) != DICTIONARY_VERSION:
                raise StateError(f"{path}: unsupported dictionary version {int(z['version'])}")
            align = z["alignment"]
            return cls(z["keys"].astype(np.float32), dict(zip(z["ids"].tolist(), z["labels"].tolist())),
                       float(z["objective"]), align if align.size else None)


def build_dictionary(reprs, K: int, seed: int = 0, ids: Sequence[str] | None = None,
                     n_init: int = 10, max_iter: int = 100):
    """K-means over object representations; returns ``(ObjectDictionary, KMeansResult)``."""
    X = np.stack([np.asarray(getattr(r, "values", r), dtype=np.float64) for r in reprs]) if isinstance(reprs, list) else np.asarray(reprs, dtype=np.float64)
    if ids is None:
        ids = [getattr(r, "source_pair_id", str(i)) for i, r in enumerate(reprs)] if isinstance(reprs, list) else [str(i) for i in range(len(X))]
    res = kmeans(X, K, seed, n_init, max_iter)
    d = ObjectDictionary(res.centroids.astype(np.float32), dict(zip(ids, res.labels.tolist())), res.objective)
    return d, res


def nmi(labels_true, labels_pred) -> float:
    return float(normalized_mutual_info_score(labels_true, labels_pred))


def align_semantics(assignments, true_labels, K: int | None = None, num_classes: int | None = None) -> np.ndarray:
    """Map each cluster index to a class id.

    Hungarian matching on the cluster/class contingency table gives every
    class one cluster; surplus clusters join their majority class.
    """
    a = np.asarray(assignments, dtype=np.int64)
    y = np.asarray(true_labels, dtype=np.int64)
    K = int(K if K is not None else a.max() + 1)
    n_cls = int(num_classes if num_classes is not None else y.max() + 1)
    table = np.zeros((K, n_cls), dtype=np.int64)
    np.add.at(table, (a, y), 1)
    rows, cols = linear_sum_assignment(-table)
    mapping = np.full(K, -1, dtype=np.int64)
    mapping[rows] = cols
    for k in np.flatnonzero(mapping < 0):
        mapping[k] = int(np.argmax(table[k]))
    return mapping


# --------------------------------------------------------------------------
# Alternating optimisation
# --------------------------------------------------------------------------


@dataclass
class Stage1Result:
    model: AVModel
    dictionary: ObjectDictionary
    pseudo_labels: np.ndarray
    log: list[dict] = field(default_factory=list)
    nmi: float | None = None


class JsonlLog:
    """Collects phase records and mirrors them to a JSON-lines file."""

    def __init__(self, path=None):
        self.records: list[dict] = []
        self.path = Path(path) if path else None
        if self.path:
            self.path.write_text("")

    def __call__(self, **rec):
        self.records.append(rec)
        logger.info(" ".join(f"{k}={v:.6g}" if isinstance(v, float) else f"{k}={v}" for k, v in rec.items()))
        if self.path:
            with self.path.open("a") as fh:
                fh.write(json.dumps(rec) + "\n")


def _frames(bank: SampleBank, idx, gen, augment: bool):
    x = bank.frames[idx]
    return random_resized_crop(x, gen) if augment else x


def train_matching(model: AVModel, opt, bank: SampleBank, epochs: int, batch_size: int, gen: torch.Generator,
                   augment: bool, log: Callable, round_idx: int, phase: str = "loc"):
    model.train()
    for epoch in range(epochs):
        losses = []
        for idx in iterate_batches(len(bank), batch_size, gen):
            feats = model.visual(_frames(bank, idx, gen, augment))
            audio = model.audio.embed(bank.specs[idx])
            loss, _ = matching_objective(audio, feats, model.head, derangement(len(idx), gen))
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(loss.item())
        log(phase=phase, round=round_idx, epoch=epoch, loss=float(np.mean(losses)))


@torch.no_grad()
def extract_representations(model: AVModel, bank: SampleBank, threshold: float, batch_size: int = 64):
    """Masked object features for every sample; returns ``(reprs, counts)`` as numpy."""
    model.eval()
    reprs, counts = [], []
    for start in range(0, len(bank), batch_size):
        sl = slice(start, start + batch_size)
        feats = model.visual(bank.frames[sl])
        maps, _ = model.head(model.audio.embed(bank.specs[sl]), feats)
        r, c = masked_average(feats, maps, threshold)
        reprs.append(r)
        counts.append(c)
    return torch.cat(reprs).double().numpy(), torch.cat(counts).numpy()


def cluster_step(model, bank, cfg: Stage1Config, log, round_idx: int):
    reprs, counts = extract_representations(model, bank, cfg.mask_threshold)
    keep = counts > 0
    empty_rate = 1.0 - keep.mean()
    if empty_rate > cfg.max_empty_rate:
        raise LocalizationCollapsed(
            f"round {round_idx}: {empty_rate:.0%} of samples have an empty mask at threshold "
            f"{cfg.mask_threshold}; the localization maps collapsed"
        )
    ids = [i for i, k in zip(bank.ids, keep) if k]
    dictionary, res = build_dictionary(reprs[keep], cfg.K, cfg.seed + round_idx, ids,
                                       cfg.kmeans_restarts, cfg.kmeans_max_iter)
    labels = np.full(len(bank), -1, dtype=np.int64)
    labels[keep] = res.labels
    rec = dict(phase="kmeans", round=round_idx, kmeans_objective=res.objective,
               empty_masks=int((~keep).sum()), mean_mask_cells=float(counts[keep].mean()))
    truth = np.array([c if c is not None else -1 for c in bank.class_ids])
    if (truth[keep] >= 0).all():
        rec["nmi"] = nmi(truth[keep], res.labels)
    log(**rec)
    return dictionary, labels


def mix_spectrograms(specs: torch.Tensor, labels: torch.Tensor, num_classes: int, gen: torch.Generator,
                     prob: float, gain_range=(0.5, 1.5)):
    """Mix a random subset of log-Mel inputs with a shuffled partner from the same batch.

    Power spectra add, so two log-power inputs combine with ``logaddexp``
    (cross terms between the clips are ignored). A mixed sample's target puts
    half its mass on each pseudo label. Returns ``(specs, soft_targets)``.
    """
    n = specs.shape[0]
    target = F.one_hot(labels, num_classes).to(specs.dtype)
    if prob <= 0 or n < 2:
        return specs, target
    partner = torch.randperm(n, generator=gen)
    chosen = torch.rand(n, generator=gen) < prob
    lo, hi = gain_range
    g = lo + (hi - lo) * torch.rand(n, 2, generator=gen, dtype=specs.dtype)
    log_g = 2.0 * torch.log(g)[:, :, None, None]
    mixed = torch.logaddexp(specs + log_g[:, 0], specs[partner] + log_g[:, 1])
    out = torch.where(chosen[:, None, None], mixed, specs)
    mixed_t = 0.5 * (target + target[partner])
    return out, torch.where(chosen[:, None], mixed_t, target)


def train_classifiers(model: AVModel, bank: SampleBank, labels: np.ndarray, cfg: Stage1Config,
                      gen: torch.Generator, log, round_idx: int):
    """Classification phase on pseudo labels; stops when accuracy saturates."""
    model.reset_classifiers()
    opt = make_optimizer(cfg.optimizer, model.parameters(), cfg.lr)
    valid = torch.from_numpy(np.flatnonzero(labels >= 0))
    y_all = torch.from_numpy(labels)
    best, stale = -1.0, 0
    model.train()
    for epoch in range(cfg.cls_max_epochs):
        correct, total, losses = 0, 0, []
        for b in iterate_batches(len(valid), cfg.batch_size, gen):
            idx = valid[b]
            y = y_all[idx]
            specs, a_target = mix_spectrograms(bank.specs[idx], y, cfg.K, gen, cfg.audio_mix_prob, cfg.audio_mix_gain)
            a_logits = model.audio_logits(specs)
            v_logits = model.visual_logits(_frames(bank, idx, gen, cfg.augment))
            ls = cfg.label_smoothing
            loss = (F.cross_entropy(a_logits, a_target, label_smoothing=ls)
                    + F.cross_entropy(v_logits, y, label_smoothing=ls))
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(loss.item())
            correct += int((a_logits.argmax(1) == a_target.argmax(1)).sum() + (v_logits.argmax(1) == y).sum())
            total += 2 * len(idx)
        acc = correct / max(total, 1)
        log(phase="cls", round=round_idx, epoch=epoch, loss=float(np.mean(losses)), acc=acc)
        if acc >= best + cfg.cls_min_delta:
            best, stale = acc, 0
        else:
            stale += 1
            if stale >= cfg.cls_patience:
                break


def fit_classifier_heads(model: AVModel, bank: SampleBank, labels: np.ndarray, cfg: Stage1Config, log):
    """Fit fresh linear heads on frozen embeddings so they index dictionary rows."""
    model.reset_classifiers()
    model.eval()
    valid = torch.from_numpy(np.flatnonzero(labels >= 0))
    y = torch.from_numpy(labels)[valid]
    gen = torch.Generator().manual_seed(cfg.seed + 7)
    specs, a_target = mix_spectrograms(bank.specs[valid], y, cfg.K, gen, cfg.audio_mix_prob, cfg.audio_mix_gain)
    with torch.no_grad():
        a_emb = model.audio.embed(torch.cat([bank.specs[valid], specs]))
        v_emb = model.visual(bank.frames[valid]).mean(dim=(2, 3))
    a_target = torch.cat([F.one_hot(y, cfg.K).to(a_emb.dtype), a_target])
    params = list(model.audio_cls.parameters()) + list(model.visual_cls.parameters())
    opt = torch.optim.Adam(params, lr=cfg.head_fit_lr)
    for _ in range(cfg.head_fit_steps):
        ls = cfg.label_smoothing
        loss = (F.cross_entropy(model.audio_cls(a_emb), a_target, label_smoothing=ls)
                + F.cross_entropy(model.visual_cls(v_emb), y, label_smoothing=ls))
        opt.zero_grad()
        loss.backward()
        opt.step()
    with torch.no_grad():
        a_acc = float((model.audio_cls(a_emb[: len(y)]).argmax(1) == y).double().mean())
        v_acc = float((model.visual_cls(v_emb).argmax(1) == y).double().mean())
    log(phase="head_fit", round=-1, epoch=0, loss=float(loss.item()), acc=a_acc, visual_acc=v_acc)


def alternating_train(bank: SampleBank, cfg: Stage1Config, model: AVModel | None = None,
                      visual_cfg: BackboneConfig | None = None, audio_cfg: BackboneConfig | None = None,
                      log_path=None, on_round_start: Callable | None = None) -> Stage1Result:
    """Run the full stage-1 schedule on single-source samples."""
    if any(c != 1 for c in bank.source_counts):
        raise DomainError("stage 1 trains on single-source samples only")
    if len(bank) < cfg.K:
        raise DomainError(f"need at least K={cfg.K} samples, got {len(bank)}")
    torch.manual_seed(cfg.seed)
    gen = torch.Generator().manual_seed(cfg.seed)
    model = model or AVModel(cfg.K, visual_cfg, audio_cfg)
    log = JsonlLog(log_path)
    loc_params = list(model.visual.parameters()) + list(model.audio.parameters()) + list(model.head.parameters())
    loc_opt = make_optimizer(cfg.optimizer, loc_params, cfg.lr)

    for r in range(cfg.alt_rounds):
        train_matching(model, loc_opt, bank, cfg.loc_epochs, cfg.batch_size, gen, cfg.augment, log, r)
        _, labels = cluster_step(model, bank, cfg, log, r)
        if on_round_start is not None:
            on_round_start(r, model)
        train_classifiers(model, bank, labels, cfg, gen, log, r)

    final_round = cfg.alt_rounds
    train_matching(model, loc_opt, bank, cfg.loc_epochs, cfg.batch_size, gen, cfg.augment, log, final_round)
    dictionary, labels = cluster_step(model, bank, cfg, log, final_round)
    fit_classifier_heads(model, bank, labels, cfg, log)

    truth = np.array([c if c is not None else -1 for c in bank.class_ids])
    score = None
    if (truth >= 0).all():
        keep = labels >= 0
        score = nmi(truth[keep], labels[keep])
        dictionary.semantic_alignment = align_semantics(labels[keep], truth[keep], cfg.K)
    model.eval()
    return Stage1Result(model, dictionary, labels, log.records, score)
