"""Audiovisual samples, cocktail-scene synthesis and the procedural toy world.

The toy world stands in for instrument videos. Class ``k`` sounds like a
steady tone at ``220 * 2**(k/2)`` Hz with a third partial, and looks like a
saturated glyph with a class-specific shape and hue placed on a muted,
smoothly varying background. Every generator is a pure function of its
arguments and seed.
"""

from __future__ import annotations

import colorsys
import enum
import io
import json
import wave
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .errors import DomainError, ValidationError

MANIFEST_VERSION = 1
CANONICAL_RATE = 16000
CANONICAL_DURATION = 1.0
TOY_FRAME_SIZE = 112
PAPER_FRAME_SIZE = 224


@dataclass
class AudioClip:
    samples: np.ndarray
    sample_rate: int = CANONICAL_RATE
    duration_s: float = CANONICAL_DURATION
    class_id: int | None = None

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        expected = int(round(self.sample_rate * self.duration_s))
        if self.samples.ndim != 1 or self.samples.size != expected:
            raise DomainError(
                f"clip has {self.samples.shape} samples, expected ({expected},) "
                f"for {self.duration_s}s at {self.sample_rate} Hz"
            )
        if not np.all(np.isfinite(self.samples)):
            raise DomainError("audio samples must be finite")


@dataclass
class FrameImage:
    pixels: np.ndarray  # (H, W, 3) in [0, 1]
    class_ids_present: frozenset[int] | None = None

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float32)
        if self.pixels.ndim != 3 or self.pixels.shape[2] != 3:
            raise DomainError(f"frame must be HxWx3, got {self.pixels.shape}")

    @property
    def size(self) -> tuple[int, int]:
        return self.pixels.shape[0], self.pixels.shape[1]


@dataclass
class Box:
    class_id: int
    bbox: tuple[int, int, int, int]  # x, y, w, h
    sounding: bool

    def to_dict(self) -> dict:
        return {"class_id": int(self.class_id), "bbox": [int(v) for v in self.bbox], "sounding": bool(self.sounding)}

    @classmethod
    def from_dict(cls, d: dict) -> "Box":
        return cls(int(d["class_id"]), tuple(int(v) for v in d["bbox"]), bool(d["sounding"]))


@dataclass
class SceneAnnotation:
    boxes: list[Box]
    frame_size: tuple[int, int]  # H, W

    def __post_init__(self):
        h, w = self.frame_size
        for b in self.boxes:
            x, y, bw, bh = b.bbox
            if x < 0 or y < 0 or bw <= 0 or bh <= 0 or x + bw > w or y + bh > h:
                raise ValidationError(f"box {b.bbox} outside frame {self.frame_size}")

    @property
    def sounding_classes(self) -> list[int]:
        return sorted({b.class_id for b in self.boxes if b.sounding})

    @property
    def silent_classes(self) -> list[int]:
        sounding = set(self.sounding_classes)
        return sorted({b.class_id for b in self.boxes if not b.sounding} - sounding)

    def boxes_for(self, class_id: int) -> list[Box]:
        return [b for b in self.boxes if b.class_id == class_id]

    def to_dict(self) -> dict:
        return {"boxes": [b.to_dict() for b in self.boxes], "frame_size": [int(v) for v in self.frame_size]}

    @classmethod
    def from_dict(cls, d: dict) -> "SceneAnnotation":
        return cls([Box.from_dict(b) for b in d["boxes"]], tuple(int(v) for v in d["frame_size"]))


@dataclass
class AVPair:
    audio: AudioClip
    frame: FrameImage
    pair_id: str
    source_count: int = 1
    annotation: SceneAnnotation | None = None

    def __post_init__(self):
        if self.source_count < 1:
            raise DomainError("source_count must be >= 1")

    @property
    def is_single_source(self) -> bool:
        return self.source_count == 1


# --------------------------------------------------------------------------
# Toy world
# --------------------------------------------------------------------------

SHAPES = ("disk", "square", "triangle", "cross", "ring", "diamond", "saltire", "bars")


def default_tones(num_classes: int) -> list[float]:
    return [220.0 * 2.0 ** (k / 2.0) for k in range(num_classes)]


def default_colors(num_classes: int) -> list[tuple[float, float, float]]:
    return [colorsys.hsv_to_rgb(k / num_classes, 0.9, 0.95) for k in range(num_classes)]


@dataclass
class ToyWorldSpec:
    num_classes: int = 4
    tones_per_class: list[float] | None = None
    shapes: list[str] | None = None
    colors: list[tuple[float, float, float]] | None = None
    noise_level: float = 0.05
    seed: int = 0
    frame_size: int = TOY_FRAME_SIZE
    sample_rate: int = CANONICAL_RATE
    duration_s: float = CANONICAL_DURATION
    glyph_scale: tuple[float, float] = (0.45, 0.75)
    third_partial: tuple[float, float] = (0.2, 0.4)
    notes: tuple[int, int] | None = (2, 4)

    def __post_init__(self):
        if self.num_classes < 1:
            raise DomainError("num_classes must be >= 1")
        if self.num_classes > len(SHAPES):
            raise DomainError(f"toy world supports at most {len(SHAPES)} classes")
        if self.tones_per_class is None:
            self.tones_per_class = default_tones(self.num_classes)
        if self.shapes is None:
            self.shapes = list(SHAPES[: self.num_classes])
        if self.colors is None:
            self.colors = default_colors(self.num_classes)
        self.tones_per_class = [float(t) for t in self.tones_per_class]
        self.colors = [tuple(float(c) for c in col) for col in self.colors]
        if not (len(self.tones_per_class) == len(self.shapes) == len(self.colors) == self.num_classes):
            raise DomainError("tones, shapes and colors must each have num_classes entries")
        if len(set(self.tones_per_class)) != self.num_classes or len(set(self.shapes)) != self.num_classes:
            raise DomainError("each class needs a unique tone and glyph shape")
        if self.noise_level < 0:
            raise DomainError("noise_level must be >= 0")

    def to_dict(self) -> dict:
        return {
            "num_classes": self.num_classes,
            "tones_per_class": list(self.tones_per_class),
            "shapes": list(self.shapes),
            "colors": [list(c) for c in self.colors],
            "noise_level": self.noise_level,
            "seed": self.seed,
            "frame_size": self.frame_size,
            "sample_rate": self.sample_rate,
            "duration_s": self.duration_s,
            "glyph_scale": list(self.glyph_scale),
            "third_partial": list(self.third_partial),
            "notes": None if self.notes is None else list(self.notes),
        }


def _rng(*keys: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(k) & 0xFFFFFFFF for k in keys]))


def glyph_mask(shape: str, size: int) -> np.ndarray:
    """Binary (size, size) mask of a glyph shape."""
    c = (np.arange(size) + 0.5) / size * 2.0 - 1.0
    v, u = np.meshgrid(c, c, indexing="ij")
    r = np.hypot(u, v)
    if shape == "disk":
        m = r <= 1.0
    elif shape == "square":
        m = np.maximum(np.abs(u), np.abs(v)) <= 0.85
    elif shape == "triangle":
        m = (v <= 0.9) & (np.abs(u) <= (v + 0.9) / 1.8 * 0.95)
    elif shape == "cross":
        m = ((np.abs(u) <= 0.3) & (np.abs(v) <= 0.95)) | ((np.abs(v) <= 0.3) & (np.abs(u) <= 0.95))
    elif shape == "ring":
        m = (r <= 1.0) & (r >= 0.55)
    elif shape == "diamond":
        m = np.abs(u) + np.abs(v) <= 1.0
    elif shape == "saltire":
        m = ((np.abs(u - v) <= 0.35) | (np.abs(u + v) <= 0.35)) & (np.maximum(np.abs(u), np.abs(v)) <= 0.95)
    elif shape == "bars":
        m = (np.maximum(np.abs(u), np.abs(v)) <= 0.95) & (np.floor((v + 1.0) * 2.5) % 2 == 0)
    else:
        raise DomainError(f"unknown glyph shape {shape!r}")
    return m


def background_texture(size: int, seed_keys: Sequence[int]) -> np.ndarray:
    """Muted, smoothly varying (size, size, 3) background."""
    rng = _rng(*seed_keys, 0xB6)
    coarse = rng.uniform(0.0, 1.0, size=(1, 3, 5, 5)).astype(np.float32)
    smooth = F.interpolate(torch.from_numpy(coarse), size=(size, size), mode="bilinear", align_corners=True)[0]
    grey = rng.uniform(0.3, 0.6)
    tex = grey + 0.15 * (smooth.numpy().transpose(1, 2, 0) - 0.5)
    return np.clip(tex, 0.0, 1.0).astype(np.float32)


def _tight_bbox(mask: np.ndarray) -> tuple[int, int, int, int]:
    ys, xs = np.nonzero(mask)
    return int(xs.min()), int(ys.min()), int(xs.max() - xs.min() + 1), int(ys.max() - ys.min() + 1)


def render_solo_frame(spec: ToyWorldSpec, class_id: int, rng_seed: int, with_glyph: bool = True):
    """Render a solo frame; returns (pixels, glyph_bbox).

    With ``with_glyph=False`` only the background (plus pixel noise) is drawn,
    which lets callers check that the glyph touches nothing outside its box.
    """
    size = spec.frame_size
    rng = _rng(spec.seed, class_id, rng_seed, 0xF1)
    lo, hi = spec.glyph_scale
    g = int(round(rng.uniform(lo, hi) * size))
    x0 = int(rng.integers(0, size - g + 1))
    y0 = int(rng.integers(0, size - g + 1))
    shade = rng.uniform(0.85, 1.0)
    pixels = background_texture(size, (spec.seed, class_id, rng_seed))
    mask = glyph_mask(spec.shapes[class_id], g)
    color = np.asarray(spec.colors[class_id], dtype=np.float32) * shade
    if with_glyph:
        region = pixels[y0 : y0 + g, x0 : x0 + g]
        region[mask] = color
    bx, by, bw, bh = _tight_bbox(mask)
    if spec.noise_level > 0:
        noise_rng = _rng(spec.seed, class_id, rng_seed, 0xA0)
        pixels = pixels + noise_rng.normal(0.0, spec.noise_level / 2.0, size=pixels.shape).astype(np.float32)
        pixels = np.clip(pixels, 0.0, 1.0)
    return pixels.astype(np.float32), (x0 + bx, y0 + by, bw, bh)


def note_envelope(n: int, rate: int, rng: np.random.Generator, notes: tuple[int, int],
                  ramp_s: float = 0.01) -> np.ndarray:
    """Gate made of a few notes with short linear ramps, separated by silences.

    The clip is cut at random into ``2 * count`` slots; every other slot,
    starting at a random parity, holds a note.
    """
    count = int(rng.integers(notes[0], notes[1] + 1))
    cuts = np.sort(rng.uniform(0.0, 1.0, size=2 * count - 1))
    edges = np.concatenate([[0], (cuts * n).astype(int), [n]])
    parity = int(rng.integers(0, 2))
    env = np.zeros(n)
    ramp = max(1, int(ramp_s * rate))
    for i in range(parity, 2 * count, 2):
        a, b = int(edges[i]), int(edges[i + 1])
        if b - a < 2:
            continue
        seg = np.ones(b - a)
        r = min(ramp, (b - a) // 2)
        seg[:r] = np.linspace(0.0, 1.0, r, endpoint=False)
        seg[len(seg) - r :] = np.linspace(1.0, 0.0, r, endpoint=False)
        env[a:b] = seg
    return env


def render_solo_audio(spec: ToyWorldSpec, class_id: int, rng_seed: int) -> np.ndarray:
    n = int(round(spec.sample_rate * spec.duration_s))
    rng = _rng(spec.seed, class_id, rng_seed, 0xA1)
    t = np.arange(n) / spec.sample_rate
    f0 = spec.tones_per_class[class_id]
    amp = rng.uniform(0.3, 0.6)
    third = rng.uniform(*spec.third_partial)
    phase = rng.uniform(0.0, 2.0 * np.pi, size=2)
    x = amp * (np.sin(2 * np.pi * f0 * t + phase[0]) + third * np.sin(2 * np.pi * 3 * f0 * t + phase[1]))
    if spec.notes is not None:
        x = x * note_envelope(n, spec.sample_rate, rng, spec.notes)
    if spec.noise_level > 0:
        x = x + rng.normal(0.0, spec.noise_level, size=n)
    return np.clip(x, -1.0, 1.0)


def make_solo_pair(spec: ToyWorldSpec, class_id: int, rng_seed: int) -> AVPair:
    """Single-source pair: class tone plus class glyph at a seeded position."""
    if not 0 <= class_id < spec.num_classes:
        raise DomainError(f"class_id {class_id} outside [0, {spec.num_classes})")
    audio = AudioClip(render_solo_audio(spec, class_id, rng_seed), spec.sample_rate, spec.duration_s, class_id)
    pixels, bbox = render_solo_frame(spec, class_id, rng_seed)
    frame = FrameImage(pixels, frozenset({class_id}))
    ann = SceneAnnotation([Box(class_id, bbox, True)], (spec.frame_size, spec.frame_size))
    return AVPair(audio, frame, f"solo-c{class_id}-s{rng_seed}", 1, ann)


# --------------------------------------------------------------------------
# Cocktail synthesis
# --------------------------------------------------------------------------


@dataclass
class JitterParams:
    """Per-clip random gain and circular time shift applied before mixing."""

    gain_range: tuple[float, float] = (0.5, 1.5)
    max_shift_s: float = 0.1
    num_sounding: int = 2


def mix_clips(clips: Sequence[np.ndarray], gains: Sequence[float], shifts: Sequence[int]):
    """Sum of gained, circularly shifted clips, divided by ``max(1, peak)``.

    Returns ``(mixed, scale)`` where ``mixed * scale`` is the raw sum.
    """
    raw = np.zeros_like(np.asarray(clips[0], dtype=np.float64))
    for clip, g, s in zip(clips, gains, shifts):
        raw = raw + g * np.roll(np.asarray(clip, dtype=np.float64), int(s))
    scale = max(1.0, float(np.max(np.abs(raw))))
    return raw / scale, scale


def resize_frame(pixels: np.ndarray, size: int | tuple[int, int]) -> np.ndarray:
    """Antialiased bilinear resize of an (H, W, 3) frame."""
    if isinstance(size, int):
        size = (size, size)
    if tuple(pixels.shape[:2]) == tuple(size):
        return np.asarray(pixels, dtype=np.float32).copy()
    t = torch.from_numpy(np.ascontiguousarray(pixels, dtype=np.float32)).permute(2, 0, 1)[None]
    out = F.interpolate(t, size=size, mode="bilinear", align_corners=False, antialias=True)
    return out[0].permute(1, 2, 0).clamp(0.0, 1.0).numpy()


def preprocess_frame(pixels: np.ndarray, size: int, rng: np.random.Generator | None = None) -> np.ndarray:
    """Resize to ``size * 256 / 224`` then crop to ``size``.

    The crop is random when ``rng`` is given (training) and the frame is
    resized straight to ``size`` otherwise, so annotations stay aligned.
    """
    if rng is None:
        return resize_frame(pixels, size)
    big = int(round(size * 256 / 224))
    resized = resize_frame(pixels, big)
    oy, ox = rng.integers(0, big - size + 1, size=2)
    return resized[oy : oy + size, ox : ox + size]


def synthesize_cocktail(solos: Sequence[AVPair], jitter: JitterParams | None = None, rng_seed: int = 0,
                        out_size: int | None = None, pair_id: str | None = None):
    """Build a 2x2 grid scene from four solos with two of them sounding.

    Returns ``(pair, annotation)``.
    """
    jitter = jitter or JitterParams()
    if len(solos) != 4:
        raise DomainError(f"a cocktail needs exactly 4 solos, got {len(solos)}")
    classes = [p.audio.class_id for p in solos]
    if any(c is None for c in classes) or len(set(classes)) != 4:
        raise DomainError(f"solo class ids must be known and distinct, got {classes}")
    rates = {p.audio.sample_rate for p in solos}
    durations = {p.audio.duration_s for p in solos}
    if len(rates) != 1 or len(durations) != 1:
        raise DomainError(f"solos disagree on sample rate/duration: {rates}, {durations}")
    tile = solos[0].frame.size
    if any(p.frame.size != tile for p in solos):
        raise DomainError("solo frames must share one size")
    if not 1 <= jitter.num_sounding <= 4:
        raise DomainError("num_sounding must be in [1, 4]")

    rate = rates.pop()
    rng = np.random.default_rng(rng_seed)
    order = rng.permutation(4)  # order[q] = solo placed in quadrant q
    chosen = np.sort(rng.choice(4, size=jitter.num_sounding, replace=False))
    gains = rng.uniform(jitter.gain_range[0], jitter.gain_range[1], size=jitter.num_sounding)
    max_shift = int(round(jitter.max_shift_s * rate))
    shifts = rng.integers(-max_shift, max_shift + 1, size=jitter.num_sounding)

    mixed, _ = mix_clips([solos[i].audio.samples for i in chosen], gains, shifts)
    audio = AudioClip(mixed, rate, solos[0].audio.duration_s, None)

    th, tw = tile
    grid = np.zeros((2 * th, 2 * tw, 3), dtype=np.float32)
    out_size = out_size or th
    sy, sx = out_size / (2 * th), out_size / (2 * tw)
    boxes = []
    for q, src in enumerate(order):
        r, c = divmod(q, 2)
        grid[r * th : (r + 1) * th, c * tw : (c + 1) * tw] = solos[src].frame.pixels
        for b in solos[src].annotation.boxes if solos[src].annotation else []:
            x, y, w, h = b.bbox
            x0 = int(np.floor((x + c * tw) * sx))
            y0 = int(np.floor((y + r * th) * sy))
            x1 = int(np.ceil((x + w + c * tw) * sx))
            y1 = int(np.ceil((y + h + r * th) * sy))
            boxes.append(Box(classes[src], (x0, y0, x1 - x0, y1 - y0), bool(src in chosen)))
    pixels = resize_frame(grid, out_size)
    frame = FrameImage(pixels, frozenset(classes))
    ann = SceneAnnotation(boxes, (out_size, out_size))
    pid = pair_id or "mix-" + "-".join(p.pair_id for p in solos) + f"-s{rng_seed}"
    pair = AVPair(audio, frame, pid, jitter.num_sounding, ann)
    return pair, ann


# --------------------------------------------------------------------------
# File formats and manifests
# --------------------------------------------------------------------------


class Split(str, enum.Enum):
    STAGE1 = "stage1"
    STAGE2 = "stage2"
    TEST = "test"


def write_wav(path, samples: np.ndarray, sample_rate: int = CANONICAL_RATE) -> None:
    pcm = np.clip(np.round(np.asarray(samples) * 32767.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(int(sample_rate))
        w.writeframes(pcm.tobytes())


def read_wav(path) -> tuple[np.ndarray, int]:
    with wave.open(str(path), "rb") as w:
        if w.getnchannels() != 1 or w.getsampwidth() != 2:
            raise ValidationError(f"{path}: expected 16-bit mono PCM")
        rate = w.getframerate()
        data = np.frombuffer(w.readframes(w.getnframes()), dtype="<i2")
    return data.astype(np.float64) / 32767.0, rate


def write_png(path, pixels: np.ndarray) -> None:
    arr = np.clip(np.round(np.asarray(pixels) * 255.0), 0, 255).astype(np.uint8)
    buf = io.BytesIO()
    Image.fromarray(arr, mode="RGB").save(buf, format="PNG", optimize=False)
    Path(path).write_bytes(buf.getvalue())


def read_png(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0


@dataclass
class ManifestSample:
    id: str
    audio_path: str
    frame_path: str
    source_count: int
    annotation: SceneAnnotation | None = None
    class_id: int | None = None

    def to_dict(self) -> dict:
        d = {"id": self.id, "audio_path": self.audio_path, "frame_path": self.frame_path,
             "source_count": int(self.source_count)}
        if self.annotation is not None:
            d["annotation"] = self.annotation.to_dict()
        if self.class_id is not None:
            d["class_id"] = int(self.class_id)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ManifestSample":
        ann = SceneAnnotation.from_dict(d["annotation"]) if d.get("annotation") else None
        return cls(d["id"], d["audio_path"], d["frame_path"], int(d["source_count"]), ann, d.get("class_id"))


@dataclass
class DatasetManifest:
    split: Split
    num_classes: int
    samples: list[ManifestSample] = field(default_factory=list)
    version: int = MANIFEST_VERSION
    root: Path | None = field(default=None, compare=False)

    def to_dict(self) -> dict:
        return {"version": self.version, "split": Split(self.split).value,
                "num_classes": int(self.num_classes), "samples": [s.to_dict() for s in self.samples]}

    def resolve(self, rel: str) -> Path:
        return (self.root or Path(".")) / rel

    def __len__(self) -> int:
        return len(self.samples)


def validate_split(pairs: Sequence[AVPair], split: Split | str) -> Split:
    split = Split(split)
    if split is Split.STAGE1:
        bad = [p.pair_id for p in pairs if p.source_count != 1]
        if bad:
            raise ValidationError(f"stage1 split accepts single-source pairs only; got {bad[:3]}")
    return split


def build_manifest(pairs: Sequence[AVPair], annotations: Sequence[SceneAnnotation | None] | None,
                   split: Split | str, out_dir, num_classes: int, name: str | None = None) -> Path:
    """Write audio/frames for ``pairs`` and a JSON manifest; return its path."""
    if not pairs:
        raise ValidationError("cannot build a manifest from zero pairs")
    split = validate_split(pairs, split)
    if annotations is None:
        annotations = [p.annotation for p in pairs]
    if len(annotations) != len(pairs):
        raise ValidationError("annotations must align with pairs")
    out_dir = Path(out_dir)
    (out_dir / "audio").mkdir(parents=True, exist_ok=True)
    (out_dir / "frames").mkdir(parents=True, exist_ok=True)
    samples = []
    for pair, ann in zip(pairs, annotations):
        audio_rel = f"audio/{pair.pair_id}.wav"
        frame_rel = f"frames/{pair.pair_id}.png"
        write_wav(out_dir / audio_rel, pair.audio.samples, pair.audio.sample_rate)
        write_png(out_dir / frame_rel, pair.frame.pixels)
        samples.append(ManifestSample(pair.pair_id, audio_rel, frame_rel, pair.source_count, ann,
                                      pair.audio.class_id if pair.source_count == 1 else None))
    manifest = DatasetManifest(split, num_classes, samples, root=out_dir)
    path = out_dir / f"{name or split.value}.json"
    save_manifest(manifest, path)
    return path


def save_manifest(manifest: DatasetManifest, path) -> None:
    Path(path).write_text(json.dumps(manifest.to_dict(), indent=1, sort_keys=True) + "\n")


def load_manifest(path) -> DatasetManifest:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    d = json.loads(path.read_text())
    if d.get("version") != MANIFEST_VERSION:
        raise ValidationError(f"{path}: unsupported manifest version {d.get('version')}")
    samples = [ManifestSample.from_dict(s) for s in d["samples"]]
    split = Split(d["split"])
    if split is Split.STAGE1 and any(s.source_count != 1 for s in samples):
        raise ValidationError(f"{path}: stage1 manifest lists multi-source samples")
    return DatasetManifest(split, int(d["num_classes"]), samples, int(d["version"]), root=path.parent)


def load_sample(manifest: DatasetManifest, sample: ManifestSample) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(audio_samples, frame_pixels)`` for one manifest entry."""
    audio, rate = read_wav(manifest.resolve(sample.audio_path))
    if rate != CANONICAL_RATE:
        from .dsp import resample

        audio, _ = resample((audio, rate), CANONICAL_RATE)
    return audio, read_png(manifest.resolve(sample.frame_path))


# --------------------------------------------------------------------------
# Toy dataset generation
# --------------------------------------------------------------------------


def generate_toy_dataset(spec: ToyWorldSpec, out_dir, n_solos: int, n_cocktails: int,
                         test_fraction: float = 0.3, jitter: JitterParams | None = None) -> dict[str, Path]:
    """Write the stage-1 solo set and the stage-2/test cocktail sets.

    Solo ``i`` has class ``i % K``. Cocktails draw their four sources from a
    disjoint seed range so the single- and multi-source sets never overlap.
    """
    K = spec.num_classes
    if K < 4:
        raise ValidationError(f"cocktail scenes need at least 4 distinct classes, got K={K}")
    if n_solos < 1 or n_cocktails < 2:
        raise ValidationError("need at least one solo and two cocktails")
    if not 0.0 < test_fraction < 1.0:
        raise ValidationError("test_fraction must be in (0, 1)")
    solos = [make_solo_pair(spec, i % K, i) for i in range(n_solos)]
    cocktails = []
    for j in range(n_cocktails):
        rng = _rng(spec.seed, j, 0xC0)
        classes = rng.choice(K, size=4, replace=False)
        sources = [make_solo_pair(spec, int(c), 1_000_000 + 4 * j + q) for q, c in enumerate(classes)]
        pair, _ = synthesize_cocktail(sources, jitter, rng_seed=int(rng.integers(2**31)),
                                      out_size=spec.frame_size, pair_id=f"mix-{j:05d}")
        cocktails.append(pair)
    n_test = max(1, int(round(n_cocktails * test_fraction)))
    train_mix, test_mix = cocktails[: n_cocktails - n_test], cocktails[n_cocktails - n_test :]
    out_dir = Path(out_dir)
    return {
        "stage1": build_manifest(solos, None, Split.STAGE1, out_dir, K),
        "stage2": build_manifest(train_mix, None, Split.STAGE2, out_dir, K),
        "test": build_manifest(test_mix, None, Split.TEST, out_dir, K),
    }
