"""In-memory tensors for a manifest: spectrograms, frames and metadata."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .data import DatasetManifest, SceneAnnotation, load_sample, preprocess_frame
from .dsp import log_mel


@dataclass
class SampleBank:
    ids: list[str]
    specs: torch.Tensor  # (N, 201, 64)
    frames: torch.Tensor  # (N, 3, H, W)
    class_ids: list[int | None]
    annotations: list[SceneAnnotation | None]
    source_counts: list[int]

    def __len__(self) -> int:
        return len(self.ids)

    def to(self, dtype) -> "SampleBank":
        return SampleBank(self.ids, self.specs.to(dtype), self.frames.to(dtype), self.class_ids,
                          self.annotations, self.source_counts)


def load_bank(manifest: DatasetManifest, frame_size: int) -> SampleBank:
    specs, frames = [], []
    for s in manifest.samples:
        audio, pixels = load_sample(manifest, s)
        specs.append(log_mel((audio, 16000)).values.astype(np.float32))
        frames.append(preprocess_frame(pixels, frame_size).transpose(2, 0, 1))
    return SampleBank(
        ids=[s.id for s in manifest.samples],
        specs=torch.from_numpy(np.stack(specs)),
        frames=torch.from_numpy(np.ascontiguousarray(np.stack(frames))),
        class_ids=[s.class_id for s in manifest.samples],
        annotations=[s.annotation for s in manifest.samples],
        source_counts=[s.source_count for s in manifest.samples],
    )


def random_resized_crop(frames: torch.Tensor, gen: torch.Generator) -> torch.Tensor:
    """Batch version of the train-time resize(size*256/224) + random crop."""
    size = frames.shape[-1]
    big = int(round(size * 256 / 224))
    up = F.interpolate(frames, size=(big, big), mode="bilinear", align_corners=False, antialias=True)
    offsets = torch.randint(0, big - size + 1, (frames.shape[0], 2), generator=gen)
    return torch.stack([up[i, :, oy : oy + size, ox : ox + size] for i, (oy, ox) in enumerate(offsets.tolist())])


def iterate_batches(n: int, batch_size: int, gen: torch.Generator, drop_last: bool = True):
    """Shuffled index batches; a trailing batch smaller than 2 is always dropped."""
    order = torch.randperm(n, generator=gen)
    for start in range(0, n, batch_size):
        idx = order[start : start + batch_size]
        if len(idx) < 2 or (drop_last and start > 0 and len(idx) < batch_size):
            continue
        yield idx
