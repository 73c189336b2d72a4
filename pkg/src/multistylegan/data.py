"""Paired brightfield / fluorescence sequence datasets on disk.

Layout::

    root/<sequence_id>/bf/<timestep>.png     (or .tif / .tiff)
    root/<sequence_id>/gfp/<timestep>.png

Timestep file stems are integers (zero padded to four digits by convention);
frames are ordered by their parsed value. 8-bit images are scaled by 255 and
16-bit images by 65535 onto [-1, 1].
"""

import logging
import math
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Iterator, List, Optional, Sequence, Tuple

import numpy as np
import torch
from PIL import Image

from .generator import ImageSequencePair

log = logging.getLogger(__name__)

DOMAINS = ("bf", "gfp")
EXTENSIONS = (".png", ".tif", ".tiff")


class DatasetError(Exception):
    """Raised when indexing finds problems; ``errors`` lists every one of them."""

    def __init__(self, errors: Sequence[str]):
        self.errors = list(errors)
        super().__init__(f"{len(self.errors)} dataset error(s):\n" + "\n".join(self.errors))


@dataclass
class SequenceRecord:
    sequence_id: str
    frame_paths_bf: List[Path]
    frame_paths_gfp: List[Path]

    @property
    def length(self) -> int:
        return len(self.frame_paths_bf)


@dataclass
class DatasetIndex:
    records: List[SequenceRecord] = field(default_factory=list)
    window_length: int = 3
    stride: int = 1
    resolution: int = 256

    def windows(self) -> List[Tuple[int, int]]:
        """Every ``(record_index, start)`` pair, in index order."""
        out = []
        for r, rec in enumerate(self.records):
            for start in range(0, rec.length - self.window_length + 1, self.stride):
                out.append((r, start))
        return out


@dataclass(frozen=True)
class DatasetLayout:
    domains: Tuple[str, str] = DOMAINS
    extensions: Tuple[str, ...] = EXTENSIONS


def _frames(directory: Path, extensions) -> Tuple[dict, List[str]]:
    frames, errors = {}, []
    for p in sorted(directory.iterdir()):
        if not p.is_file() or p.suffix.lower() not in extensions:
            continue
        try:
            t = int(p.stem)
        except ValueError:
            errors.append(f"{p}: file name is not an integer timestep")
            continue
        if t in frames:
            errors.append(f"{p}: duplicate timestep {t} (also {frames[t]})")
            continue
        frames[t] = p
    return frames, errors


def _check_image(path: Path, resolution: int) -> Optional[str]:
    try:
        with Image.open(path) as im:
            size, bands = im.size, im.getbands()
    except Exception as exc:  # PIL raises a variety of types for corrupt files
        return f"{path}: cannot decode ({exc})"
    if len(bands) != 1:
        return f"{path}: expected a single channel, found bands {bands}"
    if size != (resolution, resolution):
        return f"{path}: size {size[0]}x{size[1]}, expected {resolution}x{resolution}"
    return None


def index_dataset(root, layout: DatasetLayout = DatasetLayout(), resolution: int = 256,
                  window_length: int = 3, stride: int = 1, validate_images: bool = True) -> DatasetIndex:
    """Scan ``root`` and build a deterministic index sorted by (sequence id, timestep).

    All problems (orphan frames, missing domain folders, bad image sizes) are
    collected and raised together as one :class:`DatasetError`.
    """
    root = Path(root)
    if not root.is_dir():
        raise DatasetError([f"{root}: not a directory"])
    if window_length < 1 or stride < 1:
        raise ValueError("window_length and stride must be >= 1")
    errors: List[str] = []
    records = []
    d_bf, d_gfp = layout.domains
    for seq_dir in sorted((p for p in root.iterdir() if p.is_dir()), key=lambda p: p.name):
        missing = [d for d in layout.domains if not (seq_dir / d).is_dir()]
        if missing:
            errors.append(f"{seq_dir}: missing domain folder(s) {', '.join(missing)}")
            continue
        bf, err_b = _frames(seq_dir / d_bf, layout.extensions)
        gfp, err_g = _frames(seq_dir / d_gfp, layout.extensions)
        errors += err_b + err_g
        for t in sorted(set(bf) - set(gfp)):
            errors.append(f"{bf[t]}: no {d_gfp} counterpart for timestep {t}")
        for t in sorted(set(gfp) - set(bf)):
            errors.append(f"{gfp[t]}: no {d_bf} counterpart for timestep {t}")
        steps = sorted(set(bf) & set(gfp))
        if validate_images:
            for t in steps:
                for p in (bf[t], gfp[t]):
                    msg = _check_image(p, resolution)
                    if msg:
                        errors.append(msg)
        rec = SequenceRecord(seq_dir.name, [bf[t] for t in steps], [gfp[t] for t in steps])
        if 0 < rec.length < window_length:
            log.warning("sequence %s has %d frames, shorter than the window (%d)", rec.sequence_id, rec.length, window_length)
        if rec.length:
            records.append(rec)
    if errors:
        raise DatasetError(errors)
    return DatasetIndex(records, window_length, stride, resolution)


def count_windows(index: DatasetIndex) -> int:
    k, s = index.window_length, index.stride
    return sum(max(0, (rec.length - k) // s + 1) if rec.length >= k else 0 for rec in index.records)


def normalize(values: np.ndarray, max_value: float) -> np.ndarray:
    return values.astype(np.float32) * np.float32(2.0 / max_value) - np.float32(1.0)


def denormalize(x, max_value: int = 255) -> np.ndarray:
    """Inverse of :func:`normalize`, rounded and clamped to the integer range."""
    x = x.detach().cpu().numpy() if isinstance(x, torch.Tensor) else np.asarray(x)
    v = np.rint((np.clip(x, -1.0, 1.0) + 1.0) * (max_value / 2.0))
    return v.astype(np.uint8 if max_value <= 255 else np.uint16)


@lru_cache(maxsize=4096)
def read_frame(path: Path) -> np.ndarray:
    """Decode one single-channel frame to float32 in [-1, 1]."""
    try:
        with Image.open(path) as im:
            arr = np.array(im)
    except Exception as exc:
        raise OSError(f"{path}: cannot decode ({exc})") from exc
    if arr.ndim != 2:
        raise OSError(f"{path}: expected a single-channel image, got shape {arr.shape}")
    if arr.dtype == np.uint8:
        max_value = 255
    elif arr.dtype in (np.uint16, np.int32, np.int16):
        max_value = 65535
    elif arr.dtype == np.bool_:
        arr, max_value = arr.astype(np.uint8), 1
    else:
        raise OSError(f"{path}: unsupported pixel type {arr.dtype}")
    out = normalize(arr, max_value)
    out.setflags(write=False)
    return out


def load_window(index: DatasetIndex, window_id: int, generator: Optional[torch.Generator] = None,
                augment_flip: bool = False) -> ImageSequencePair:
    """Frames ``[start, start + window)`` of both domains as ``[T, H, W]`` tensors."""
    windows = index.windows()
    if not 0 <= window_id < len(windows):
        raise IndexError(f"window {window_id} outside 0..{len(windows) - 1}")
    r, start = windows[window_id]
    rec = index.records[r]
    sl = slice(start, start + index.window_length)
    bf = torch.from_numpy(np.stack([read_frame(p) for p in rec.frame_paths_bf[sl]]))
    gfp = torch.from_numpy(np.stack([read_frame(p) for p in rec.frame_paths_gfp[sl]]))
    if augment_flip and bool(torch.rand((), generator=generator) < 0.5):
        bf, gfp = bf.flip(-1), gfp.flip(-1)
    return ImageSequencePair(bf, gfp)


def load_batch(index: DatasetIndex, window_ids: Sequence[int], generator=None, augment_flip=False) -> ImageSequencePair:
    pairs = [load_window(index, int(i), generator, augment_flip) for i in window_ids]
    return ImageSequencePair(torch.stack([p.bf for p in pairs]), torch.stack([p.gfp for p in pairs]))


def epoch_batches(n_windows: int, batch_size: int, seed: int, epoch: int, drop_last: bool = True) -> Iterator[List[int]]:
    """Seeded per-epoch shuffle of window ids, cut into batches."""
    g = torch.Generator().manual_seed(seed * 1_000_003 + epoch)
    order = torch.randperm(n_windows, generator=g).tolist()
    stop = (n_windows // batch_size) * batch_size if drop_last else n_windows
    for i in range(0, stop, batch_size):
        yield order[i : i + batch_size]


def batches_per_epoch(n_windows: int, batch_size: int, drop_last: bool = True) -> int:
    return n_windows // batch_size if drop_last else math.ceil(n_windows / batch_size)


def _disk(res, cy, cx, radius):
    yy, xx = np.mgrid[0:res, 0:res]
    return ((yy - cy) ** 2 + (xx - cx) ** 2) <= radius**2


def synthetic_sequence(resolution: int, length: int, rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    """Moving bright disk (brightfield) whose fluorescence rises monotonically over time."""
    radius = resolution * rng.uniform(0.12, 0.2)
    pos = rng.uniform(radius, resolution - radius, size=2)
    vel = rng.uniform(-1, 1, size=2) * resolution * 0.04
    g0 = rng.uniform(40, 120)
    g_rate = rng.uniform(8, 20)
    bf, gfp = [], []
    for t in range(length):
        p = pos + vel * t
        p = np.clip(p, radius, resolution - radius)
        disk = _disk(resolution, p[0], p[1], radius)
        bf.append(np.where(disk, 220, 40).astype(np.uint8))
        gfp.append(np.where(disk, min(255.0, g0 + g_rate * t), 10).astype(np.uint8))
    return np.stack(bf), np.stack(gfp)


def write_synthetic_dataset(root, n_sequences: int = 16, length: int = 3, resolution: int = 32, seed: int = 0,
                            lengths: Optional[Sequence[int]] = None) -> Path:
    """Write a toy dataset in the documented layout; returns ``root``."""
    root = Path(root)
    rng = np.random.default_rng(seed)
    lengths = list(lengths) if lengths is not None else [length] * n_sequences
    for i, n in enumerate(lengths):
        bf, gfp = synthetic_sequence(resolution, n, rng)
        for dom, frames in (("bf", bf), ("gfp", gfp)):
            d = root / f"seq{i:04d}" / dom
            d.mkdir(parents=True, exist_ok=True)
            for t, frame in enumerate(frames):
                Image.fromarray(frame).save(d / f"{t:04d}.png")
    return root
