"""Frame sampling, spatial preprocessing, and the synthetic motion dataset.

Clips move through the pipeline as float arrays: raw frames are
(3, H0, W0) in [0, 1], stacked clips are (T, 3, H, W), and the network
input is (3, T, S, S) after resize, crop, and per-channel normalization.

Sampling rules:

  * segment sampling splits a video into equal segments and draws one
    frame per segment: a uniformly random one in training, the middle
    one at test time;
  * dense clip sampling draws ``frames`` evenly spaced indices from a
    window of ``clip_len`` consecutive frames; training picks one window
    at random, testing spreads ``num_clips`` windows evenly over the
    valid start positions (indices wrap on videos shorter than the
    window);
  * test-time spatial views are a single center crop, or three crops
    spread along the longer axis for the multi-view protocol.

The synthetic dataset renders textured blobs drifting over a smooth
noise background. The class determines only the drift direction; blob
texture, color, start position, and background are drawn independently
of the class, so no single frame carries label information.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

# fixed input normalization; any affine choice is absorbed by the stem's
# batch norm, these just keep inputs roughly centered
PIXEL_MEAN = (0.45, 0.45, 0.45)
PIXEL_STD = (0.225, 0.225, 0.225)

_SPLIT_CODES = {"train": 0, "eval": 1, "test": 2}


@dataclass(frozen=True)
class ClipIndexPlan:
    """Frame and crop choices for one clip of one video."""

    frame_indices: tuple[int, ...]
    resize_short: int | None = None
    crop_top: int | None = None
    crop_left: int | None = None
    crop_size: int | None = None


@dataclass
class VideoRecord:
    num_frames: int
    frame: Callable[[int], np.ndarray]  # index -> (3, H0, W0) in [0, 1]
    label: int | np.ndarray
    identifier: str = ""

    def frames(self, indices) -> np.ndarray:
        return np.stack([self.frame(i) for i in indices])


# ---------------------------------------------------------------------------
# temporal samplers
# ---------------------------------------------------------------------------

def segment_indices(
    num_frames: int,
    num_segments: int,
    mode: str,
    rng: np.random.Generator | None = None,
) -> tuple[int, ...]:
    if num_frames < 1:
        raise ValueError("video has no frames")
    if mode == "test":
        return tuple(
            (2 * s + 1) * num_frames // (2 * num_segments)
            for s in range(num_segments)
        )
    if mode != "train":
        raise ValueError(f"unknown mode {mode!r}")
    if rng is None:
        raise ValueError("train-mode sampling requires an rng")
    out = []
    for s in range(num_segments):
        lo = s * num_frames // num_segments
        hi = (s + 1) * num_frames // num_segments
        if hi <= lo:  # more segments than frames
            out.append(min(lo, num_frames - 1))
        else:
            out.append(int(rng.integers(lo, hi)))
    return tuple(out)


def segment_sample(
    video: VideoRecord,
    num_segments: int = 16,
    mode: str = "test",
    rng: np.random.Generator | None = None,
) -> ClipIndexPlan:
    return ClipIndexPlan(segment_indices(video.num_frames, num_segments, mode, rng))


def dense_clip_starts(num_frames: int, clip_len: int, num_clips: int) -> list[int]:
    """Evenly spaced window starts over [0, num_frames - clip_len]."""
    last = max(num_frames - clip_len, 0)
    if num_clips == 1:
        return [last // 2]
    return [round(i * last / (num_clips - 1)) for i in range(num_clips)]


def dense_clip_sample(
    video: VideoRecord,
    clip_len: int = 64,
    frames: int = 16,
    mode: str = "test",
    num_clips: int = 10,
    rng: np.random.Generator | None = None,
) -> list[ClipIndexPlan]:
    n = video.num_frames
    if n < 1:
        raise ValueError("video has no frames")
    offsets = [i * clip_len // frames for i in range(frames)]
    if mode == "train":
        if rng is None:
            raise ValueError("train-mode sampling requires an rng")
        starts = [int(rng.integers(0, max(n - clip_len, 0) + 1))]
    elif mode == "test":
        starts = dense_clip_starts(n, clip_len, num_clips)
    else:
        raise ValueError(f"unknown mode {mode!r}")
    return [
        ClipIndexPlan(tuple((start + o) % n for o in offsets)) for start in starts
    ]


# ---------------------------------------------------------------------------
# spatial transforms
# ---------------------------------------------------------------------------

def bilinear_resize(frames: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Half-pixel-aligned bilinear resize over the trailing two axes."""
    h, w = frames.shape[-2:]
    if (h, w) == (out_h, out_w):
        return frames.astype(np.float64, copy=True)

    def axis_coords(out_n, in_n):
        src = (np.arange(out_n) + 0.5) * (in_n / out_n) - 0.5
        src = np.clip(src, 0.0, in_n - 1.0)
        lo = np.floor(src).astype(np.int64)
        hi = np.minimum(lo + 1, in_n - 1)
        return lo, hi, src - lo

    y0, y1, fy = axis_coords(out_h, h)
    x0, x1, fx = axis_coords(out_w, w)
    fy = fy.reshape(-1, 1)
    top = frames[..., y0, :][..., :, x0] * (1 - fx) + frames[..., y0, :][..., :, x1] * fx
    bot = frames[..., y1, :][..., :, x0] * (1 - fx) + frames[..., y1, :][..., :, x1] * fx
    return top * (1 - fy) + bot * fy


def resize_shorter_side(frames: np.ndarray, target: int) -> np.ndarray:
    """Scale so the shorter spatial side equals ``target``, keeping aspect."""
    h, w = frames.shape[-2:]
    if h <= w:
        out_h, out_w = target, max(round(w * target / h), target)
    else:
        out_h, out_w = max(round(h * target / w), target), target
    return bilinear_resize(frames, out_h, out_w)


def _to_unit(frames: np.ndarray) -> np.ndarray:
    if frames.dtype == np.uint8:
        return frames.astype(np.float64) / 255.0
    return frames.astype(np.float64)


def normalize_pixels(clip: np.ndarray) -> np.ndarray:
    mean = np.asarray(PIXEL_MEAN).reshape(3, 1, 1, 1)
    std = np.asarray(PIXEL_STD).reshape(3, 1, 1, 1)
    return (clip - mean) / std


def plan_crop(
    h: int,
    w: int,
    crop_size: int,
    mode: str,
    rng: np.random.Generator | None = None,
) -> tuple[int, int]:
    """(top, left) of the square crop inside an h x w frame."""
    if mode == "train":
        if rng is None:
            raise ValueError("train-mode cropping requires an rng")
        return (
            int(rng.integers(0, h - crop_size + 1)),
            int(rng.integers(0, w - crop_size + 1)),
        )
    if mode == "test":
        return ((h - crop_size) // 2, (w - crop_size) // 2)
    raise ValueError(f"unknown mode {mode!r}")


def spatial_transform(
    frames: np.ndarray,
    mode: str,
    rng: np.random.Generator | None = None,
    crop_size: int = 224,
    jitter_max: int | None = None,
) -> np.ndarray:
    """Resize, crop, and normalize a (T, 3, H0, W0) clip to (3, T, S, S).

    Training resizes the shorter side to a uniformly drawn length in
    [crop_size, jitter_max] and takes a random square crop; testing
    resizes the shorter side to exactly crop_size and center-crops. The
    same geometry applies to every frame of the clip.
    """
    if jitter_max is None:
        jitter_max = round(crop_size * 256 / 224)
    frames = _to_unit(frames)
    if mode == "train":
        if rng is None:
            raise ValueError("train-mode transform requires an rng")
        short = int(rng.integers(crop_size, jitter_max + 1))
        resized = resize_shorter_side(frames, short)
    elif mode == "test":
        resized = resize_shorter_side(frames, crop_size)
    else:
        raise ValueError(f"unknown mode {mode!r}")
    h, w = resized.shape[-2:]
    top, left = plan_crop(h, w, crop_size, mode, rng)
    crop = resized[..., top : top + crop_size, left : left + crop_size]
    return normalize_pixels(crop.transpose(1, 0, 2, 3))


def three_crop(frames: np.ndarray, crop_size: int = 224) -> list[np.ndarray]:
    """Three crops spread along the longer axis of a shorter-side-resized clip.

    Returns normalized (3, T, S, S) views at offsets 0, middle, end.
    """
    frames = _to_unit(frames)
    resized = resize_shorter_side(frames, crop_size)
    h, w = resized.shape[-2:]
    views = []
    for frac in (0, 1, 2):
        if w >= h:
            left = frac * (w - crop_size) // 2
            crop = resized[..., 0:crop_size, left : left + crop_size]
        else:
            top = frac * (h - crop_size) // 2
            crop = resized[..., top : top + crop_size, 0:crop_size]
        views.append(normalize_pixels(crop.transpose(1, 0, 2, 3)))
    return views


def multiview_aggregate(per_view_scores) -> np.ndarray:
    """Arithmetic mean of per-view probability vectors."""
    views = [np.asarray(v, dtype=np.float64) for v in per_view_scores]
    if not views:
        raise ValueError("no views to aggregate")
    return np.mean(views, axis=0)


# ---------------------------------------------------------------------------
# clip pipeline (sampler preset + spatial policy)
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PipelineConfig:
    sampler: str = "segment"  # segment | dense_clip
    frames: int = 16
    crop_size: int = 224
    clip_len: int = 64
    test_clips: int = 10

    def __post_init__(self):
        if self.sampler not in ("segment", "dense_clip"):
            raise ValueError(f"unknown sampler {self.sampler!r}")


class ClipPipeline:
    """Binds a temporal sampler preset to the spatial transform."""

    def __init__(self, config: PipelineConfig):
        self.config = config

    def train_clip(self, video: VideoRecord, rng: np.random.Generator) -> np.ndarray:
        cfg = self.config
        if cfg.sampler == "segment":
            plan = segment_sample(video, cfg.frames, "train", rng)
        else:
            plan = dense_clip_sample(
                video, cfg.clip_len, cfg.frames, "train", rng=rng
            )[0]
        return spatial_transform(
            video.frames(plan.frame_indices), "train", rng, cfg.crop_size
        )

    def test_views(self, video: VideoRecord) -> list[np.ndarray]:
        cfg = self.config
        if cfg.sampler == "segment":
            plan = segment_sample(video, cfg.frames, "test")
            return [
                spatial_transform(
                    video.frames(plan.frame_indices), "test", crop_size=cfg.crop_size
                )
            ]
        plans = dense_clip_sample(
            video, cfg.clip_len, cfg.frames, "test", cfg.test_clips
        )
        views = []
        for plan in plans:
            views.extend(
                three_crop(video.frames(plan.frame_indices), cfg.crop_size)
            )
        return views


# ---------------------------------------------------------------------------
# synthetic motion dataset
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SyntheticSpec:
    """Procedural dataset where only motion separates the classes."""

    num_classes: int = 8
    clip_frames: int = 16
    height: int = 256
    width: int = 320
    speed: float = 0.03  # blob displacement per frame, fraction of min extent
    blob_radius: float = 0.16  # fraction of min extent
    num_blobs: int = 1  # coherently drifting pattern count
    train_count: int = 64
    eval_count: int = 128
    test_count: int = 0
    seed: int = 0

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValueError("need at least 2 classes")
        if self.clip_frames < 1:
            raise ValueError("need at least 1 frame per clip")

    def split_count(self, split: str) -> int:
        return {
            "train": self.train_count,
            "eval": self.eval_count,
            "test": self.test_count,
        }[split]

    def class_motion(self, label: int) -> tuple[float, float]:
        """Per-class drift (dy, dx) in pixels per frame."""
        angle = 2.0 * np.pi * label / self.num_classes
        step = self.speed * min(self.height, self.width)
        return (step * np.sin(angle), step * np.cos(angle))


def _smooth_field(
    rng: np.random.Generator, h: int, w: int, cells: int = 8
) -> np.ndarray:
    """Low-frequency noise in [0, 1] from a bilinearly upsampled coarse grid."""
    coarse = rng.random((3, max(h // cells, 2) + 1, max(w // cells, 2) + 1))
    return bilinear_resize(coarse, h, w)


class SyntheticMotionDataset:
    def __init__(self, spec: SyntheticSpec):
        self.spec = spec

    def __len__(self) -> int:  # train split size, for convenience
        return self.spec.train_count

    def label_of(self, index: int) -> int:
        return index % self.spec.num_classes

    def record(self, split: str, index: int) -> VideoRecord:
        spec = self.spec
        if split not in _SPLIT_CODES:
            raise ValueError(f"unknown split {split!r}")
        if not 0 <= index < spec.split_count(split):
            raise IndexError(
                f"index {index} out of range for split {split!r} "
                f"(size {spec.split_count(split)})"
            )
        clip_cache: list[np.ndarray] = []

        def frame(t: int) -> np.ndarray:
            if not clip_cache:
                clip_cache.append(self.render_clip(split, index))
            return clip_cache[0][t]

        return VideoRecord(
            num_frames=spec.clip_frames,
            frame=frame,
            label=self.label_of(index),
            identifier=f"{split}:{index}",
        )

    def records(self, split: str) -> list[VideoRecord]:
        return [
            self.record(split, i) for i in range(self.spec.split_count(split))
        ]

    def render_clip(self, split: str, index: int) -> np.ndarray:
        """Render all frames of one sample, (F, 3, H, W) float32 in [0, 1]."""
        spec = self.spec
        h, w = spec.height, spec.width
        rng = np.random.default_rng(
            np.random.SeedSequence([spec.seed, _SPLIT_CODES[split], index])
        )
        label = self.label_of(index)
        vy, vx = spec.class_motion(label)

        # bright textured blobs drifting coherently over a dim background:
        # the pattern must be unmistakable in every frame, or motion
        # cannot be read at all
        background = 0.1 + 0.4 * _smooth_field(rng, h, w)
        texture = _smooth_field(rng, h, w, cells=4)
        color = rng.uniform(0.85, 1.0, size=(3, 1, 1))
        pys = rng.uniform(0, h, size=spec.num_blobs)
        pxs = rng.uniform(0, w, size=spec.num_blobs)
        sigma = spec.blob_radius * min(h, w) / 2.0

        ys = np.arange(h).reshape(-1, 1, 1)
        xs = np.arange(w).reshape(1, -1, 1)
        frames = np.empty((spec.clip_frames, 3, h, w), dtype=np.float32)
        blob = color * (0.75 + 0.25 * texture)
        for t in range(spec.clip_frames):
            cy = (pys + vy * t) % h
            cx = (pxs + vx * t) % w
            dy = np.abs(ys - cy.reshape(1, 1, -1))
            dy = np.minimum(dy, h - dy)  # toroidal distance
            dx = np.abs(xs - cx.reshape(1, 1, -1))
            dx = np.minimum(dx, w - dx)
            window = np.exp(
                -(dy * dy + dx * dx) / (2.0 * sigma * sigma)
            ).sum(axis=2)
            window = np.minimum(window, 1.0)
            frame = background + window * (blob - background)
            frames[t] = np.clip(frame, 0.0, 1.0)
        return frames

    def manifest_rows(self) -> list[tuple[str, int, int, int]]:
        """(split, index, label, seed) for every sample of every split."""
        rows = []
        for split in ("train", "eval", "test"):
            for i in range(self.spec.split_count(split)):
                rows.append((split, i, self.label_of(i), self.spec.seed))
        return rows
