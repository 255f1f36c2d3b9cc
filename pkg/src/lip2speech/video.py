"""Lip-region video clips: loading, landmark-based cropping, augmentation."""
from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .config import FRAME_SIZE, VIDEO_FPS
from .errors import DataError, DependencyError, InvalidInputError

MASK_MIN = 10
MASK_MAX = 30
FLIP_PROB = 0.5
# 68-point landmark convention: mouth points are 48..67
MOUTH_SLICE = slice(48, 68)


@dataclass
class VideoClip:
    frames: np.ndarray  # (T_v, 1, 112, 112) float32 in [0, 1]
    speaker_id: int = 0
    frame_rate: int = VIDEO_FPS

    def __post_init__(self):
        f = np.asarray(self.frames)
        if f.ndim == 3:
            f = f[:, None]
        if f.ndim != 4 or f.shape[1:] != (1, FRAME_SIZE, FRAME_SIZE):
            raise InvalidInputError(
                f"frames must have shape (T, 1, {FRAME_SIZE}, {FRAME_SIZE}), got {f.shape}")
        if f.shape[0] < 1:
            raise InvalidInputError("clip has no frames")
        if f.dtype == np.uint8:
            f = f.astype(np.float32) / 255.0
        self.frames = f.astype(np.float32, copy=False)
        if self.frame_rate != VIDEO_FPS:
            raise InvalidInputError(f"clip must be {VIDEO_FPS} fps, got {self.frame_rate}")

    def __len__(self):
        return self.frames.shape[0]


def to_uint8(frames: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(frames) * 255.0), 0, 255).astype(np.uint8)


def crop_from_landmarks(frames: np.ndarray, landmarks: np.ndarray,
                        size: int = FRAME_SIZE) -> np.ndarray:
    """Centre-crop ``size``x``size`` around the mouth landmarks of each frame.

    ``frames`` is (T, H, W) grayscale; ``landmarks`` is (T, 68, 2) in (x, y)
    pixel coordinates. Out-of-image regions are zero padded.
    """
    frames = np.asarray(frames)
    landmarks = np.asarray(landmarks, dtype=np.float64)
    if frames.ndim != 3 or landmarks.shape != (frames.shape[0], 68, 2):
        raise InvalidInputError(
            f"expected frames (T,H,W) and landmarks (T,68,2), got {frames.shape}, {landmarks.shape}")
    half = size // 2
    out = np.zeros((frames.shape[0], size, size), dtype=frames.dtype)
    padded = np.pad(frames, ((0, 0), (half, half), (half, half)))
    for t in range(frames.shape[0]):
        cx, cy = np.rint(landmarks[t, MOUTH_SLICE].mean(axis=0)).astype(int)
        out[t] = padded[t, cy:cy + size, cx:cx + size]
    return out


def load_frames(path: str | Path, landmarks: str | Path | None = None) -> np.ndarray:
    """Load grayscale frames as uint8 (T, 112, 112).

    ``.npy``/``.npz`` arrays are taken as already-cropped frames; other files
    are decoded with OpenCV (assumed to already be 25 fps).
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"video file not found: {path}")
    if path.suffix == ".npy":
        frames = np.load(path)
    elif path.suffix == ".npz":
        with np.load(path) as z:
            frames = z["frames"]
    else:
        try:
            import cv2
        except ImportError as exc:  # pragma: no cover
            raise DependencyError("opencv is required to decode video files") from exc
        cap = cv2.VideoCapture(str(path))
        grabbed = []
        while True:
            ok, img = cap.read()
            if not ok:
                break
            grabbed.append(cv2.cvtColor(img, cv2.COLOR_BGR2GRAY))
        cap.release()
        if not grabbed:
            raise DataError(f"could not decode any frames from {path}")
        frames = np.stack(grabbed)
    frames = np.asarray(frames)
    if frames.ndim == 4:
        frames = frames[:, 0]
    if landmarks is not None:
        frames = crop_from_landmarks(frames, np.load(landmarks))
    if frames.shape[1:] != (FRAME_SIZE, FRAME_SIZE):
        raise DataError(f"{path}: frames are {frames.shape[1:]}, expected pre-cropped "
                        f"{FRAME_SIZE}x{FRAME_SIZE} (supply a landmark file to crop)")
    if frames.dtype != np.uint8:
        frames = to_uint8(frames)
    return frames


@dataclass(frozen=True)
class AugmentParams:
    flip: bool
    mask_top: int
    mask_left: int
    mask_h: int
    mask_w: int


def sample_augmentation(rng: np.random.Generator, size: int = FRAME_SIZE) -> AugmentParams:
    flip = bool(rng.random() < FLIP_PROB)
    h, w = (int(v) for v in rng.integers(MASK_MIN, MASK_MAX + 1, size=2))
    top = int(rng.integers(0, size - h + 1))
    left = int(rng.integers(0, size - w + 1))
    return AugmentParams(flip, top, left, h, w)


def apply_augmentation(clip: VideoClip, params: AugmentParams) -> VideoClip:
    frames = clip.frames[..., ::-1] if params.flip else clip.frames
    frames = frames.copy()
    # same rectangle in every frame
    frames[..., params.mask_top:params.mask_top + params.mask_h,
           params.mask_left:params.mask_left + params.mask_w] = 0.0
    return replace(clip, frames=frames)


def augment(clip: VideoClip, rng_seed: int | np.random.Generator) -> VideoClip:
    """Random horizontal flip (p=0.5) plus one fixed-position rectangular mask."""
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    return apply_augmentation(clip, sample_augmentation(rng))
