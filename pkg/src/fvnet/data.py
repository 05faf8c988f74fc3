"""Synthetic video datasets and plain-text manifests.

The generator produces videos whose class is encoded purely in the motion
direction of a bright blob drifting over a toroidal frame: per-frame
marginal statistics (mean, variance) are identical across classes by
construction, so a classifier can only separate them through temporal
information.

Randomness comes from numpy's PCG64 generator seeded explicitly, so a
(seed, shape) pair reproduces the dataset bit for bit on any platform.

Manifests are CSV files with one ``path,label`` line per video; paths are
stored relative to the manifest file.
"""

import os
from dataclasses import dataclass

import numpy as np

from .tensor import read_tensor, write_tensor

# Class index -> (row, col) drift per frame.  Up to 8 classes: the four
# axis directions, then the four diagonals.
DIRECTIONS = (
    (-1.0, 0.0),
    (1.0, 0.0),
    (0.0, -1.0),
    (0.0, 1.0),
    (-1.0, -1.0),
    (1.0, 1.0),
    (-1.0, 1.0),
    (1.0, -1.0),
)

BLOB_AMPLITUDE = 1.2
NOISE_STD = 0.5
DRIFT_PER_FRAME = 1.5


@dataclass
class VideoSample:
    """A single labelled video: (frames, height, width, channels) tensor."""
    video: np.ndarray
    label: int


@dataclass
class DatasetManifest:
    """Ordered list of (tensor-file path, label) with the class count."""
    entries: list
    num_classes: int
    split: str = ""

    def __len__(self):
        return len(self.entries)


def _blob_frame(height, width, center_r, center_c, sigma):
    """Gaussian bump at (center_r, center_c) under toroidal distance."""
    rows = np.arange(height, dtype=np.float64)
    cols = np.arange(width, dtype=np.float64)
    dr = np.abs(rows - center_r)
    dr = np.minimum(dr, height - dr)
    dc = np.abs(cols - center_c)
    dc = np.minimum(dc, width - dc)
    d2 = dr[:, None] ** 2 + dc[None, :] ** 2
    return BLOB_AMPLITUDE * np.exp(-d2 / (2.0 * sigma * sigma))


def make_video(rng, label, frames, height, width):
    """One synthetic video: a blob drifting in the label's direction.

    The blob wraps around the frame edges, so every frame carries the same
    total blob mass regardless of position or direction.
    """
    dir_r, dir_c = DIRECTIONS[label]
    sigma = height / 8.0
    start_r = rng.uniform(0.0, height)
    start_c = rng.uniform(0.0, width)
    video = np.empty((frames, height, width, 1), dtype=np.float64)
    for f in range(frames):
        cr = (start_r + dir_r * DRIFT_PER_FRAME * f) % height
        cc = (start_c + dir_c * DRIFT_PER_FRAME * f) % width
        video[f, :, :, 0] = _blob_frame(height, width, cr, cc, sigma)
    video += rng.normal(0.0, NOISE_STD, size=video.shape)
    return video


def generate_synthetic(out_dir, seed, num_classes, per_class, frames, height,
                       width, split="train"):
    """Generate a labelled synthetic dataset under ``out_dir``.

    Writes one float32 FVNT tensor per video plus a ``<split>.csv``
    manifest, and returns the manifest.  Deterministic for a fixed seed.
    """
    if not (2 <= num_classes <= 8):
        raise ValueError(f"num_classes must be in 2..8, got {num_classes}")
    if height < 32 or width < 32:
        raise ValueError(f"frame size must be at least 32x32, got {height}x{width}")
    if frames < 15:
        raise ValueError(f"videos need at least 15 frames, got {frames}")
    if per_class < 0:
        raise ValueError(f"per_class must be nonnegative, got {per_class}")

    os.makedirs(out_dir, exist_ok=True)
    rng = np.random.Generator(np.random.PCG64(seed))
    entries = []
    for label in range(num_classes):
        for i in range(per_class):
            video = make_video(rng, label, frames, height, width)
            name = f"{split}_c{label}_{i:04d}.fvnt"
            write_tensor(os.path.join(out_dir, name), video.astype(np.float32))
            entries.append((name, label))
    manifest = DatasetManifest(entries, num_classes, split)
    save_manifest(os.path.join(out_dir, f"{split}.csv"), manifest)
    return manifest


def save_manifest(path, manifest):
    with open(path, "w") as fh:
        for entry_path, label in manifest.entries:
            fh.write(f"{entry_path},{label}\n")


def load_manifest(path, num_classes=None, split=""):
    """Parse a ``path,label`` CSV manifest, preserving order.

    If ``num_classes`` is given, labels are validated against it; otherwise
    the class count is inferred as max(label) + 1.
    """
    entries = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            parts = line.rsplit(",", 1)
            if len(parts) != 2:
                raise ValueError(f"{path}:{lineno}: expected 'path,label'")
            entry_path, label_text = parts
            try:
                label = int(label_text)
            except ValueError:
                raise ValueError(
                    f"{path}:{lineno}: label {label_text!r} is not an integer"
                ) from None
            if label < 0:
                raise ValueError(f"{path}:{lineno}: negative label {label}")
            if num_classes is not None and label >= num_classes:
                raise ValueError(
                    f"{path}:{lineno}: label {label} >= class count {num_classes}")
            entries.append((entry_path, label))
    if num_classes is None:
        num_classes = max((label for _, label in entries), default=-1) + 1
    return DatasetManifest(entries, num_classes, split)


def load_video(manifest_dir, entry):
    """Read one manifest entry as a float64 VideoSample."""
    path, label = entry
    if not os.path.isabs(path):
        path = os.path.join(manifest_dir, path)
    video = read_tensor(path)
    if video.ndim != 4:
        raise ValueError(f"{path}: expected a 4-d video tensor, got {video.shape}")
    return VideoSample(video.astype(np.float64, copy=False), label)
