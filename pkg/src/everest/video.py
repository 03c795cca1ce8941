"""Video clip storage, dataset manifests, frame sampling, synthetic generators.

Clips live in a tiny raw container ("EVC1") rather than a codec so that
round trips are bit-exact and tests can assert on pixels. The synthetic
moving-square generator doubles as a verification oracle: it returns a
ground-truth mask of the pixels that actually changed between consecutive
frames, which downstream selection tests compare against.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import zoom

MAGIC = b"EVC1"
_HEADER = struct.Struct("<4sIIIII")  # magic, t, c, h, w, dtype code
DTYPE_U8 = 0
_MAX_DIM = 2**32 - 1


class FormatError(ValueError):
    """Malformed EVC1 payload or header."""


@dataclass
class VideoClip:
    """Raw frames, shape (t, c, h, w), u8, frame-major channel-planar."""

    pixels: np.ndarray
    norm_mean: tuple | None = None
    norm_std: tuple | None = None

    def __post_init__(self):
        p = self.pixels
        if p.ndim != 4 or p.dtype != np.uint8:
            raise FormatError(f"clip pixels must be u8 (t, c, h, w), got {p.dtype} {p.shape}")

    @property
    def t_frames(self):
        return self.pixels.shape[0]

    @property
    def channels(self):
        return self.pixels.shape[1]

    @property
    def height(self):
        return self.pixels.shape[2]

    @property
    def width(self):
        return self.pixels.shape[3]


@dataclass
class ManifestEntry:
    path: str
    label: int | None
    frames: int


@dataclass
class DatasetManifest:
    """Clip index plus the sampling parameters used when loading from it.

    Only the records serialize (as a JSON array of {path, label, frames});
    stride and clip_len are runtime settings carried alongside.
    """

    records: list = field(default_factory=list)
    stride: int = 1
    clip_len: int = 16

    @property
    def labels(self):
        return [r.label for r in self.records]

    def num_classes(self):
        labels = [r.label for r in self.records if r.label is not None]
        return len(set(labels)) if labels else 0


def save_clip(clip, path):
    """Write a clip in EVC1 format (24-byte header + raw payload)."""
    t, c, h, w = clip.pixels.shape
    for dim in (t, c, h, w):
        if not 0 < dim <= _MAX_DIM:
            raise FormatError(f"dimension overflow: {dim}")
    payload = np.ascontiguousarray(clip.pixels).tobytes()
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, t, c, h, w, DTYPE_U8))
        fh.write(payload)


def load_clip(path):
    """Read an EVC1 clip; bit-exact inverse of save_clip."""
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise FormatError("truncated header")
    magic, t, c, h, w, code = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    if code != DTYPE_U8:
        raise FormatError(f"unsupported dtype code {code}")
    if min(t, c, h, w) == 0 or t * c * h * w > 2**40:
        raise FormatError("dimension overflow")
    need = t * c * h * w
    body = raw[_HEADER.size :]
    if len(body) != need:
        raise FormatError(f"truncated payload: expected {need} bytes, got {len(body)}")
    pixels = np.frombuffer(body, dtype=np.uint8).reshape(t, c, h, w).copy()
    return VideoClip(pixels)


def save_manifest(manifest, path):
    records = [{"path": r.path, "label": r.label, "frames": r.frames} for r in manifest.records]
    Path(path).write_text(json.dumps(records, indent=1))


def load_manifest(path, stride=1, clip_len=16):
    """Load a manifest, resolving clip paths relative to the manifest file.

    Every referenced path must exist, and labels (when any are present) must
    be contiguous 0..K-1.
    """
    path = Path(path)
    base = path.parent
    records = []
    for rec in json.loads(path.read_text()):
        p = Path(rec["path"])
        if not p.is_absolute():
            p = base / p
        if not p.exists():
            raise FileNotFoundError(f"manifest references missing clip: {p}")
        records.append(ManifestEntry(str(p), rec["label"], int(rec["frames"])))
    labels = sorted({r.label for r in records if r.label is not None})
    if labels and labels != list(range(len(labels))):
        raise ValueError(f"labels must be contiguous 0..K-1, got {labels}")
    return DatasetManifest(records, stride=stride, clip_len=clip_len)


def sample_uniform(clip, clip_len, stride, start=0):
    """Frames at indices start, start+stride, ... (the uniform baseline)."""
    last = start + stride * (clip_len - 1)
    if start < 0 or stride < 1 or last >= clip.t_frames:
        raise IndexError(
            f"uniform sample out of range: start={start} stride={stride} "
            f"clip_len={clip_len} over {clip.t_frames} frames"
        )
    idx = start + stride * np.arange(clip_len)
    return VideoClip(clip.pixels[idx].copy(), clip.norm_mean, clip.norm_std)


def _value_noise(rng, channels, height, width, lo, hi, cell=8):
    """Seeded low-frequency value noise: coarse uniform grid, bilinear upsample."""
    ch = max(2, height // cell + 1)
    cw = max(2, width // cell + 1)
    coarse = rng.uniform(lo, hi, size=(channels, ch, cw))
    out = zoom(coarse, (1, height / ch, width / cw), order=1, grid_mode=True, mode="nearest")
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)


def gen_moving_square(
    height,
    width,
    frames,
    square_size,
    velocity,
    noise_amp=0.0,
    seed=0,
    bg_range=(30, 130),
    square_value=None,
    avoid_reflection=False,
):
    """Textured static background plus one flat square translating per frame.

    velocity is (dy, dx) in integer pixels/frame; the square reflects off the
    frame boundary. With avoid_reflection the start position is drawn from
    the band where the whole trajectory stays in bounds (when one exists),
    which keeps motion-direction labels unambiguous. Returns
    (VideoClip, motion_mask) where motion_mask is a (t, h, w) bool array
    marking pixels whose noise-free value changes from the previous frame
    (frame 0 is all False). With noise_amp == 0 the mask equals the exact
    inter-frame pixel difference of the stored clip.
    """
    if square_size >= min(height, width):
        raise ValueError(f"square {square_size} does not fit in {height}x{width} frame")
    rng = np.random.default_rng(seed)
    bg = _value_noise(rng, 3, height, width, *bg_range)
    if square_value is None:
        square_value = rng.integers(200, 256, size=3)
    color = np.asarray(square_value, dtype=np.uint8).reshape(3, 1, 1)

    vy, vx = int(velocity[0]), int(velocity[1])
    if abs(vy) > height - square_size or abs(vx) > width - square_size:
        raise ValueError("velocity exceeds the reflective travel range")
    y = _start_position(rng, height - square_size, vy, frames, avoid_reflection)
    x = _start_position(rng, width - square_size, vx, frames, avoid_reflection)

    ideal = np.empty((frames, 3, height, width), dtype=np.uint8)
    for f in range(frames):
        frame = bg.copy()
        frame[:, y : y + square_size, x : x + square_size] = color
        ideal[f] = frame
        y, vy = _step_reflect(y, vy, height - square_size)
        x, vx = _step_reflect(x, vx, width - square_size)

    mask = np.zeros((frames, height, width), dtype=bool)
    mask[1:] = (ideal[1:] != ideal[:-1]).any(axis=1)

    if noise_amp > 0:
        noisy = ideal.astype(np.float64) + rng.normal(0.0, noise_amp, size=ideal.shape)
        pixels = np.clip(np.rint(noisy), 0, 255).astype(np.uint8)
    else:
        pixels = ideal
    return VideoClip(pixels), mask


def _start_position(rng, limit, vel, frames, avoid_reflection):
    if avoid_reflection:
        travel = vel * (frames - 1)
        lo = max(0, -travel)
        hi = min(limit, limit - travel)
        if lo <= hi:
            return int(rng.integers(lo, hi + 1))
    return int(rng.integers(0, limit + 1))


def _step_reflect(pos, vel, limit):
    """Advance one axis with reflection inside [0, limit]."""
    pos += vel
    if pos < 0:
        pos = -pos
        vel = -vel
    elif pos > limit:
        pos = 2 * limit - pos
        vel = -vel
    return pos, vel


MOTION_CLASSES = ("up", "down", "left", "right")
_CLASS_VELOCITY = {"up": (-1, 0), "down": (1, 0), "left": (0, -1), "right": (0, 1)}


def gen_motion_class_dataset(
    n_clips,
    out_dir,
    seed=0,
    classes=MOTION_CLASSES,
    frames=16,
    height=32,
    width=32,
    square_range=(6, 9),
    speed_range=(1, 2),
    noise_amp=0.0,
    threads=None,
    avoid_reflection=True,
):
    """Balanced labeled corpus of squares moving in the labeled direction.

    Writes EVC1 clips plus manifest.json under out_dir and returns the
    manifest. Start positions avoid boundary reflection by default so the
    direction label stays unambiguous. Per-clip parameters are drawn up
    front from the run seed, so the result is deterministic regardless of
    the worker count.
    """
    from .utils import thread_map

    if n_clips % len(classes):
        raise ValueError(f"n_clips={n_clips} not divisible by {len(classes)} classes")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    per_class = n_clips // len(classes)
    jobs = []
    records = []
    for label, cname in enumerate(classes):
        base_vy, base_vx = _CLASS_VELOCITY[cname]
        for k in range(per_class):
            speed = int(rng.integers(speed_range[0], speed_range[1] + 1))
            side = int(rng.integers(square_range[0], square_range[1] + 1))
            clip_seed = int(rng.integers(0, 2**31))
            name = f"{cname}_{k:04d}.evc1"
            jobs.append((name, side, (base_vy * speed, base_vx * speed), clip_seed))
            records.append(ManifestEntry(name, label, frames))

    def synth(job):
        name, side, velocity, clip_seed = job
        clip, _ = gen_moving_square(
            height, width, frames, side, velocity, noise_amp=noise_amp,
            seed=clip_seed, avoid_reflection=avoid_reflection,
        )
        save_clip(clip, out_dir / name)

    thread_map(synth, jobs, threads)
    manifest = DatasetManifest(records, stride=1, clip_len=frames)
    save_manifest(manifest, out_dir / "manifest.json")
    return load_manifest(out_dir / "manifest.json", stride=1, clip_len=frames)


def normalize(clip, mean, std):
    """(pixel/255 - mean) / std per channel, as float32 (t, c, h, w)."""
    mean = np.broadcast_to(np.asarray(mean, dtype=np.float32), (clip.channels,))
    std = np.broadcast_to(np.asarray(std, dtype=np.float32), (clip.channels,))
    if np.any(std <= 0):
        raise ValueError("std must be positive per channel")
    x = clip.pixels.astype(np.float32) / 255.0
    return (x - mean[None, :, None, None]) / std[None, :, None, None]


def denormalize(frames, mean, std):
    """Inverse of normalize, rounded back to u8."""
    c = frames.shape[1]
    mean = np.broadcast_to(np.asarray(mean, dtype=np.float32), (c,))
    std = np.broadcast_to(np.asarray(std, dtype=np.float32), (c,))
    x = (frames * std[None, :, None, None] + mean[None, :, None, None]) * 255.0
    return np.clip(np.rint(x), 0, 255).astype(np.uint8)
