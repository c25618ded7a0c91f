"""Synthetic OCTA-like samples with known vessel geometry, and their on-disk format.

Every eye gets one random vessel tree; each image of that eye re-renders the
same tree under fresh speckle noise, so all images of an eye share the mask
and the labels. Labels are thresholded vessel statistics measured on the
mask itself, so they can always be recomputed from what was written.

Random streams are keyed by (seed, purpose, index) so generating one sample
in isolation gives the same bytes as generating the whole set.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigError, ManifestError, MissingFileError, PGMHeaderError
from .vesseltrace import vessel_statistics

LABELS = ("HR", "HG", "HC", "HTG", "HTN")
# vessel statistic thresholded for each label, in LABELS order
LABEL_STATS = ("density", "tortuosity", "caliber", "branches", "density")
MANIFEST_COLUMNS = ("patient_id", "eye_id", "sample_id", "age", "gender", *LABELS,
                    "layer0", "layer1", "layer2", "mask")

_GEOMETRY, _NOISE, _PATIENT = 0, 1, 2


@dataclass
class LabeledSample:
    layers: np.ndarray        # (3, H, W) float in [0, 1]
    vessel_mask: np.ndarray   # (H, W) uint8 in {0, 1}
    labels: np.ndarray        # (5,) int in {0, 1}
    patient_id: str
    eye_id: str
    sample_id: str = ""
    age: int = 0
    gender: int = 0

    def __post_init__(self):
        self.layers = np.asarray(self.layers, dtype=float)
        self.vessel_mask = np.asarray(self.vessel_mask, dtype=np.uint8)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.layers.ndim != 3 or self.layers.shape[0] != 3:
            raise ValueError(f"layers must have shape (3, H, W), got {self.layers.shape}")
        if self.vessel_mask.shape != self.layers.shape[1:]:
            raise ValueError(f"mask shape {self.vessel_mask.shape} != layer shape {self.layers.shape[1:]}")
        if self.labels.shape != (len(LABELS),) or not np.isin(self.labels, (0, 1)).all():
            raise ValueError(f"labels must be 5 binary flags, got {self.labels}")


@dataclass(frozen=True)
class GenConfig:
    image_size: int = 64
    n_patients: int = 200
    eyes_per_patient: int = 2
    images_per_eye: int = 1
    vessel_count_range: tuple[int, int] = (2, 8)
    tortuosity_range: tuple[float, float] = (0.0, 1.0)
    width_range: tuple[float, float] = (1.0, 4.0)
    noise_sigma: float = 0.05
    label_thresholds: tuple[float, ...] = (0.18, 1.17, 3.3, 20.0, 0.14)
    label_noise: float = 0.02
    layer_gains: tuple[float, float, float] = (1.0, 0.6, 0.2)
    background: float = 0.12
    seed: int = 0

    def validate(self) -> "GenConfig":
        if self.image_size < 32:
            raise ConfigError(f"image_size must be >= 32, got {self.image_size}")
        for name in ("n_patients", "images_per_eye"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.eyes_per_patient not in (1, 2):
            raise ConfigError(f"eyes_per_patient must be 1 or 2, got {self.eyes_per_patient}")
        for name in ("vessel_count_range", "tortuosity_range", "width_range"):
            lo, hi = getattr(self, name)
            if lo > hi or lo < 0:
                raise ConfigError(f"{name} must be a nonempty nonnegative [min, max], got {(lo, hi)}")
        if self.width_range[0] < 1:
            raise ConfigError(f"width_range must start at >= 1 pixel, got {self.width_range}")
        if len(self.label_thresholds) != len(LABELS):
            raise ConfigError(f"label_thresholds needs {len(LABELS)} values, got {len(self.label_thresholds)}")
        if not 0 <= self.label_noise <= 1:
            raise ConfigError(f"label_noise must be in [0, 1], got {self.label_noise}")
        if self.noise_sigma < 0:
            raise ConfigError(f"noise_sigma must be >= 0, got {self.noise_sigma}")
        if len(self.layer_gains) != 3:
            raise ConfigError("layer_gains needs 3 values")
        return self

    @classmethod
    def from_dict(cls, d: dict) -> "GenConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown GenConfig field(s): {sorted(unknown)}")
        conv = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
        return cls(**conv).validate()


# ---------------------------------------------------------------------------
# rendering
# ---------------------------------------------------------------------------

def _curve(rng: np.random.Generator, size: int, tortuosity: float, start=None) -> np.ndarray:
    """Quadratic Bezier between two points plus a sinusoidal wiggle, as (k, 2) points."""
    if start is None:
        side = rng.integers(4)
        t = rng.uniform(0, size - 1)
        start = [(0.0, t), (size - 1.0, t), (t, 0.0), (t, size - 1.0)][side]
    p0 = np.asarray(start, dtype=float)
    p2 = rng.uniform(0, size - 1, size=2)
    while np.hypot(*(p2 - p0)) < size * 0.4:
        p2 = rng.uniform(0, size - 1, size=2)
    d = p2 - p0
    length = float(np.hypot(*d))
    normal = np.array([-d[1], d[0]]) / length
    p1 = 0.5 * (p0 + p2) + normal * rng.uniform(-0.25, 0.25) * length
    s = np.linspace(0.0, 1.0, int(length * 4) + 2)[:, None]
    pts = (1 - s) ** 2 * p0 + 2 * (1 - s) * s * p1 + s ** 2 * p2
    cycles = rng.uniform(2.0, 4.0)
    amp = tortuosity * 0.06 * length
    pts = pts + normal * amp * np.sin(2 * np.pi * cycles * s + rng.uniform(0, 2 * np.pi))
    return pts


def _stamp(mask: np.ndarray, pts: np.ndarray, width: float) -> None:
    r = width / 2.0
    k = int(np.ceil(r)) + 1
    off = np.arange(-k, k + 1)
    base = np.rint(pts).astype(int)
    rr = np.broadcast_to(base[:, 0, None, None] + off[None, :, None], (len(pts), off.size, off.size))
    cc = np.broadcast_to(base[:, 1, None, None] + off[None, None, :], (len(pts), off.size, off.size))
    dist2 = (rr - pts[:, 0, None, None]) ** 2 + (cc - pts[:, 1, None, None]) ** 2
    H, W = mask.shape
    hit = (dist2 <= r * r) & (rr >= 0) & (rr < H) & (cc >= 0) & (cc < W)
    mask[rr[hit], cc[hit]] = 1


def render_vessels(cfg: GenConfig, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Binary mask and per-pixel vessel brightness for one eye."""
    size = cfg.image_size
    mask = np.zeros((size, size), dtype=np.uint8)
    bright = np.zeros((size, size))
    lo, hi = cfg.vessel_count_range
    n = int(rng.integers(lo, hi + 1))
    tort = rng.uniform(*cfg.tortuosity_range)
    width_centre = rng.uniform(*cfg.width_range)
    curves: list[np.ndarray] = []
    for i in range(n):
        start = None
        if curves and rng.uniform() < 0.4:
            parent = curves[int(rng.integers(len(curves)))]
            start = parent[int(rng.integers(len(parent) // 4, 3 * len(parent) // 4 + 1))]
        pts = _curve(rng, size, float(np.clip(tort + rng.normal(0, 0.1), 0, None)), start)
        curves.append(pts)
        width = float(np.clip(np.rint(width_centre + rng.normal(0, 0.5)), cfg.width_range[0], cfg.width_range[1]))
        one = np.zeros_like(mask)
        _stamp(one, pts, width)
        mask |= one
        bright = np.maximum(bright, one * rng.uniform(0.7, 1.0))
    return mask, bright


def compute_labels(mask: np.ndarray, thresholds: Sequence[float]) -> np.ndarray:
    stats = vessel_statistics(mask)
    return np.array([int(stats[s] > t) for s, t in zip(LABEL_STATS, thresholds)], dtype=np.int64)


def _eye_geometry(cfg: GenConfig, eye_index: int):
    rng = np.random.default_rng([cfg.seed, _GEOMETRY, eye_index])
    mask, bright = render_vessels(cfg, rng)
    labels = compute_labels(mask, cfg.label_thresholds)
    flips = rng.uniform(size=len(LABELS)) < cfg.label_noise
    return mask, bright, np.where(flips, 1 - labels, labels)


def _render_image(cfg: GenConfig, bright: np.ndarray, sample_index: int) -> np.ndarray:
    rng = np.random.default_rng([cfg.seed, _NOISE, sample_index])
    size = cfg.image_size
    yy, xx = np.mgrid[0:size, 0:size] / size
    layers = []
    for k, gain in enumerate(cfg.layer_gains):
        shade = cfg.background * (1.0 + 0.3 * np.sin(2 * np.pi * (yy * rng.uniform(0.5, 1.5) + xx * rng.uniform(0.5, 1.5))))
        img = shade + gain * bright + rng.normal(0.0, cfg.noise_sigma, size=(size, size))
        layers.append(np.clip(img, 0.0, 1.0))
    return np.stack(layers)


def generate_sample(cfg: GenConfig, index: int, _eye_cache: dict | None = None) -> LabeledSample:
    per_patient = cfg.eyes_per_patient * cfg.images_per_eye
    p, rem = divmod(index, per_patient)
    e, i = divmod(rem, cfg.images_per_eye)
    eye_index = p * cfg.eyes_per_patient + e
    if _eye_cache is not None and eye_index in _eye_cache:
        geom = _eye_cache[eye_index]
    else:
        geom = _eye_geometry(cfg, eye_index)
        if _eye_cache is not None:
            _eye_cache.clear()
            _eye_cache[eye_index] = geom
    mask, bright, labels = geom
    prng = np.random.default_rng([cfg.seed, _PATIENT, p])
    pid = f"P{p:04d}"
    eid = f"{pid}-{'OD' if e == 0 else 'OS'}"
    return LabeledSample(
        layers=_render_image(cfg, bright, index),
        vessel_mask=mask.copy(),
        labels=labels.copy(),
        patient_id=pid,
        eye_id=eid,
        sample_id=f"{eid}-{i}",
        age=int(prng.integers(20, 80)),
        gender=int(prng.integers(0, 2)),
    )


def generate_dataset(cfg: GenConfig) -> list[LabeledSample]:
    cfg.validate()
    total = cfg.n_patients * cfg.eyes_per_patient * cfg.images_per_eye
    cache: dict = {}
    return [generate_sample(cfg, i, cache) for i in range(total)]


# ---------------------------------------------------------------------------
# PGM + CSV storage
# ---------------------------------------------------------------------------

def write_pgm(path: str | Path, grid: np.ndarray, maxval: int = 65535) -> Path:
    grid = np.asarray(grid)
    H, W = grid.shape
    if maxval == 1:
        data = (grid > 0).astype(">u1")
    else:
        data = np.rint(np.clip(grid, 0.0, 1.0) * maxval).astype(">u2" if maxval > 255 else ">u1")
    path = Path(path)
    path.write_bytes(f"P5\n{W} {H}\n{maxval}\n".encode("ascii") + data.tobytes())
    return path


def _header_tokens(blob: bytes, path: Path) -> tuple[list[int], int]:
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(blob) and blob[pos:pos + 1].isspace():
            pos += 1
        if pos < len(blob) and blob[pos:pos + 1] == b"#":
            while pos < len(blob) and blob[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise PGMHeaderError(f"{path}: truncated PGM header")
        tokens.append(blob[start:pos])
    if tokens[0] != b"P5":
        raise PGMHeaderError(f"{path}: expected magic P5, got {tokens[0]!r}")
    try:
        nums = [int(t) for t in tokens[1:]]
    except ValueError:
        raise PGMHeaderError(f"{path}: non-numeric PGM header field") from None
    return nums, pos + 1


def read_pgm(path: str | Path) -> tuple[np.ndarray, int]:
    """Returns the grid scaled to [0, 1] and the file's maxval."""
    path = Path(path)
    if not path.exists():
        raise MissingFileError(f"missing image file: {path}")
    blob = path.read_bytes()
    (W, H, maxval), offset = _header_tokens(blob, path)
    if W < 1 or H < 1 or not 1 <= maxval <= 65535:
        raise PGMHeaderError(f"{path}: bad dimensions or maxval ({W}, {H}, {maxval})")
    dtype = ">u2" if maxval > 255 else ">u1"
    need = W * H * np.dtype(dtype).itemsize
    if len(blob) - offset < need:
        raise PGMHeaderError(f"{path}: expected {need} data bytes, found {len(blob) - offset}")
    raw = np.frombuffer(blob, dtype=dtype, count=W * H, offset=offset).reshape(H, W)
    return raw.astype(float) / maxval, maxval


def write_dataset(samples: Sequence[LabeledSample], dir_path: str | Path) -> Path:
    root = Path(dir_path)
    (root / "images").mkdir(parents=True, exist_ok=True)
    manifest = root / "manifest.csv"
    with manifest.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(MANIFEST_COLUMNS)
        for s in samples:
            names = [f"images/{s.sample_id}_L{k}.pgm" for k in range(3)]
            for k, name in enumerate(names):
                write_pgm(root / name, s.layers[k])
            mask_name = f"images/{s.sample_id}_mask.pgm"
            write_pgm(root / mask_name, s.vessel_mask, maxval=1)
            w.writerow([s.patient_id, s.eye_id, s.sample_id, s.age, s.gender,
                        *(int(v) for v in s.labels), *names, mask_name])
    return manifest


def read_dataset(manifest_path: str | Path) -> list[LabeledSample]:
    manifest = Path(manifest_path)
    if manifest.is_dir():
        manifest = manifest / "manifest.csv"
    if not manifest.exists():
        raise MissingFileError(f"manifest not found: {manifest}")
    root = manifest.parent
    out = []
    with manifest.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(header) != MANIFEST_COLUMNS:
            raise ManifestError(f"{manifest}: header {header} != {list(MANIFEST_COLUMNS)}")
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(MANIFEST_COLUMNS):
                raise ManifestError(f"{manifest}:{lineno}: expected {len(MANIFEST_COLUMNS)} columns, got {len(row)}")
            rec = dict(zip(MANIFEST_COLUMNS, row))
            try:
                labels = [int(rec[k]) for k in LABELS]
                age, gender = int(rec["age"]), int(rec["gender"])
            except ValueError:
                raise ManifestError(f"{manifest}:{lineno}: non-integer label or demographic field") from None
            layers = np.stack([read_pgm(root / rec[f"layer{k}"])[0] for k in range(3)])
            mask = read_pgm(root / rec["mask"])[0].astype(np.uint8)
            out.append(LabeledSample(layers, mask, np.array(labels), rec["patient_id"], rec["eye_id"],
                                     rec["sample_id"], age, gender))
    return out
