"""Synthetic shape benchmark, PCX cloud files and the dataset manifest.

PCX is a plain-text format::

    pcx 1 <N> <C>
    <C whitespace-separated floats>   (N rows)

Labels are kept outside the clouds, in ``manifest.csv`` with the columns
``path,label,split``.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, asdict, field
from pathlib import Path

import numpy as np

from .perturb import rotation_matrix

SHAPES = ("sphere", "cube", "cylinder", "torus", "cone", "pyramid", "capsule", "ellipsoid")


class DataFormatError(ValueError):
    """Malformed PCX file or manifest."""


# -- shape samplers ------------------------------------------------------------

def _sample_parts(rng, n, areas):
    areas = np.asarray(areas, dtype=np.float64)
    return rng.choice(len(areas), size=n, p=areas / areas.sum())


def _unit_vectors(rng, n):
    v = rng.normal(size=(n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def _disk(rng, n, radius):
    r = radius * np.sqrt(rng.uniform(size=n))
    t = rng.uniform(0, 2 * np.pi, size=n)
    return r * np.cos(t), r * np.sin(t)


def _triangle(rng, n, a, b, c):
    u, v = rng.uniform(size=(2, n))
    flip = u + v > 1
    u[flip], v[flip] = 1 - u[flip], 1 - v[flip]
    return a + u[:, None] * (b - a) + v[:, None] * (c - a)


def sample_sphere(rng, n):
    return _unit_vectors(rng, n)


def sample_ellipsoid(rng, n):
    axes = np.array([1.0, rng.uniform(0.4, 0.7), rng.uniform(0.3, 0.6)])
    return _unit_vectors(rng, n) * axes


def sample_cube(rng, n):
    half = np.array([1.0, rng.uniform(0.8, 1.2), rng.uniform(0.8, 1.2)]) / 2
    areas = [half[1] * half[2]] * 2 + [half[0] * half[2]] * 2 + [half[0] * half[1]] * 2
    face = _sample_parts(rng, n, areas)
    pts = rng.uniform(-1, 1, size=(n, 3)) * half
    axis = face // 2
    sign = np.where(face % 2 == 0, 1.0, -1.0)
    pts[np.arange(n), axis] = sign * half[axis]
    return pts


def sample_cylinder(rng, n):
    r, h = rng.uniform(0.4, 0.6), rng.uniform(1.2, 2.0)
    part = _sample_parts(rng, n, [2 * np.pi * r * h, np.pi * r * r, np.pi * r * r])
    t = rng.uniform(0, 2 * np.pi, size=n)
    z = rng.uniform(-h / 2, h / 2, size=n)
    pts = np.stack([r * np.cos(t), r * np.sin(t), z], axis=1)
    for cap, zc in ((1, h / 2), (2, -h / 2)):
        m = part == cap
        dx, dy = _disk(rng, m.sum(), r)
        pts[m] = np.stack([dx, dy, np.full(m.sum(), zc)], axis=1)
    return pts


def sample_capsule(rng, n):
    r, h = rng.uniform(0.3, 0.45), rng.uniform(0.8, 1.4)
    part = _sample_parts(rng, n, [2 * np.pi * r * h, 4 * np.pi * r * r])
    t = rng.uniform(0, 2 * np.pi, size=n)
    pts = np.stack([r * np.cos(t), r * np.sin(t), rng.uniform(-h / 2, h / 2, size=n)], axis=1)
    m = part == 1
    s = _unit_vectors(rng, m.sum()) * r
    s[:, 2] += np.where(s[:, 2] >= 0, h / 2, -h / 2)
    pts[m] = s
    return pts


def sample_cone(rng, n):
    r, h = rng.uniform(0.5, 0.8), rng.uniform(1.0, 1.6)
    slant = np.hypot(r, h)
    part = _sample_parts(rng, n, [np.pi * r * slant, np.pi * r * r])
    # lateral surface: radius grows linearly from apex, area density ~ distance
    s = np.sqrt(rng.uniform(size=n))
    t = rng.uniform(0, 2 * np.pi, size=n)
    pts = np.stack([s * r * np.cos(t), s * r * np.sin(t), h / 2 - s * h], axis=1)
    m = part == 1
    dx, dy = _disk(rng, m.sum(), r)
    pts[m] = np.stack([dx, dy, np.full(m.sum(), -h / 2)], axis=1)
    return pts


def sample_pyramid(rng, n):
    a, h = rng.uniform(0.5, 0.7), rng.uniform(0.9, 1.4)
    apex = np.array([0.0, 0.0, h / 2])
    base = np.array([[a, a, -h / 2], [-a, a, -h / 2], [-a, -a, -h / 2], [a, -a, -h / 2]])
    tris = [(base[i], base[(i + 1) % 4], apex) for i in range(4)]
    tris += [(base[0], base[1], base[2]), (base[0], base[2], base[3])]
    areas = [0.5 * np.linalg.norm(np.cross(b - a_, c - a_)) for a_, b, c in tris]
    part = _sample_parts(rng, n, areas)
    pts = np.empty((n, 3))
    for i, (p, q, r) in enumerate(tris):
        m = part == i
        pts[m] = _triangle(rng, m.sum(), p, q, r)
    return pts


def sample_torus(rng, n):
    big, small = rng.uniform(0.7, 0.9), rng.uniform(0.2, 0.35)
    # rejection on the tube angle makes the sampling area-uniform
    out = []
    while sum(len(o) for o in out) < n:
        u = rng.uniform(0, 2 * np.pi, size=2 * n)
        v = rng.uniform(0, 2 * np.pi, size=2 * n)
        keep = rng.uniform(size=2 * n) < (big + small * np.cos(v)) / (big + small)
        u, v = u[keep], v[keep]
        out.append(np.stack([(big + small * np.cos(v)) * np.cos(u),
                             (big + small * np.cos(v)) * np.sin(u),
                             small * np.sin(v)], axis=1))
    return np.concatenate(out)[:n]


SAMPLERS = {
    "sphere": sample_sphere, "cube": sample_cube, "cylinder": sample_cylinder, "torus": sample_torus,
    "cone": sample_cone, "pyramid": sample_pyramid, "capsule": sample_capsule, "ellipsoid": sample_ellipsoid,
}


def normalize_unit_sphere(points: np.ndarray) -> np.ndarray:
    """Center on the centroid and scale so the farthest point has norm 1."""
    x = np.asarray(points, dtype=np.float64)
    x = x - x.mean(axis=0)
    scale = np.max(np.linalg.norm(x, axis=1))
    if scale <= 0:
        raise DataFormatError("cannot normalize a cloud whose points all coincide")
    return x / scale


def sample_shape(name: str, n: int, rng: np.random.Generator, noise: float = 0.0) -> np.ndarray:
    pts = SAMPLERS[name](rng, n)
    pts = pts @ rotation_matrix([0.0, 0.0, 1.0], rng.uniform(0, 2 * np.pi)).T
    if noise > 0:
        pts = pts + rng.normal(0.0, noise, size=pts.shape)
    return normalize_unit_sphere(pts)


# -- dataset -------------------------------------------------------------------

@dataclass(frozen=True)
class DatasetConfig:
    classes: tuple = SHAPES
    train_per_class: int = 100
    test_per_class: int = 30
    n_points: int = 512
    noise: float = 0.01
    seed: int = 0

    def __post_init__(self):
        if len(self.classes) < 2:
            raise ValueError("need at least 2 classes")
        unknown = [c for c in self.classes if c not in SAMPLERS]
        if unknown:
            raise ValueError(f"unknown shape classes {unknown}")


@dataclass
class SyntheticDataset:
    train_points: np.ndarray
    train_labels: np.ndarray
    test_points: np.ndarray
    test_labels: np.ndarray
    classes: tuple
    config: DatasetConfig = field(default_factory=DatasetConfig)

    @property
    def num_classes(self) -> int:
        return len(self.classes)


def generate_dataset(cfg: DatasetConfig) -> SyntheticDataset:
    """Balanced train/test splits; every sample has its own RNG stream."""
    root = np.random.SeedSequence(cfg.seed)
    per_class = cfg.train_per_class + cfg.test_per_class
    streams = root.spawn(len(cfg.classes) * per_class)
    split = {"train": ([], []), "test": ([], [])}
    for c, name in enumerate(cfg.classes):
        for j in range(per_class):
            rng = np.random.default_rng(streams[c * per_class + j])
            pts = sample_shape(name, cfg.n_points, rng, cfg.noise)
            key = "train" if j < cfg.train_per_class else "test"
            split[key][0].append(pts)
            split[key][1].append(c)
    return SyntheticDataset(
        np.stack(split["train"][0]), np.array(split["train"][1], dtype=np.int64),
        np.stack(split["test"][0]), np.array(split["test"][1], dtype=np.int64),
        tuple(cfg.classes), cfg,
    )


# -- PCX files -----------------------------------------------------------------

def write_pcx(path, values: np.ndarray) -> None:
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 2:
        raise DataFormatError(f"PCX rows must be 2-D, got shape {values.shape}")
    n, c = values.shape
    lines = [f"pcx 1 {n} {c}"]
    lines += [" ".join(f"{v:.17g}" for v in row) for row in values]
    try:
        Path(path).write_text("\n".join(lines) + "\n")
    except OSError as exc:
        raise OSError(f"cannot write PCX file {path}: {exc}") from exc


def read_pcx(path) -> np.ndarray:
    """Parse a PCX file; errors name the offending line."""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise OSError(f"cannot read PCX file {path}: {exc}") from exc
    lines = text.splitlines()
    if not lines:
        raise DataFormatError(f"{path}:1: empty file")
    head = lines[0].split()
    if len(head) != 4 or head[0] != "pcx" or head[1] != "1":
        raise DataFormatError(f"{path}:1: bad header {lines[0]!r}")
    try:
        n, c = int(head[2]), int(head[3])
    except ValueError:
        raise DataFormatError(f"{path}:1: bad header {lines[0]!r}") from None
    rows = [ln for ln in lines[1:]]
    while rows and not rows[-1].strip():
        rows.pop()
    if len(rows) != n:
        raise DataFormatError(f"{path}: header says {n} rows, found {len(rows)}")
    out = np.empty((n, c))
    for i, ln in enumerate(rows):
        parts = ln.split()
        if len(parts) != c:
            raise DataFormatError(f"{path}:{i + 2}: expected {c} values, got {len(parts)}")
        try:
            out[i] = [float(p) for p in parts]
        except ValueError:
            raise DataFormatError(f"{path}:{i + 2}: non-numeric value in {ln!r}") from None
    return out


def resample(points: np.ndarray, target: int, rng: np.random.Generator) -> np.ndarray:
    n = len(points)
    if n == target:
        return points
    idx = rng.choice(n, size=target, replace=n < target)
    return points[idx]


def ingest(path, target_n: int | None = None, seed: int = 0) -> np.ndarray:
    """Read a PCX cloud, resample to ``target_n`` rows and normalize it."""
    pts = read_pcx(path)
    if pts.shape[1] != 3:
        raise DataFormatError(f"{path}: expected 3 columns, got {pts.shape[1]}")
    if target_n is not None:
        pts = resample(pts, target_n, np.random.default_rng(seed))
    return normalize_unit_sphere(pts)


def write_dataset(ds: SyntheticDataset, out_dir) -> Path:
    """Write clouds as PCX files plus ``manifest.csv`` and ``dataset.json``."""
    out = Path(out_dir)
    (out / "clouds").mkdir(parents=True, exist_ok=True)
    rows = []
    for split, pts, labels in (("train", ds.train_points, ds.train_labels),
                               ("test", ds.test_points, ds.test_labels)):
        for i, (x, y) in enumerate(zip(pts, labels)):
            rel = f"clouds/{split}_{i:05d}.pcx"
            write_pcx(out / rel, x)
            rows.append((rel, int(y), split))
    with open(out / "manifest.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["path", "label", "split"])
        w.writerows(rows)
    meta = {"classes": list(ds.classes), "config": {**asdict(ds.config), "classes": list(ds.config.classes)}}
    (out / "dataset.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return out / "manifest.csv"


def read_manifest(path) -> list[tuple[str, int, str]]:
    path = Path(path)
    try:
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header != ["path", "label", "split"]:
                raise DataFormatError(f"{path}:1: expected header path,label,split")
            rows = []
            for lineno, row in enumerate(reader, start=2):
                if len(row) != 3 or row[2] not in ("train", "test") or not row[1].lstrip("-").isdigit():
                    raise DataFormatError(f"{path}:{lineno}: bad manifest row {row}")
                rows.append((row[0], int(row[1]), row[2]))
    except OSError as exc:
        raise OSError(f"cannot read manifest {path}: {exc}") from exc
    return rows


def load_dataset(data_dir, n_points: int | None = None, seed: int = 0) -> SyntheticDataset:
    """Load a dataset written by :func:`write_dataset` (or any manifest of PCX files)."""
    data_dir = Path(data_dir)
    rows = read_manifest(data_dir / "manifest.csv")
    meta_path = data_dir / "dataset.json"
    classes = None
    if meta_path.exists():
        classes = tuple(json.loads(meta_path.read_text())["classes"])
    split = {"train": ([], []), "test": ([], [])}
    for i, (rel, label, which) in enumerate(rows):
        split[which][0].append(ingest(data_dir / rel, n_points, seed=seed + i))
        split[which][1].append(label)
    if classes is None:
        classes = tuple(str(c) for c in sorted({r[1] for r in rows}))
    return SyntheticDataset(
        np.stack(split["train"][0]), np.array(split["train"][1], dtype=np.int64),
        np.stack(split["test"][0]), np.array(split["test"][1], dtype=np.int64),
        classes,
    )
