"""Synthetic shapes with analytic normals, noise augmentation and file I/O."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .errors import ConsistencyError, InvalidInput, ParseError
from .geometry import PointCloud

KINDS = ("sphere", "plane", "cube", "cylinder", "torus", "dihedral")
NOISE_LEVELS = (0.0036, 0.006, 0.0084, 0.012)
RNG_NAME = "numpy.random.PCG64"


@dataclass
class ShapeSpec:
    kind: str
    point_count: int = 2000
    extent: float = 1.0
    seed: int = 0
    angle: float = 90.0  # dihedral opening angle in degrees

    @property
    def name(self) -> str:
        if self.kind == "dihedral":
            return f"dihedral{self.angle:g}_s{self.seed}"
        return f"{self.kind}_s{self.seed}"


@dataclass
class NoiseSpec:
    level: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.level < 0:
            raise InvalidInput("noise level must be non-negative")


def _unit(v):
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def _sphere(rng, n, r):
    pts = r * _unit(rng.normal(size=(n, 3)))
    return pts, pts / np.linalg.norm(pts, axis=1, keepdims=True)


def _plane(rng, n, r):
    xy = rng.uniform(-r, r, size=(n, 2))
    pts = np.column_stack([xy, np.zeros(n)])
    return pts, np.tile([0.0, 0.0, 1.0], (n, 1))


def _resolve_faces(pts, faces, tol=1e-9):
    """Pick one face normal per point among the faces it lies on.

    ``faces`` is a list of (normal, offset, inside_fn) with ``normal . p ==
    offset`` on the face; on a crease the lexicographically smaller normal
    wins.
    """
    normals = np.zeros_like(pts)
    ordered = sorted(faces, key=lambda f: tuple(f[0]))
    assigned = np.zeros(len(pts), dtype=bool)
    for normal, offset, inside in ordered:
        on = (~assigned) & (np.abs(pts @ normal - offset) <= tol) & inside(pts)
        normals[on] = normal
        assigned |= on
    if not assigned.all():
        raise AssertionError("generator produced a point on no face")
    return normals


def _cube(rng, n, r):
    face = rng.integers(0, 6, size=n)
    uv = rng.uniform(-r, r, size=(n, 2))
    pts = np.zeros((n, 3))
    axis = face // 2
    sign = np.where(face % 2 == 0, 1.0, -1.0)
    for a in range(3):
        sel = axis == a
        others = [o for o in range(3) if o != a]
        pts[sel, a] = sign[sel] * r
        pts[sel, others[0]] = uv[sel, 0]
        pts[sel, others[1]] = uv[sel, 1]
    faces = []
    for a in range(3):
        for s in (1.0, -1.0):
            nrm = np.zeros(3)
            nrm[a] = s
            faces.append((nrm, r, lambda p: np.all(np.abs(p) <= r + 1e-12, axis=1)))
    return pts, _resolve_faces(pts, faces)


def _cylinder(rng, n, r):
    theta = rng.uniform(0.0, 2.0 * np.pi, size=n)
    z = rng.uniform(-r, r, size=n)
    radial = np.column_stack([np.cos(theta), np.sin(theta), np.zeros(n)])
    pts = 0.5 * r * radial + np.column_stack([np.zeros(n), np.zeros(n), z])
    return pts, radial / np.linalg.norm(radial, axis=1, keepdims=True)


def _torus(rng, n, r):
    big, small = 0.7 * r, 0.3 * r
    out = []
    # rejection sampling for uniform area density
    while sum(len(o) for o in out) < n:
        u = rng.uniform(0, 2 * np.pi, size=2 * n)
        v = rng.uniform(0, 2 * np.pi, size=2 * n)
        keep = rng.uniform(0, 1, size=2 * n) <= (big + small * np.cos(v)) / (big + small)
        out.append(np.column_stack([u[keep], v[keep]]))
    uv = np.concatenate(out)[:n]
    u, v = uv[:, 0], uv[:, 1]
    ring = np.column_stack([np.cos(u), np.sin(u), np.zeros(n)])
    tube = np.cos(v)[:, None] * ring + np.sin(v)[:, None] * np.array([0.0, 0.0, 1.0])
    pts = big * ring + small * tube
    return pts, _unit(tube)


def _dihedral(rng, n, r, angle_deg):
    """Two half-planes sharing the y axis with the given opening angle."""
    phi = math.radians(angle_deg)
    dir_a = np.array([1.0, 0.0, 0.0])
    dir_b = np.array([math.cos(phi), 0.0, math.sin(phi)])
    n_a = np.array([0.0, 0.0, 1.0])
    n_b = np.array([math.sin(phi), 0.0, -math.cos(phi)])
    side = rng.integers(0, 2, size=n)
    t = rng.uniform(0.0, r, size=n)
    y = rng.uniform(-r, r, size=n)
    dirs = np.where(side[:, None] == 0, dir_a, dir_b)
    pts = t[:, None] * dirs + y[:, None] * np.array([0.0, 1.0, 0.0])
    faces = [(n_a, 0.0, lambda p: p @ dir_a >= -1e-12),
             (n_b, 0.0, lambda p: p @ dir_b >= -1e-12)]
    normals = np.where(side[:, None] == 0, n_a, n_b)
    crease = t <= 1e-9
    if crease.any():
        normals[crease] = _resolve_faces(pts[crease], faces)
    return pts, normals


def generate(spec: ShapeSpec) -> PointCloud:
    """Sample ``spec.point_count`` surface points with exact unit normals."""
    if spec.kind not in KINDS:
        raise InvalidInput(f"unknown shape kind {spec.kind!r}; expected one of {KINDS}")
    if spec.point_count < 1 or spec.extent <= 0:
        raise InvalidInput("point_count must be >= 1 and extent > 0")
    rng = np.random.default_rng(spec.seed)
    n, r = spec.point_count, float(spec.extent)
    if spec.kind == "dihedral":
        pts, nrm = _dihedral(rng, n, r, spec.angle)
    else:
        pts, nrm = {"sphere": _sphere, "plane": _plane, "cube": _cube,
                    "cylinder": _cylinder, "torus": _torus}[spec.kind](rng, n, r)
    return PointCloud(pts, nrm)


def add_noise(cloud: PointCloud, spec: NoiseSpec) -> PointCloud:
    """Isotropic Gaussian jitter with sigma = level * clean bbox diagonal.

    Normals are carried over unchanged so evaluation stays against the clean
    surface.
    """
    if spec.level == 0:
        return PointCloud(cloud.points.copy(), None if cloud.normals is None else cloud.normals.copy())
    sigma = spec.level * cloud.bbox_diagonal
    rng = np.random.default_rng(spec.seed)
    noisy = cloud.points + rng.normal(0.0, sigma, size=cloud.points.shape)
    return PointCloud(noisy, None if cloud.normals is None else cloud.normals.copy())


# ---------------------------------------------------------------- file I/O


def _write_rows(path: Path, rows: np.ndarray):
    with open(path, "w") as fh:
        for x, y, z in rows:
            fh.write(f"{x:.17g} {y:.17g} {z:.17g}\n")


def _read_rows(path: Path) -> np.ndarray:
    rows = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 3:
                raise ParseError(f"expected 3 values, found {len(parts)}", path=path, line=lineno)
            try:
                rows.append([float(p) for p in parts])
            except ValueError as exc:
                raise ParseError(str(exc), path=path, line=lineno) from None
    return np.array(rows, dtype=np.float64).reshape(-1, 3)


def normals_path(path) -> Path:
    return Path(path).with_suffix(".normals")


def save_cloud(cloud: PointCloud, path):
    """Write ``<stem>.xyz`` and, if normals exist, ``<stem>.normals``."""
    path = Path(path).with_suffix(".xyz")
    _write_rows(path, cloud.points)
    if cloud.normals is not None:
        _write_rows(normals_path(path), cloud.normals)


def save_normals(normals, path):
    _write_rows(Path(path), np.asarray(normals, dtype=np.float64))


def load_normals(path) -> np.ndarray:
    return _read_rows(Path(path))


def load_cloud(path, normals: bool | None = None) -> PointCloud:
    """Read ``.xyz``; the sibling ``.normals`` is loaded when present.

    ``normals=True`` makes a missing normals file an error; ``False`` skips it.
    """
    path = Path(path)
    pts = _read_rows(path)
    npath = normals_path(path)
    nrm = None
    if normals is not False and npath.exists():
        nrm = _read_rows(npath)
        if len(nrm) != len(pts):
            raise ConsistencyError(f"{npath} has {len(nrm)} rows but {path} has {len(pts)}")
    elif normals:
        raise ConsistencyError(f"missing normals file {npath}")
    if len(pts) == 0:
        raise ParseError("no points", path=path)
    return PointCloud(pts, nrm)


# ---------------------------------------------------------------- datasets


@dataclass
class DatasetEntry:
    name: str
    shape: ShapeSpec
    noise: NoiseSpec

    def build(self) -> PointCloud:
        return add_noise(generate(self.shape), self.noise)

    def to_dict(self):
        return {"name": self.name, "shape": asdict(self.shape), "noise": asdict(self.noise)}

    @classmethod
    def from_dict(cls, d):
        return cls(d["name"], ShapeSpec(**d["shape"]), NoiseSpec(**d["noise"]))


DESK_SHAPES = (
    ("sphere", 90.0), ("plane", 90.0), ("cube", 90.0), ("cylinder", 90.0),
    ("torus", 90.0), ("dihedral", 90.0), ("dihedral", 120.0),
)


def desk_dataset(seed: int = 0, point_count: int = 2000, noise_levels=(0.0, *NOISE_LEVELS),
                 shapes=DESK_SHAPES) -> list[DatasetEntry]:
    """One cloud per (shape, noise level); seeds derived from ``seed``."""
    entries = []
    for si, (kind, angle) in enumerate(shapes):
        spec = ShapeSpec(kind, point_count, 1.0, seed * 1000 + si, angle)
        for li, level in enumerate(noise_levels):
            noise = NoiseSpec(level, seed * 1000 + 100 * si + li + 1)
            entries.append(DatasetEntry(f"{spec.name}_n{level:g}", spec, noise))
    return entries


def write_manifest(entries, path, extra: dict | None = None):
    doc = {"rng": RNG_NAME, "entries": [e.to_dict() for e in entries]}
    if extra:
        doc.update(extra)
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def read_manifest(path) -> list[DatasetEntry]:
    doc = json.loads(Path(path).read_text())
    return [DatasetEntry.from_dict(d) for d in doc["entries"]]


def write_dataset(entries, directory) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for e in entries:
        save_cloud(e.build(), directory / f"{e.name}.xyz")
    manifest = directory / "manifest.json"
    write_manifest(entries, manifest)
    return manifest
