"""Point cloud containers, binary I/O, normalization, downsampling and the
synthetic scene generator used for desk-scale experiments."""
from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MANIFEST_HEADER = ("id", "northing", "easting", "cloud_path")


class CloudError(ValueError):
    """Raised for malformed cloud files or invalid cloud operations."""


class ManifestError(ValueError):
    """Raised for malformed dataset manifests."""


@dataclass(frozen=True)
class PointCloud:
    points: np.ndarray
    normalized: bool = False

    def __post_init__(self):
        pts = np.ascontiguousarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise CloudError(f"points must be N x 3, got shape {pts.shape}")
        if pts.shape[0] < 1:
            raise CloudError("empty cloud")
        if not np.all(np.isfinite(pts)):
            raise CloudError("non-finite coordinates")
        if self.normalized and np.abs(pts).max() > 1.0:
            raise CloudError("normalized cloud has coordinates outside [-1, 1]")
        object.__setattr__(self, "points", pts)

    def __len__(self):
        return self.points.shape[0]


@dataclass(frozen=True)
class SubmapRecord:
    id: str
    northing: float
    easting: float
    cloud_path: str


@dataclass
class DatasetManifest:
    records: list[SubmapRecord] = field(default_factory=list)
    positive_radius: float = 25.0

    def __post_init__(self):
        if not self.positive_radius > 0:
            raise ManifestError("positive_radius must be > 0")
        seen = set()
        for r in self.records:
            if r.id in seen:
                raise ManifestError(f"duplicate id {r.id!r}")
            seen.add(r.id)

    def __len__(self):
        return len(self.records)

    @property
    def ids(self) -> list[str]:
        return [r.id for r in self.records]

    @property
    def positions(self) -> np.ndarray:
        return np.array([[r.northing, r.easting] for r in self.records], dtype=np.float64).reshape(-1, 2)


def load_cloud(path, expected_n: int | None = None) -> PointCloud:
    """Read a headerless little-endian float64 x,y,z file."""
    path = Path(path)
    if not path.is_file():
        raise CloudError(f"missing cloud file: {path}")
    raw = path.read_bytes()
    if len(raw) == 0:
        raise CloudError("empty cloud")
    if len(raw) % 24:
        raise CloudError(f"truncated cloud payload ({len(raw)} bytes is not a multiple of 24)")
    pts = np.frombuffer(raw, dtype="<f8").reshape(-1, 3).astype(np.float64)
    if not np.all(np.isfinite(pts)):
        raise CloudError(f"non-finite values in {path}")
    if expected_n is not None and pts.shape[0] != expected_n:
        raise CloudError(f"expected {expected_n} points, found {pts.shape[0]}")
    return PointCloud(pts, normalized=False)


def save_cloud(path, cloud: PointCloud | np.ndarray) -> None:
    pts = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=np.float64)
    Path(path).write_bytes(np.ascontiguousarray(pts, dtype="<f8").tobytes())


def normalize_cloud(cloud: PointCloud) -> PointCloud:
    """Center on the centroid and scale uniformly so max |coord| is 1."""
    pts = cloud.points - cloud.points.mean(axis=0)
    s = np.abs(pts).max()
    if s == 0:
        s = 1.0
    pts = pts / s
    # division can land a hair outside the unit box
    np.clip(pts, -1.0, 1.0, out=pts)
    return PointCloud(pts, normalized=True)


def downsample_random(cloud: PointCloud, target_n: int, seed: int) -> PointCloud:
    n = len(cloud)
    if n < target_n:
        raise CloudError(f"cloud has {n} points, cannot downsample to {target_n}")
    if n == target_n:
        return cloud
    rng = np.random.default_rng(seed)
    idx = np.sort(rng.choice(n, size=target_n, replace=False))
    return PointCloud(cloud.points[idx], normalized=cloud.normalized)


# ---------------------------------------------------------------------------
# synthetic scenes


@dataclass(frozen=True)
class _Primitive:
    kind: str            # "plane" | "line" | "blob"
    origin: np.ndarray
    axes: np.ndarray     # rows span the primitive (plane: 2, line: 1, blob: 3 scaled)
    extent: np.ndarray


def _scene(place_seed: int, mix: tuple[float, float, float]):
    rng = np.random.default_rng([0x5CE2E, place_seed])
    prims: list[_Primitive] = []
    weights: list[float] = []
    family_w = np.asarray(mix, dtype=np.float64)
    family_w = family_w / family_w.sum()

    n_planes = rng.integers(2, 5)
    for i in range(n_planes):
        yaw = rng.uniform(0, 2 * np.pi)
        u = np.array([np.cos(yaw), np.sin(yaw), 0.0])
        if i == 0 or rng.random() < 0.3:
            v = np.array([-np.sin(yaw), np.cos(yaw), 0.0])   # horizontal
            z0 = rng.uniform(-0.5, 1.0)
        else:
            v = np.array([0.0, 0.0, 1.0])                     # wall
            z0 = rng.uniform(0.0, 2.0)
        origin = np.array([rng.uniform(-8, 8), rng.uniform(-8, 8), z0])
        prims.append(_Primitive("plane", origin, np.stack([u, v]), rng.uniform(2.0, 8.0, size=2)))
    n_lines = rng.integers(2, 5)
    for _ in range(n_lines):
        if rng.random() < 0.6:
            d = np.array([0.0, 0.0, 1.0])                     # pole
        else:
            d = rng.normal(size=3)
            d /= np.linalg.norm(d)
        origin = np.array([rng.uniform(-9, 9), rng.uniform(-9, 9), rng.uniform(0.0, 2.0)])
        prims.append(_Primitive("line", origin, d[None, :], rng.uniform(2.0, 7.0, size=1)))
    n_blobs = rng.integers(1, 4)
    for _ in range(n_blobs):
        origin = np.array([rng.uniform(-8, 8), rng.uniform(-8, 8), rng.uniform(0.5, 3.0)])
        prims.append(_Primitive("blob", origin, np.eye(3), rng.uniform(0.3, 1.5, size=3)))

    counts = {"plane": n_planes, "line": n_lines, "blob": n_blobs}
    fam_index = {"plane": 0, "line": 1, "blob": 2}
    for p in prims:
        weights.append(family_w[fam_index[p.kind]] * rng.uniform(0.5, 1.5) / counts[p.kind])
    w = np.asarray(weights)
    return prims, w / w.sum()


def _sample_primitive(p: _Primitive, m: int, rng: np.random.Generator) -> np.ndarray:
    if m == 0:
        return np.empty((0, 3))
    if p.kind == "plane":
        st = rng.uniform(-0.5, 0.5, size=(m, 2)) * p.extent
        return p.origin + st @ p.axes
    if p.kind == "line":
        t = rng.uniform(0.0, 1.0, size=(m, 1)) * p.extent[0]
        return p.origin + t * p.axes[0]
    return p.origin + rng.normal(size=(m, 3)) * p.extent


def generate_synthetic_place(place_seed: int, observation_seed: int, n_points: int = 256,
                             rotation_deg: float = 0.0, noise_frac: float = 0.0, *,
                             jitter: float = 0.03, noise_seed: int | None = None,
                             mix: tuple[float, float, float] = (0.5, 0.3, 0.2),
                             return_noise_mask: bool = False):
    """Build a seeded structured scene and observe it.

    The scene layout (planes, linear edges, blobs) depends only on
    ``place_seed``. ``observation_seed`` drives the point sampling and jitter;
    ``noise_seed`` (defaults to ``observation_seed``) picks which points get
    replaced by uniform noise after normalization, so the structured part of
    an observation is identical for any noise level.
    """
    if n_points < 64:
        raise CloudError("n_points must be >= 64")
    if not 0.0 <= noise_frac <= 1.0:
        raise CloudError("noise_frac must lie in [0, 1]")
    prims, weights = _scene(place_seed, mix)
    rng = np.random.default_rng([0x0B5, place_seed, observation_seed])
    counts = rng.multinomial(n_points, weights)
    pts = np.concatenate([_sample_primitive(p, int(m), rng) for p, m in zip(prims, counts)])
    pts = pts[rng.permutation(n_points)]
    pts = pts + rng.normal(scale=jitter, size=pts.shape)

    a = np.deg2rad(rotation_deg)
    c, s = np.cos(a), np.sin(a)
    rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    pts = pts @ rot.T
    pts = normalize_cloud(PointCloud(pts)).points.copy()

    mask = np.zeros(n_points, dtype=bool)
    n_noise = math.floor(noise_frac * n_points + 1e-9)
    if n_noise:
        nrng = np.random.default_rng([0x401E, place_seed, observation_seed if noise_seed is None else noise_seed])
        idx = nrng.choice(n_points, size=n_noise, replace=False)
        pts[idx] = nrng.uniform(-1.0, 1.0, size=(n_noise, 3))
        mask[idx] = True
    cloud = PointCloud(pts, normalized=True)
    if return_noise_mask:
        return cloud, mask
    return cloud


# ---------------------------------------------------------------------------
# manifests


def load_manifest(path, positive_radius: float = 25.0) -> DatasetManifest:
    path = Path(path)
    base = path.parent
    records = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != MANIFEST_HEADER:
            raise ManifestError(f"manifest header must be {','.join(MANIFEST_HEADER)}")
        seen = set()
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 4:
                raise ManifestError(f"line {lineno}: expected 4 fields, got {len(row)}")
            rid, north, east, cpath = (x.strip() for x in row)
            if rid in seen:
                raise ManifestError(f"duplicate id {rid!r}")
            seen.add(rid)
            try:
                n, e = float(north), float(east)
            except ValueError:
                raise ManifestError(f"line {lineno}: unparseable number") from None
            if not os.path.isabs(cpath):
                cpath = str(base / cpath)
            records.append(SubmapRecord(rid, n, e, cpath))
    return DatasetManifest(records, positive_radius)


def write_manifest(path, records: list[SubmapRecord]) -> None:
    base = Path(path).parent
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MANIFEST_HEADER)
        for r in records:
            cp = r.cloud_path
            if os.path.isabs(cp):
                try:
                    cp = os.path.relpath(cp, base)
                except ValueError:
                    pass
            w.writerow([r.id, repr(float(r.northing)), repr(float(r.easting)), cp])
