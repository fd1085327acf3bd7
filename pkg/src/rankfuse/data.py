"""Synthetic multi-domain scan corpora and on-disk corpus ingestion.

A domain is a smooth planar trajectory through a fixed set of 3D landmarks
(plane patches, boxes, scatter clutter). A scan is the set of landmark points
visible from a pose, expressed in a pose-centered frame, jittered, and
normalized to [-1, 1]. Landmarks and trajectory depend only on the domain
seed, so different sessions (traversals) of the same domain observe the same
world and nearby poses genuinely overlap.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, IngestionError, UsageError

DEFAULT_POINTS_PER_SCAN = 256

# One fixed sensor frame for every domain: scans are normalized by these
# extents, never per style, so cross-domain scale differences survive.
FRAME_XY = 60.0  # meters mapped to |x| = |y| = 1
FRAME_Z = 24.0  # meters mapped to z = 1

# Distinct sub-stream tags so world/session randomness never aliases.
_WORLD_TAG = 0xD0
_SESSION_TAG = 0x5E55


@dataclass(frozen=True)
class PointScan:
    """One scan: an (N, 3) float array of normalized coordinates in [-1, 1]."""

    points: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise UsageError(f"scan points must be (N, 3), got {pts.shape}")
        object.__setattr__(self, "points", pts)

    @property
    def count(self) -> int:
        return self.points.shape[0]


@dataclass(frozen=True)
class PlaceSample:
    """A scan tied to a planar pose (meters) inside one domain."""

    scan: PointScan
    pose: np.ndarray
    domain_id: int
    sample_id: int

    def __post_init__(self):
        object.__setattr__(self, "pose", np.asarray(self.pose, dtype=np.float64).reshape(2))


@dataclass(frozen=True)
class PairPolicy:
    """Distance thresholds (meters) defining positive/negative pairs.

    Training uses the dual-threshold scheme: pairs closer than ``pos_train``
    are positives, farther than ``neg_train`` are negatives, and the band in
    between is unlabeled and excluded from mining. Testing uses the single
    ``pos_test`` radius for ground truth.
    """

    pos_train: float = 10.0
    neg_train: float = 50.0
    pos_test: float = 25.0

    def __post_init__(self):
        if not self.pos_train > 0:
            raise ConfigurationError(f"PairPolicy.pos_train must be > 0, got {self.pos_train}")
        if not self.neg_train > self.pos_train:
            raise ConfigurationError(
                f"PairPolicy.neg_train must exceed pos_train ({self.pos_train}), got {self.neg_train}"
            )
        if not self.pos_test > 0:
            raise ConfigurationError(f"PairPolicy.pos_test must be > 0, got {self.pos_test}")


@dataclass(frozen=True)
class StyleParams:
    """Structural style plus sensor rig of a domain.

    Scans are normalized by the fixed FRAME_XY/FRAME_Z extents, so structure
    scale, reach, and mounting differences show up directly in the inputs;
    varying these fields is what produces domain shift.
    """

    plane_weight: float = 0.5
    box_weight: float = 0.3
    clutter_weight: float = 0.2
    landmark_density: float = 0.6  # landmarks per trajectory meter
    visibility_radius: float = 40.0  # meters
    noise: float = 0.02  # per-point jitter std, meters
    yaw_jitter: float = 0.35  # per-scan heading jitter, radians
    height_scale: float = 1.0  # multiplies landmark heights
    sensor_yaw: float = 0.0  # fixed mount rotation about z, radians
    sensor_tilt: float = 0.0  # fixed mount rotation about x, radians
    sensor_z: float = 0.0  # fixed mount height offset, meters
    axis_scale: tuple = (1.0, 1.0, 1.0)  # per-axis calibration scale

    def __post_init__(self):
        total = self.plane_weight + self.box_weight + self.clutter_weight
        if total <= 0 or min(self.plane_weight, self.box_weight, self.clutter_weight) < 0:
            raise ConfigurationError("StyleParams mixture weights must be non-negative and not all zero")
        if self.landmark_density <= 0:
            raise ConfigurationError(f"StyleParams.landmark_density must be > 0, got {self.landmark_density}")
        if self.visibility_radius <= 0:
            raise ConfigurationError(f"StyleParams.visibility_radius must be > 0, got {self.visibility_radius}")
        if self.noise < 0:
            raise ConfigurationError(f"StyleParams.noise must be >= 0, got {self.noise}")
        if self.height_scale <= 0:
            raise ConfigurationError(f"StyleParams.height_scale must be > 0, got {self.height_scale}")
        scale = tuple(float(v) for v in self.axis_scale)
        if len(scale) != 3 or min(scale) <= 0:
            raise ConfigurationError(f"StyleParams.axis_scale needs 3 positive entries, got {self.axis_scale}")
        object.__setattr__(self, "axis_scale", scale)


# Contrasting structures and sensor rigs; sequential training across these
# shifts the input statistics enough that plain fine-tuning forgets.
STYLE_PRESETS = {
    "plains": StyleParams(
        plane_weight=0.7,
        box_weight=0.1,
        clutter_weight=0.2,
        landmark_density=0.45,
        visibility_radius=55.0,
        noise=0.02,
        yaw_jitter=0.1,
        height_scale=0.6,
        sensor_yaw=0.0,
        sensor_z=0.0,
    ),
    "depot": StyleParams(
        plane_weight=0.15,
        box_weight=0.75,
        clutter_weight=0.1,
        landmark_density=0.5,
        visibility_radius=40.0,
        noise=0.015,
        yaw_jitter=0.1,
        height_scale=1.3,
        sensor_yaw=1.8,
        sensor_tilt=0.3,
        sensor_z=2.0,
        axis_scale=(1.35, 0.75, 1.2),
    ),
    "grove": StyleParams(
        plane_weight=0.1,
        box_weight=0.15,
        clutter_weight=0.75,
        landmark_density=0.5,
        visibility_radius=42.0,
        noise=0.04,
        yaw_jitter=0.12,
        height_scale=0.9,
        sensor_yaw=-2.2,
        sensor_tilt=-0.25,
        sensor_z=0.5,
        axis_scale=(0.7, 1.3, 0.85),
    ),
    "arcade": StyleParams(
        plane_weight=0.35,
        box_weight=0.55,
        clutter_weight=0.1,
        landmark_density=0.5,
        visibility_radius=38.0,
        noise=0.01,
        yaw_jitter=0.08,
        height_scale=1.6,
        sensor_yaw=2.8,
        sensor_tilt=0.4,
        sensor_z=1.5,
        axis_scale=(1.25, 1.2, 0.65),
    ),
}


@dataclass(frozen=True)
class DomainSpec:
    """Everything needed to rebuild one domain deterministically.

    ``session`` selects a traversal of the same world: session 0 poses sit on
    the trajectory anchors, later sessions revisit them with small pose
    offsets, fresh per-scan yaw, and fresh jitter (database vs. query dates).
    """

    seed: int
    n_places: int
    trajectory_length: float = 1000.0
    style: StyleParams = field(default_factory=StyleParams)
    session: int = 0

    def __post_init__(self):
        if self.n_places < 2:
            raise ConfigurationError(f"DomainSpec.n_places must be >= 2, got {self.n_places}")
        if self.trajectory_length <= 0:
            raise ConfigurationError(
                f"DomainSpec.trajectory_length must be > 0, got {self.trajectory_length}"
            )
        if self.session < 0:
            raise ConfigurationError(f"DomainSpec.session must be >= 0, got {self.session}")


@dataclass(frozen=True)
class PairRelation:
    """Symmetric, irreflexive positive/negative masks over one sample list."""

    positive: np.ndarray  # (N, N) bool
    negative: np.ndarray  # (N, N) bool
    sample_ids: tuple[int, ...]
    mode: str


# ---------------------------------------------------------------------------
# World construction


def _trajectory_curve(rng: np.random.Generator, length: float, resolution: int = 2048):
    """Smooth folded planar curve with total arc length ``length``.

    Returns dense curve points (resolution, 2) and cumulative arc lengths.
    """
    u = np.linspace(0.0, 1.0, resolution)
    xy = np.zeros((resolution, 2))
    for axis in range(2):
        for k in range(1, 5):
            amp = rng.uniform(0.4, 1.0) / k
            phase = rng.uniform(0.0, 2.0 * math.pi)
            xy[:, axis] += amp * np.sin(2.0 * math.pi * k * u + phase)
    seg = np.linalg.norm(np.diff(xy, axis=0), axis=1)
    arc = np.concatenate([[0.0], np.cumsum(seg)])
    xy *= length / arc[-1]
    arc *= length / arc[-1]
    return xy, arc


def _anchor_poses(curve: np.ndarray, arc: np.ndarray, n: int):
    """Place n poses at equal arc spacing; returns poses (n,2) and tangents (n,2)."""
    targets = np.linspace(0.0, arc[-1], n)
    idx = np.searchsorted(arc, targets, side="left").clip(1, len(arc) - 1)
    lo, hi = idx - 1, idx
    span = arc[hi] - arc[lo]
    t = np.where(span > 0, (targets - arc[lo]) / np.where(span > 0, span, 1.0), 0.0)
    poses = curve[lo] + (curve[hi] - curve[lo]) * t[:, None]
    tangents = curve[hi] - curve[lo]
    norms = np.linalg.norm(tangents, axis=1, keepdims=True)
    tangents = np.where(norms > 0, tangents / np.where(norms > 0, norms, 1.0), [[1.0, 0.0]])
    return poses, tangents


def _plane_points(rng: np.random.Generator, center: np.ndarray, facing: float) -> np.ndarray:
    width = rng.uniform(4.0, 10.0)
    height = rng.uniform(3.0, 8.0)
    n = 24
    s = rng.uniform(-0.5, 0.5, n) * width
    z = rng.uniform(0.0, 1.0, n) * height
    along = np.array([-math.sin(facing), math.cos(facing)])
    pts = np.empty((n, 3))
    pts[:, :2] = center[None, :] + s[:, None] * along[None, :]
    pts[:, 2] = z
    return pts


def _box_points(rng: np.random.Generator, center: np.ndarray) -> np.ndarray:
    half = rng.uniform(1.5, 4.0, 2)
    height = rng.uniform(3.0, 10.0)
    theta = rng.uniform(0.0, 2.0 * math.pi)
    n = 36
    face = rng.integers(0, 4, n)
    a = rng.uniform(-1.0, 1.0, n)
    z = rng.uniform(0.0, 1.0, n) * height
    local = np.empty((n, 2))
    for f, (sx, sy) in enumerate([(1, 0), (-1, 0), (0, 1), (0, -1)]):
        m = face == f
        if sx:
            local[m, 0] = sx * half[0]
            local[m, 1] = a[m] * half[1]
        else:
            local[m, 0] = a[m] * half[0]
            local[m, 1] = sy * half[1]
    rot = np.array([[math.cos(theta), -math.sin(theta)], [math.sin(theta), math.cos(theta)]])
    pts = np.empty((n, 3))
    pts[:, :2] = center[None, :] + local @ rot.T
    pts[:, 2] = z
    return pts


def _clutter_points(rng: np.random.Generator, center: np.ndarray) -> np.ndarray:
    sig_xy = rng.uniform(1.0, 3.0)
    sig_z = rng.uniform(1.0, 4.0)
    n = 16
    pts = np.empty((n, 3))
    pts[:, :2] = center[None, :] + rng.normal(0.0, sig_xy, (n, 2))
    pts[:, 2] = np.abs(rng.normal(sig_z, 0.5 * sig_z, n))
    return pts


@dataclass(frozen=True)
class _World:
    curve: np.ndarray
    arc: np.ndarray
    landmark_centers: np.ndarray  # (M, 2)
    landmark_points: list  # list of (n_i, 3) world-frame arrays


def _build_world(spec: DomainSpec) -> _World:
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([spec.seed, _WORLD_TAG])))
    curve, arc = _trajectory_curve(rng, spec.trajectory_length)
    style = spec.style

    n_landmarks = max(8, int(round(style.landmark_density * spec.trajectory_length)))
    weights = np.array([style.plane_weight, style.box_weight, style.clutter_weight])
    weights = weights / weights.sum()

    # Landmarks hang off the trajectory at lateral offsets on either side,
    # scaled to the sensor reach so short-range styles still see structure.
    u = rng.uniform(0.0, arc[-1], n_landmarks)
    idx = np.searchsorted(arc, u).clip(1, len(arc) - 1)
    base = curve[idx]
    tangent = curve[idx] - curve[idx - 1]
    tnorm = np.linalg.norm(tangent, axis=1, keepdims=True)
    tangent = tangent / np.where(tnorm > 0, tnorm, 1.0)
    normal = np.stack([-tangent[:, 1], tangent[:, 0]], axis=1)
    side = rng.choice([-1.0, 1.0], n_landmarks)
    offset = rng.uniform(0.15, 0.8, n_landmarks) * style.visibility_radius
    centers = base + normal * (side * offset)[:, None]

    kinds = rng.choice(3, n_landmarks, p=weights)
    points = []
    for i in range(n_landmarks):
        c = centers[i]
        if kinds[i] == 0:
            facing = math.atan2(tangent[i, 1], tangent[i, 0])
            pts = _plane_points(rng, c, facing)
        elif kinds[i] == 1:
            pts = _box_points(rng, c)
        else:
            pts = _clutter_points(rng, c)
        pts[:, 2] *= style.height_scale
        points.append(pts)
    return _World(curve=curve, arc=arc, landmark_centers=centers, landmark_points=points)


# ---------------------------------------------------------------------------
# Generation


def generate_domain_with_landmarks(
    spec: DomainSpec, points_per_scan: int = DEFAULT_POINTS_PER_SCAN
):
    """Generate a domain corpus plus, per sample, the set of visible landmark ids.

    The landmark-id side channel exists so overlap of positive/negative pairs
    can be audited without reverse-engineering the scans.
    """
    if points_per_scan < 1:
        raise ConfigurationError(f"points_per_scan must be >= 1, got {points_per_scan}")

    world = _build_world(spec)
    style = spec.style
    anchors, _tangents = _anchor_poses(world.curve, world.arc, spec.n_places)

    rng = np.random.Generator(
        np.random.PCG64(np.random.SeedSequence([spec.seed, _SESSION_TAG, spec.session]))
    )

    poses = anchors.copy()
    if spec.session > 0:
        poses = poses + rng.normal(0.0, 1.5, poses.shape)

    samples = []
    visible_sets = []
    for i in range(spec.n_places):
        pose = poses[i]
        dists = np.linalg.norm(world.landmark_centers - pose[None, :], axis=1)
        vis = np.flatnonzero(dists <= style.visibility_radius)
        visible_sets.append(frozenset(int(v) for v in vis))

        if len(vis) > 0:
            pts = np.concatenate([world.landmark_points[j] for j in vis], axis=0)
            rel = pts.copy()
            rel[:, 0] -= pose[0]
            rel[:, 1] -= pose[1]
        else:
            rel = rng.uniform(-2.0, 2.0, (points_per_scan, 3))

        yaw = style.sensor_yaw + rng.uniform(-style.yaw_jitter, style.yaw_jitter)
        c, s = math.cos(yaw), math.sin(yaw)
        rot = np.array([[c, -s], [s, c]])
        rel[:, :2] = rel[:, :2] @ rot.T
        if style.sensor_tilt != 0.0:
            ct, st = math.cos(style.sensor_tilt), math.sin(style.sensor_tilt)
            tilt = np.array([[ct, -st], [st, ct]])
            rel[:, 1:] = rel[:, 1:] @ tilt.T
        rel *= style.axis_scale
        rel[:, 2] += style.sensor_z
        rel = rel + rng.normal(0.0, style.noise, rel.shape)

        n_pts = rel.shape[0]
        pick = rng.choice(n_pts, size=points_per_scan, replace=n_pts < points_per_scan)
        rel = rel[pick]

        rel[:, 0] /= FRAME_XY
        rel[:, 1] /= FRAME_XY
        rel[:, 2] /= FRAME_Z
        np.clip(rel, -1.0, 1.0, out=rel)

        samples.append(
            PlaceSample(scan=PointScan(rel), pose=pose, domain_id=0, sample_id=i)
        )
    return samples, visible_sets


def generate_domain(
    spec: DomainSpec, points_per_scan: int = DEFAULT_POINTS_PER_SCAN
) -> list[PlaceSample]:
    """Deterministically generate ``spec.n_places`` samples along one trajectory."""
    samples, _ = generate_domain_with_landmarks(spec, points_per_scan)
    return samples


def with_domain_id(samples: list[PlaceSample], domain_id: int) -> list[PlaceSample]:
    return [replace(s, domain_id=domain_id) for s in samples]


# ---------------------------------------------------------------------------
# Pair labeling


def pairwise_pose_distances(samples: list[PlaceSample]) -> np.ndarray:
    poses = np.stack([s.pose for s in samples])
    diff = poses[:, None, :] - poses[None, :, :]
    return np.sqrt(np.sum(diff * diff, axis=2))


def label_pairs(samples: list[PlaceSample], policy: PairPolicy, mode: str) -> PairRelation:
    """Label sample pairs of a single domain by pose distance.

    Train mode: positive under ``pos_train``, negative beyond ``neg_train``,
    unlabeled in between. Test mode: positive under ``pos_test`` only.
    """
    if mode not in ("train", "test"):
        raise UsageError(f"mode must be 'train' or 'test', got {mode!r}")
    domains = {s.domain_id for s in samples}
    if len(domains) > 1:
        raise UsageError(f"label_pairs requires a single domain, got domain_ids {sorted(domains)}")
    dist = pairwise_pose_distances(samples)
    if mode == "train":
        positive = dist < policy.pos_train
        negative = dist > policy.neg_train
    else:
        positive = dist < policy.pos_test
        negative = np.zeros_like(positive)
    np.fill_diagonal(positive, False)
    np.fill_diagonal(negative, False)
    return PairRelation(
        positive=positive,
        negative=negative,
        sample_ids=tuple(s.sample_id for s in samples),
        mode=mode,
    )


# ---------------------------------------------------------------------------
# On-disk corpus format: poses.csv + one little-endian float32 .f32 per scan

POSES_FILE = "poses.csv"
_CSV_HEADER = ["sample_id", "x", "y", "scan_file"]


def save_corpus(samples: list[PlaceSample], path: str | Path) -> Path:
    """Write a corpus directory (poses.csv plus per-scan .f32 files)."""
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / POSES_FILE, "w", newline="\n", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(_CSV_HEADER)
        for s in samples:
            name = f"scan_{s.sample_id:06d}.f32"
            (out / name).write_bytes(
                np.ascontiguousarray(s.scan.points, dtype="<f4").tobytes()
            )
            writer.writerow([s.sample_id, repr(float(s.pose[0])), repr(float(s.pose[1])), name])
    return out


def load_corpus(path: str | Path, policy: PairPolicy, domain_id: int = 0) -> list[PlaceSample]:
    """Load a corpus directory, renormalizing out-of-range scans to [-1, 1].

    The point count of the first scan fixes the corpus point count; any
    mismatch is an ingestion error naming the file and poses.csv line.
    """
    root = Path(path)
    poses_path = root / POSES_FILE
    if not poses_path.is_file():
        raise IngestionError(f"missing {POSES_FILE} in {root}")

    samples: list[PlaceSample] = []
    seen_ids: set[int] = set()
    expected_count: int | None = None
    with open(poses_path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise IngestionError(f"{POSES_FILE}: empty file") from None
        if [h.strip() for h in header] != _CSV_HEADER:
            raise IngestionError(f"{POSES_FILE} line 1: expected header {','.join(_CSV_HEADER)}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 4:
                raise IngestionError(f"{POSES_FILE} line {lineno}: expected 4 fields, got {len(row)}")
            try:
                sample_id = int(row[0])
                x = float(row[1])
                y = float(row[2])
            except ValueError as exc:
                raise IngestionError(f"{POSES_FILE} line {lineno}: {exc}") from None
            if sample_id in seen_ids:
                raise IngestionError(f"{POSES_FILE} line {lineno}: duplicate sample_id {sample_id}")
            seen_ids.add(sample_id)
            scan_file = row[3].strip()
            scan_path = root / scan_file
            if not scan_path.is_file():
                raise IngestionError(f"{POSES_FILE} line {lineno}: missing scan file {scan_file}")
            raw = np.frombuffer(scan_path.read_bytes(), dtype="<f4")
            if raw.size == 0 or raw.size % 3 != 0:
                raise IngestionError(
                    f"{POSES_FILE} line {lineno}: scan file {scan_file} has {raw.size} floats, not a multiple of 3"
                )
            pts = raw.astype(np.float64).reshape(-1, 3)
            if expected_count is None:
                expected_count = pts.shape[0]
            elif pts.shape[0] != expected_count:
                raise IngestionError(
                    f"{POSES_FILE} line {lineno}: scan file {scan_file} has {pts.shape[0]} points, expected {expected_count}"
                )
            peak = np.max(np.abs(pts)) if pts.size else 0.0
            if peak > 1.0:
                pts = pts / peak
            samples.append(
                PlaceSample(scan=PointScan(pts), pose=np.array([x, y]), domain_id=domain_id, sample_id=sample_id)
            )
    return samples


def landmark_overlap(a: frozenset, b: frozenset) -> float:
    """Jaccard overlap of two visible-landmark id sets."""
    if not a and not b:
        return 0.0
    return len(a & b) / len(a | b)
