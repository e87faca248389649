"""Synthetic scenes with labeled boxes, plus KITTI-format cloud files.

Scenes are built to a configured background ratio: clutter is uniform
over the extent (redrawn until outside every box), objects are
axis-aligned boxes filled with surface-biased points, and every point
carries a foreground flag that exactly matches the point-in-box test.
Object sizes follow a log-normal over the cube root of box volume.

Point intensities loosely track material class (objects skew brighter),
mimicking how reflective surfaces show up in lidar returns; the overlap
between the two ranges keeps the toy task non-trivial.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np

from .errors import DataError, FormatError
from .pointops import PointCloud

_SHELL_FRACTION = 0.8   # of object points, rest uniform in the interior
_FILL_FACTOR = 0.49     # object points stay strictly inside half-size * 2*factor
_BOX_GAP = 0.05         # meters of clearance enforced between boxes
_FG_INTENSITY = (0.4, 1.0)
_BG_INTENSITY = (0.0, 0.6)


@dataclass
class Box:
    center: np.ndarray  # (3,) meters
    size: np.ndarray    # (3,) meters
    class_id: int = 1

    def contains(self, points: np.ndarray) -> np.ndarray:
        return np.all(np.abs(points - self.center) <= self.size / 2.0, axis=-1)

    @property
    def volume(self) -> float:
        return float(np.prod(self.size))


@dataclass
class SceneConfig:
    n_points: int = 2048
    bg_ratio: float = 0.8
    object_count: tuple[int, int] = (3, 6)      # inclusive range
    size_log_mean: float = 0.3                  # ln of cube-root volume
    size_log_sigma: float = 0.3
    extent: tuple[float, float, float] = (24.0, 24.0, 6.0)

    def __post_init__(self):
        if not 0.0 < self.bg_ratio < 1.0:
            raise DataError(f"bg_ratio must be in (0, 1), got {self.bg_ratio}")
        if any(e <= 0 for e in self.extent):
            raise DataError(f"extents must be positive, got {self.extent}")
        if self.object_count[0] > self.object_count[1] or self.object_count[0] < 0:
            raise DataError(f"bad object count range {self.object_count}")

    def stamp(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class Scene:
    cloud: PointCloud
    fg_label: np.ndarray       # (N,) bool
    boxes: list[Box]
    provenance: str


def _place_boxes(cfg: SceneConfig, rng: np.random.Generator, n_obj: int) -> list[Box]:
    extent = np.asarray(cfg.extent)
    boxes: list[Box] = []
    for _ in range(n_obj):
        for _attempt in range(200):
            s = np.exp(rng.normal(cfg.size_log_mean, cfg.size_log_sigma))
            ax, ay = np.exp(rng.normal(0.0, 0.2, size=2))
            size = np.array([s * ax, s * ay, s / (ax * ay)])
            if np.any(size > 0.9 * extent):
                continue
            lo = -extent / 2 + size / 2
            hi = extent / 2 - size / 2
            center = rng.uniform(lo, hi)
            ok = True
            for other in boxes:
                gap = np.abs(center - other.center) - (size + other.size) / 2
                if np.all(gap < _BOX_GAP):
                    ok = False
                    break
            if ok:
                boxes.append(Box(center, size))
                break
        else:
            raise DataError(
                f"could not place {n_obj} non-overlapping boxes in extent {cfg.extent}")
    return boxes


def _fill_box(box: Box, count: int, rng: np.random.Generator) -> np.ndarray:
    """Surface-biased points strictly inside the box."""
    half = box.size * _FILL_FACTOR
    pts = rng.uniform(-half, half, size=(count, 3))
    n_shell = int(round(count * _SHELL_FRACTION))
    if n_shell:
        faces = rng.integers(0, 6, size=n_shell)
        axis = faces // 2
        sign = np.where(faces % 2 == 0, 1.0, -1.0)
        pts[np.arange(n_shell), axis] = sign * half[axis]
    return pts + box.center


def generate_scene(cfg: SceneConfig, seed: int) -> Scene:
    """Deterministically build one labeled scene from (config, seed)."""
    rng = np.random.default_rng(seed)
    extent = np.asarray(cfg.extent)
    n_obj = int(rng.integers(cfg.object_count[0], cfg.object_count[1] + 1))
    boxes = _place_boxes(cfg, rng, n_obj)

    n_bg = int(round(cfg.n_points * cfg.bg_ratio)) if n_obj else cfg.n_points
    n_fg = cfg.n_points - n_bg

    fg_points = []
    if n_fg:
        share = np.full(n_obj, n_fg // n_obj, dtype=np.int64)
        share[: n_fg % n_obj] += 1
        for box, cnt in zip(boxes, share):
            if cnt:
                fg_points.append(_fill_box(box, int(cnt), rng))
    fg_points = (np.concatenate(fg_points).astype(np.float32) if fg_points
                 else np.empty((0, 3), dtype=np.float32))

    # reject on the float32 values that will be stored, so the in-box test
    # cannot flip after rounding
    bg_points = rng.uniform(-extent / 2, extent / 2, size=(n_bg, 3)).astype(np.float32)
    if boxes:
        for _attempt in range(100):
            inside = np.zeros(n_bg, dtype=bool)
            for box in boxes:
                inside |= box.contains(bg_points)
            if not inside.any():
                break
            redraw = rng.uniform(-extent / 2, extent / 2,
                                 size=(int(inside.sum()), 3)).astype(np.float32)
            bg_points[inside] = redraw
        else:
            raise DataError("background rejection sampling did not converge")

    coords = np.concatenate([fg_points, bg_points])
    labels = np.concatenate([np.ones(len(fg_points), dtype=bool),
                             np.zeros(n_bg, dtype=bool)])
    intensity = np.where(
        labels,
        rng.uniform(*_FG_INTENSITY, size=cfg.n_points),
        rng.uniform(*_BG_INTENSITY, size=cfg.n_points),
    ).astype(np.float32)

    perm = rng.permutation(cfg.n_points)
    cloud = PointCloud(coords[perm], intensity[perm][:, None])
    scene = Scene(cloud, labels[perm], boxes,
                  provenance=f"seed={seed},cfg={cfg.stamp()}")
    validate_scene(scene, cfg)
    return scene


def validate_scene(scene: Scene, cfg: SceneConfig | None = None) -> None:
    """Exhaustive label-consistency (and, given a config, ratio) check."""
    inside_any = np.zeros(scene.cloud.n, dtype=bool)
    inside_count = np.zeros(scene.cloud.n, dtype=np.int64)
    for box in scene.boxes:
        hit = box.contains(scene.cloud.coords)
        inside_any |= hit
        inside_count += hit
    if not np.array_equal(inside_any, scene.fg_label):
        raise DataError("fg_label disagrees with the point-in-box test")
    if np.any(inside_count[scene.fg_label] != 1):
        raise DataError("a foreground point lies in more than one box")
    if cfg is not None and scene.fg_label.any():
        ratio = 1.0 - scene.fg_label.mean()
        if abs(ratio - cfg.bg_ratio) > 0.02:
            raise DataError(
                f"background ratio {ratio:.4f} misses target {cfg.bg_ratio} by > 2%")


def size_distribution(scenes, bins=20, value_range=None):
    """Histogram of cube-root box volumes across scenes: (counts, edges)."""
    values = np.array([box.volume ** (1.0 / 3.0)
                       for scene in scenes for box in scene.boxes])
    if values.size == 0:
        raise DataError("no boxes present; size distribution is undefined")
    return np.histogram(values, bins=bins, range=value_range)


# ---------------------------------------------------------------------------
# KITTI-style binary clouds: consecutive [x, y, z, intensity] float32 LE


def read_kitti_bin(path) -> PointCloud:
    raw = Path(path).read_bytes()
    if len(raw) % 16 != 0:
        offset = len(raw) - (len(raw) % 16)
        raise FormatError(
            f"{path}: trailing {len(raw) % 16} bytes at offset {offset} "
            "(records are 16 bytes each)")
    records = np.frombuffer(raw, dtype="<f4").reshape(-1, 4)
    return PointCloud(records[:, :3].copy(), records[:, 3:4].copy())


def write_kitti_bin(path, cloud: PointCloud) -> None:
    records = np.concatenate(
        [cloud.coords.astype("<f4"), cloud.feats[:, :1].astype("<f4")], axis=1)
    Path(path).write_bytes(records.tobytes(order="C"))


def save_scene(stem, scene: Scene) -> None:
    """Write <stem>.bin (cloud) and <stem>.txt (labels + boxes)."""
    stem = Path(stem)
    write_kitti_bin(stem.with_suffix(".bin"), scene.cloud)
    with open(stem.with_suffix(".txt"), "w") as fh:
        fh.write(f"# provenance: {scene.provenance}\n")
        for i, flag in enumerate(scene.fg_label):
            fh.write(f"{i},{int(flag)}\n")
        for box in scene.boxes:
            cx, cy, cz = box.center
            sx, sy, sz = box.size
            fh.write(f"box,{cx!r},{cy!r},{cz!r},{sx!r},{sy!r},{sz!r},{box.class_id}\n")


def load_scene(stem) -> Scene:
    stem = Path(stem)
    cloud = read_kitti_bin(stem.with_suffix(".bin"))
    labels = np.zeros(cloud.n, dtype=bool)
    boxes: list[Box] = []
    provenance = ""
    with open(stem.with_suffix(".txt")) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            if line.startswith("# provenance:"):
                provenance = line.split(":", 1)[1].strip()
                continue
            parts = line.split(",")
            if parts[0] == "box":
                vals = [float(v) for v in parts[1:7]]
                boxes.append(Box(np.array(vals[:3]), np.array(vals[3:6]),
                                 int(parts[7])))
            else:
                labels[int(parts[0])] = bool(int(parts[1]))
    return Scene(cloud, labels, boxes, provenance)
