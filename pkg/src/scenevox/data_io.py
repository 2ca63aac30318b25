"""Dataset readers, writers, and the synthetic desk-scale scene generator.

File formats:
  * velodyne scans: consecutive little-endian float32 (x, y, z, intensity)
    quadruples, 16 bytes per point.
  * packed voxel grids: one bit per voxel, most-significant bit first within
    each byte, flat x-major order (x, then y, then z); a sibling ".invalid"
    file in the same packing marks voxels excluded from losses and metrics.
  * labels: whitespace-delimited text (KITTI object format for real data,
    the detection dump format for synthetic ground truth).
"""

import json
import math
import os
from dataclasses import dataclass, field, replace

import numpy as np

from .boxes import Box3D, difficulty_from_range, wrap_angle
from .errors import ConfigError, DatasetError, FormatError
from .grids import DenseOccupancyGrid, PointCloud, VoxelGridConfig


# ---------------------------------------------------------------------------
# Velodyne point cloud files
# ---------------------------------------------------------------------------

def read_kitti_velodyne(path) -> PointCloud:
    """Read a velodyne .bin scan. Rejects truncated files and non-finite points."""
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) % 16 != 0:
        raise FormatError(
            f"{path}: size {len(raw)} is not a multiple of 16 bytes (4 float32 per point)"
        )
    with np.errstate(invalid="ignore"):  # garbage bytes may decode to odd NaNs
        pts = np.frombuffer(raw, dtype="<f4").astype(np.float64).reshape(-1, 4)
    try:
        return PointCloud(pts)
    except ValueError as e:
        raise FormatError(f"{path}: {e}") from e


def write_kitti_velodyne(path, pc: PointCloud):
    """Write a point cloud in the velodyne layout (little-endian float32)."""
    np.asarray(pc.points, dtype=np.float64).astype("<f4").tofile(path)


# ---------------------------------------------------------------------------
# Packed-bit occupancy files
# ---------------------------------------------------------------------------

def pack_voxel_bits(occupancy) -> bytes:
    """Pack a binary (W, H, D) array into MSB-first bytes in x-major order."""
    occ = np.asarray(occupancy)
    flat = (occ.reshape(-1) >= 0.5).astype(np.uint8)
    if flat.size % 8 != 0:
        raise ValueError(f"voxel count {flat.size} is not a multiple of 8")
    return np.packbits(flat).tobytes()


def unpack_voxel_bits(data: bytes, dims) -> np.ndarray:
    """Unpack MSB-first packed bits into a (W, H, D) uint8 array."""
    w, h, d = dims
    expected = w * h * d // 8
    if w * h * d % 8 != 0:
        raise ValueError(f"voxel count {w * h * d} is not a multiple of 8")
    if len(data) != expected:
        raise FormatError(
            f"packed voxel payload is {len(data)} bytes, expected {expected} for dims {tuple(dims)}"
        )
    return np.unpackbits(np.frombuffer(data, dtype=np.uint8)).reshape(w, h, d)


def read_semantickitti_voxels(bin_path, invalid_path=None, dims=(256, 256, 32)) -> DenseOccupancyGrid:
    """Read packed occupancy (and optional packed invalid mask) files.

    dims defaults to the 256x256x32 layout of full-scale completion grids;
    synthetic datasets reuse the format at smaller dims.
    """
    with open(bin_path, "rb") as f:
        occ = unpack_voxel_bits(f.read(), dims)
    mask = np.ones(tuple(dims), dtype=np.uint8)
    if invalid_path is not None:
        with open(invalid_path, "rb") as f:
            invalid = unpack_voxel_bits(f.read(), dims)
        mask = (1 - invalid).astype(np.uint8)
    return DenseOccupancyGrid(tuple(dims), occ.astype(np.float64), mask)


def write_semantickitti_voxels(bin_path, grid: DenseOccupancyGrid, invalid_path=None):
    with open(bin_path, "wb") as f:
        f.write(pack_voxel_bits(np.asarray(grid.occupancy) >= 0.5))
    if invalid_path is not None:
        invalid = 1 - (np.asarray(grid.valid_mask) > 0).astype(np.uint8)
        with open(invalid_path, "wb") as f:
            f.write(pack_voxel_bits(invalid))


# ---------------------------------------------------------------------------
# KITTI object labels
# ---------------------------------------------------------------------------

def read_kitti_calib(path):
    """Parse a KITTI calib file into rectification and velo->cam matrices."""
    entries = {}
    with open(path) as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            key, _, rest = line.partition(":")
            try:
                entries[key.strip()] = np.array([float(v) for v in rest.split()])
            except ValueError as e:
                raise FormatError(f"{path}: unparseable calib entry {key!r}") from e
    try:
        r0 = entries["R0_rect"].reshape(3, 3)
        tr = entries["Tr_velo_to_cam"].reshape(3, 4)
    except KeyError as e:
        raise FormatError(f"{path}: missing calib entry {e}") from e
    except ValueError as e:
        raise FormatError(f"{path}: calib entry has wrong element count") from e
    return {"R0_rect": r0, "Tr_velo_to_cam": tr}


def _rect_to_lidar(points_rect, calib):
    """Map (N, 3) rectified-camera points into the LiDAR frame."""
    r0 = calib["R0_rect"]
    tr = calib["Tr_velo_to_cam"]
    cam = points_rect @ np.linalg.inv(r0).T
    rot, t = tr[:, :3], tr[:, 3]
    return (cam - t) @ np.linalg.inv(rot).T


def _kitti_difficulty(trunc, occ, bbox_height):
    if bbox_height >= 40 and occ <= 0 and trunc <= 0.15:
        return "easy"
    if bbox_height >= 25 and occ <= 1 and trunc <= 0.30:
        return "moderate"
    return "hard"


def read_kitti_labels(label_path, calib_path, keep_classes=("Car",)):
    """Read KITTI object labels into LiDAR-frame boxes (car class only).

    The camera-frame location is the bottom face center; the returned center
    sits half a height higher along +z. DontCare and non-kept classes are
    skipped. Malformed lines are rejected with their line number.
    """
    calib = read_kitti_calib(calib_path)
    boxes = []
    with open(label_path) as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            parts = line.split()
            if parts[0] == "DontCare":
                continue
            if len(parts) < 15:
                raise FormatError(f"{label_path}:{lineno}: expected 15 fields, got {len(parts)}")
            try:
                trunc, occ = float(parts[1]), float(parts[2])
                bbox = [float(v) for v in parts[4:8]]
                h, w, l = (float(v) for v in parts[8:11])
                loc = np.array([float(v) for v in parts[11:14]])
                ry = float(parts[14])
            except ValueError as e:
                raise FormatError(f"{label_path}:{lineno}: {e}") from e
            if parts[0] not in keep_classes:
                continue
            center = _rect_to_lidar(loc[None, :], calib)[0]
            center[2] += h / 2.0
            yaw = wrap_angle(-ry - math.pi / 2.0)
            difficulty = _kitti_difficulty(trunc, occ, bbox[3] - bbox[1])
            boxes.append(Box3D(tuple(center), (l, w, h), yaw, cls=0,
                               score=1.0, difficulty=difficulty))
    return boxes


# ---------------------------------------------------------------------------
# Synthetic scenes
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SyntheticSceneConfig:
    """Desk-scale LiDAR scene: a ground plane plus box shells, scanned once.

    Boxes are placed without overlap (minimum center separation) and fully
    inside the grid region. A single scan is simulated by casting rays from
    the sensor origin and keeping first-hit voxels only.
    """

    grid: VoxelGridConfig = field(default_factory=VoxelGridConfig)
    n_boxes: tuple = (2, 6)
    box_length: tuple = (3.2, 4.4)
    box_width: tuple = (1.5, 1.9)
    box_height: tuple = (1.3, 1.8)
    min_center_distance: float = 5.0
    ground_layers: int = 1
    sensor_origin: tuple = (0.8, 16.0, 2.2)
    azimuth_rays: int = 96
    elevation_rays: int = 24
    elevation_range: tuple = (-40.0, 2.0)
    easy_below: float = 20.0
    moderate_below: float = 35.0
    point_jitter: float = 0.2
    seed: int = 0
    fixed_boxes: tuple = None

    def __post_init__(self):
        if self.n_boxes[0] < 0 or self.n_boxes[1] < self.n_boxes[0]:
            raise ConfigError(f"invalid box count range {self.n_boxes}")
        if not 0.0 <= self.point_jitter < 0.5:
            raise ConfigError("point_jitter must stay inside the voxel (< 0.5)")
        if self.ground_layers < 1:
            raise ConfigError("ground_layers must be >= 1")

    @property
    def ground_top(self):
        """Metric height of the ground surface (top of the ground layers)."""
        return self.grid.origin[2] + self.ground_layers * self.grid.voxel_size[2]


def _box_difficulty(cfg, center):
    dist = float(np.linalg.norm(np.asarray(center) - np.asarray(cfg.sensor_origin)))
    return difficulty_from_range(dist, cfg.easy_below, cfg.moderate_below)


def _place_boxes(cfg: SyntheticSceneConfig, rng) -> list:
    if cfg.fixed_boxes is not None:
        return [replace_difficulty(b, _box_difficulty(cfg, b.center)) for b in cfg.fixed_boxes]
    n = int(rng.integers(cfg.n_boxes[0], cfg.n_boxes[1] + 1))
    origin = np.asarray(cfg.grid.origin)
    extent = np.asarray(cfg.grid.extent)
    boxes = []
    for _ in range(n):
        placed = False
        for _attempt in range(100):
            l = rng.uniform(*cfg.box_length)
            w = rng.uniform(*cfg.box_width)
            h = rng.uniform(*cfg.box_height)
            yaw = rng.uniform(-math.pi, math.pi)
            margin = 0.5 * math.hypot(l, w) + 0.5
            if (extent[:2] - origin[:2] <= 2 * margin).any():
                break
            cx = rng.uniform(origin[0] + margin, extent[0] - margin)
            cy = rng.uniform(origin[1] + margin, extent[1] - margin)
            cz = cfg.ground_top + h / 2.0
            if cz + h / 2.0 >= extent[2]:
                continue
            ok = all(math.hypot(cx - b.center[0], cy - b.center[1]) >= cfg.min_center_distance
                     for b in boxes)
            if ok:
                center = (cx, cy, cz)
                boxes.append(Box3D(center, (l, w, h), yaw,
                                   difficulty=_box_difficulty(cfg, center)))
                placed = True
                break
        if not placed:
            raise ConfigError(
                f"could not place box {len(boxes) + 1} of {n} after bounded retries"
            )
    return boxes


def replace_difficulty(box: Box3D, difficulty):
    return Box3D(box.center, box.size, box.yaw, cls=box.cls,
                 score=box.score, difficulty=difficulty)


def _box_shell_mask(cfg: SyntheticSceneConfig, box: Box3D):
    """Voxels whose centers lie inside the box and within one voxel of a face."""
    grid = cfg.grid
    w, h, d = grid.dims
    ii, jj, kk = np.meshgrid(np.arange(w), np.arange(h), np.arange(d), indexing="ij")
    centers = np.stack([ii, jj, kk], axis=-1).reshape(-1, 3)
    pts = grid.voxel_centers(centers)
    local = pts - np.asarray(box.center)
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    x = c * local[:, 0] + s * local[:, 1]
    y = -s * local[:, 0] + c * local[:, 1]
    z = local[:, 2]
    half = np.asarray(box.size) / 2.0
    inside = (np.abs(x) <= half[0]) & (np.abs(y) <= half[1]) & (np.abs(z) <= half[2])
    vs = np.asarray(grid.voxel_size)
    near_face = ((half[0] - np.abs(x) <= vs[0]) | (half[1] - np.abs(y) <= vs[1])
                 | (half[2] - np.abs(z) <= vs[2]))
    return (inside & near_face).reshape(w, h, d)


def _full_occupancy(cfg: SyntheticSceneConfig, boxes):
    w, h, d = cfg.grid.dims
    occ = np.zeros((w, h, d), dtype=bool)
    occ[:, :, : cfg.ground_layers] = True
    for box in boxes:
        occ |= _box_shell_mask(cfg, box)
    return occ


def _raycast_first_hits(cfg: SyntheticSceneConfig, occ, rng):
    """First occupied voxel per ray, by fine sampling along each direction."""
    grid = cfg.grid
    origin = np.asarray(cfg.sensor_origin)
    az = np.linspace(0.0, 2.0 * math.pi, cfg.azimuth_rays, endpoint=False)
    el = np.deg2rad(np.linspace(cfg.elevation_range[0], cfg.elevation_range[1],
                                cfg.elevation_rays))
    az, el = np.meshgrid(az, el, indexing="ij")
    dirs = np.stack([np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)],
                    axis=-1).reshape(-1, 3)

    extent = np.asarray(grid.extent) - np.asarray(grid.origin)
    max_range = float(np.linalg.norm(extent))
    dt = 0.3 * min(grid.voxel_size)
    ts = np.arange(dt, max_range, dt)

    samples = origin[None, None, :] + dirs[:, None, :] * ts[None, :, None]
    idx = np.floor((samples - np.asarray(grid.origin)) / np.asarray(grid.voxel_size)).astype(np.int64)
    in_range = ((idx >= 0) & (idx < np.asarray(grid.dims))).all(axis=-1)
    clipped = np.clip(idx, 0, np.asarray(grid.dims) - 1)
    hit = in_range & occ[clipped[..., 0], clipped[..., 1], clipped[..., 2]]

    any_hit = hit.any(axis=1)
    first = hit.argmax(axis=1)
    rays = np.flatnonzero(any_hit)
    vox = idx[rays, first[rays]]
    centers = grid.voxel_centers(vox)
    jitter = rng.uniform(-cfg.point_jitter, cfg.point_jitter, size=centers.shape)
    return centers + jitter * np.asarray(grid.voxel_size)


def gen_synthetic_scene(cfg: SyntheticSceneConfig):
    """Generate one scene: (partial PointCloud, full occupancy target, gt boxes).

    The target is the complete scene (ground plane plus box shells); the
    cloud is the single-scan partial view with occlusion. Deterministic for
    a fixed config (including its seed).
    """
    rng = np.random.default_rng(cfg.seed)
    boxes = _place_boxes(cfg, rng)
    for box in boxes:
        corners = box.bev_corners()
        origin, extent = np.asarray(cfg.grid.origin), np.asarray(cfg.grid.extent)
        if (corners < origin[:2]).any() or (corners > extent[:2]).any() \
                or box.z_interval()[1] > extent[2]:
            raise ConfigError("box extends outside the grid region")
    occ = _full_occupancy(cfg, boxes)
    points = _raycast_first_hits(cfg, occ, rng)
    intensity = np.full((points.shape[0], 1), 0.5)
    cloud = PointCloud(np.concatenate([points, intensity], axis=1))
    target = DenseOccupancyGrid(cfg.grid.dims, occ.astype(np.float64))
    return cloud, target, boxes


# ---------------------------------------------------------------------------
# Synthetic dataset persistence (velodyne + packed-voxel layouts)
# ---------------------------------------------------------------------------

def _scene_seed(seed, index):
    return (int(seed) * 0x9E3779B97F4A7C15 + int(index)) % (2 ** 31)


def write_synthetic_dataset(root, cfg: SyntheticSceneConfig, n_scenes, seed):
    """Generate and persist n_scenes scenes under root.

    Layout: velodyne/NNNNNN.bin, voxels/NNNNNN.bin (+ .invalid), and
    labels/NNNNNN.txt in the detection dump record format, plus meta.json.
    """
    root = str(root)
    for sub in ("velodyne", "voxels", "labels"):
        os.makedirs(os.path.join(root, sub), exist_ok=True)
    from .detector import dump_detections  # record format shared with dumps

    for i in range(n_scenes):
        scene_cfg = replace(cfg, seed=_scene_seed(seed, i))
        cloud, target, boxes = gen_synthetic_scene(scene_cfg)
        name = f"{i:06d}"
        write_kitti_velodyne(os.path.join(root, "velodyne", name + ".bin"), cloud)
        write_semantickitti_voxels(
            os.path.join(root, "voxels", name + ".bin"), target,
            invalid_path=os.path.join(root, "voxels", name + ".invalid"))
        with open(os.path.join(root, "labels", name + ".txt"), "w") as f:
            f.write(dump_detections([(name, boxes)]))

    meta = {
        "n_scenes": n_scenes,
        "seed": seed,
        "dims": list(cfg.grid.dims),
        "voxel_size": list(cfg.grid.voxel_size),
        "origin": list(cfg.grid.origin),
        "sensor_origin": list(cfg.sensor_origin),
        "easy_below": cfg.easy_below,
        "moderate_below": cfg.moderate_below,
    }
    with open(os.path.join(root, "meta.json"), "w") as f:
        json.dump(meta, f, indent=2, sort_keys=True)
    return meta


def read_dataset_meta(root):
    meta_path = os.path.join(str(root), "meta.json")
    if not os.path.exists(meta_path):
        raise DatasetError(f"no dataset at {root} (missing meta.json)")
    with open(meta_path) as f:
        return json.load(f)


def load_scene(root, index):
    """Load one persisted scene: (PointCloud, target DenseOccupancyGrid, boxes)."""
    meta = read_dataset_meta(root)
    if not 0 <= index < meta["n_scenes"]:
        raise DatasetError(f"scene index {index} out of range 0..{meta['n_scenes'] - 1}")
    name = f"{index:06d}"
    root = str(root)
    cloud = read_kitti_velodyne(os.path.join(root, "velodyne", name + ".bin"))
    target = read_semantickitti_voxels(
        os.path.join(root, "voxels", name + ".bin"),
        invalid_path=os.path.join(root, "voxels", name + ".invalid"),
        dims=tuple(meta["dims"]))
    from .detector import parse_detections

    with open(os.path.join(root, "labels", name + ".txt")) as f:
        frames = parse_detections(f.read())
    boxes = []
    sensor = np.asarray(meta["sensor_origin"])
    for box in frames.get(name, []):
        dist = float(np.linalg.norm(np.asarray(box.center) - sensor))
        tag = difficulty_from_range(dist, meta["easy_below"], meta["moderate_below"])
        boxes.append(replace_difficulty(box, tag))
    return cloud, target, boxes
