"""Voxel grid data structures and resampling ops shared by completion and detection.

All structures are immutable after construction (arrays are marked read-only),
so grids can be shared freely across threads.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError


def _readonly(arr):
    arr = np.ascontiguousarray(arr)
    arr.setflags(write=False)
    return arr


class PointCloud:
    """Sensor-frame point cloud with per-point intensity.

    Stored as an (N, 4) float array of (x, y, z, intensity). Coordinates must
    be finite; intensity is clamped to [0, 1] at construction.
    """

    def __init__(self, points):
        pts = np.asarray(points, dtype=np.float64)
        if pts.size == 0:
            pts = pts.reshape(0, 4)
        if pts.ndim != 2 or pts.shape[1] != 4:
            raise ValueError(f"expected (N, 4) points, got shape {pts.shape}")
        bad = ~np.isfinite(pts[:, :3]).all(axis=1)
        if bad.any():
            idx = int(np.flatnonzero(bad)[0])
            raise ValueError(f"non-finite coordinates at point index {idx}")
        pts = pts.copy()
        pts[:, 3] = np.clip(np.nan_to_num(pts[:, 3], nan=0.0), 0.0, 1.0)
        self.points = _readonly(pts)

    def __len__(self):
        return self.points.shape[0]

    @property
    def xyz(self):
        return self.points[:, :3]

    @property
    def intensity(self):
        return self.points[:, 3]


@dataclass(frozen=True)
class VoxelGridConfig:
    """Axis-aligned voxelization region: origin, cell size, and grid extent."""

    origin: tuple = (0.0, 0.0, 0.0)
    voxel_size: tuple = (0.5, 0.5, 0.5)
    dims: tuple = (64, 64, 16)
    max_points_per_voxel: int = 35

    def __post_init__(self):
        if len(self.origin) != 3 or len(self.voxel_size) != 3 or len(self.dims) != 3:
            raise ConfigError("origin, voxel_size and dims must each have 3 entries")
        if any(s <= 0 for s in self.voxel_size):
            raise ConfigError(f"voxel_size must be positive, got {self.voxel_size}")
        if any(int(d) < 1 or int(d) != d for d in self.dims):
            raise ConfigError(f"dims must be positive integers, got {self.dims}")
        if self.max_points_per_voxel < 1:
            raise ConfigError("max_points_per_voxel must be >= 1")
        object.__setattr__(self, "origin", tuple(float(v) for v in self.origin))
        object.__setattr__(self, "voxel_size", tuple(float(v) for v in self.voxel_size))
        object.__setattr__(self, "dims", tuple(int(v) for v in self.dims))

    @property
    def extent(self):
        """Upper corner of the voxelized region in meters."""
        return tuple(o + d * s for o, d, s in zip(self.origin, self.dims, self.voxel_size))

    def voxel_centers(self, coords):
        """Metric centers of the given (N, 3) integer voxel coordinates."""
        coords = np.asarray(coords, dtype=np.float64)
        return np.asarray(self.origin) + (coords + 0.5) * np.asarray(self.voxel_size)


@dataclass(frozen=True)
class SparseVoxelGrid:
    """Coordinate-indexed feature map at a power-of-two stride.

    coords is (N, 3) int64 with unique rows inside dims; feats is (N, C).
    """

    dims: tuple
    coords: np.ndarray
    feats: np.ndarray
    stride: int = 1

    def __post_init__(self):
        coords = np.asarray(self.coords, dtype=np.int64).reshape(-1, 3)
        feats = np.asarray(self.feats, dtype=np.float64)
        if feats.ndim != 2 or feats.shape[0] != coords.shape[0]:
            raise ValueError(
                f"feats shape {feats.shape} does not match {coords.shape[0]} coords"
            )
        dims = tuple(int(d) for d in self.dims)
        if len(dims) != 3 or any(d < 1 for d in dims):
            raise ValueError(f"invalid dims {self.dims}")
        if self.stride < 1 or (self.stride & (self.stride - 1)) != 0:
            raise ValueError(f"stride must be a power of two, got {self.stride}")
        if coords.shape[0]:
            if coords.min() < 0 or (coords >= np.asarray(dims)).any():
                raise ValueError("coords out of bounds for dims")
            flat = self.flat_ids()
            if np.unique(flat).size != flat.size:
                raise ValueError("duplicate coords in sparse grid")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "coords", _readonly(coords))
        object.__setattr__(self, "feats", _readonly(feats))

    @property
    def num_voxels(self):
        return self.coords.shape[0]

    @property
    def channels(self):
        return self.feats.shape[1]

    def flat_ids(self):
        """Flat x-major ids: ((i * H) + j) * D + k."""
        _, h, d = self.dims[0], self.dims[1], self.dims[2]
        c = np.asarray(self.coords, dtype=np.int64)
        return (c[:, 0] * h + c[:, 1]) * d + c[:, 2]

    def coord_set(self):
        return {tuple(int(v) for v in row) for row in np.asarray(self.coords)}


@dataclass(frozen=True)
class DenseOccupancyGrid:
    """Dense W*H*D occupancy with a validity mask.

    Targets hold binary occupancy; predictions hold probabilities in [0, 1].
    Voxels with valid_mask == 0 are excluded from every loss and metric.
    """

    dims: tuple
    occupancy: np.ndarray
    valid_mask: np.ndarray = None

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        occ = np.asarray(self.occupancy, dtype=np.float64).reshape(dims)
        mask = self.valid_mask
        if mask is None:
            mask = np.ones(dims, dtype=np.uint8)
        mask = np.asarray(mask).astype(np.uint8).reshape(dims)
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "occupancy", _readonly(occ))
        object.__setattr__(self, "valid_mask", _readonly(mask))

    @property
    def is_binary(self):
        occ = np.asarray(self.occupancy)
        return bool(np.isin(occ, (0.0, 1.0)).all())

    def occupied_count(self, threshold=0.5):
        occ = np.asarray(self.occupancy) >= threshold
        return int((occ & (np.asarray(self.valid_mask) > 0)).sum())


def voxelize(pc: PointCloud, cfg: VoxelGridConfig) -> SparseVoxelGrid:
    """Map a point cloud onto the grid, averaging per-voxel point features.

    Each in-range point lands in voxel floor((p - origin) / voxel_size).
    The per-voxel feature is the mean of (offset from the voxel center,
    intensity) over the first max_points_per_voxel points in input order;
    later points in a full voxel are dropped. Out-of-range points are dropped.
    """
    if not isinstance(pc, PointCloud):
        pc = PointCloud(pc)
    w, h, d = cfg.dims
    pts = np.asarray(pc.points)
    if pts.shape[0] == 0:
        return SparseVoxelGrid(cfg.dims, np.zeros((0, 3), np.int64), np.zeros((0, 4)))

    rel = (pts[:, :3] - np.asarray(cfg.origin)) / np.asarray(cfg.voxel_size)
    idx = np.floor(rel).astype(np.int64)
    in_range = ((idx >= 0) & (idx < np.asarray(cfg.dims))).all(axis=1)
    idx = idx[in_range]
    pts = pts[in_range]
    if idx.shape[0] == 0:
        return SparseVoxelGrid(cfg.dims, np.zeros((0, 3), np.int64), np.zeros((0, 4)))

    flat = (idx[:, 0] * h + idx[:, 1]) * d + idx[:, 2]
    order = np.argsort(flat, kind="stable")  # stable: input order kept inside voxels
    flat_sorted = flat[order]
    uniq, first = np.unique(flat_sorted, return_index=True)
    group = np.searchsorted(uniq, flat_sorted)
    rank_in_group = np.arange(flat_sorted.size) - first[group]
    keep = rank_in_group < cfg.max_points_per_voxel

    kept_rows = order[keep]
    kept_group = group[keep]
    centers = np.asarray(cfg.origin) + (idx[kept_rows] + 0.5) * np.asarray(cfg.voxel_size)
    feats_pts = np.concatenate([pts[kept_rows, :3] - centers, pts[kept_rows, 3:4]], axis=1)

    counts = np.bincount(kept_group, minlength=uniq.size).astype(np.float64)
    sums = np.zeros((uniq.size, 4))
    np.add.at(sums, kept_group, feats_pts)
    feats = sums / counts[:, None]

    coords = np.stack([uniq // (h * d), (uniq // d) % h, uniq % d], axis=1)
    return SparseVoxelGrid(cfg.dims, coords, feats)


def densify(g: SparseVoxelGrid, channel=None) -> DenseOccupancyGrid:
    """Expand a sparse grid to a dense occupancy volume.

    With channel=None, occupied voxels get 1.0; otherwise they get the value
    of the selected feature channel. Unoccupied voxels are 0; the validity
    mask is all-ones.
    """
    if channel is not None and not (0 <= channel < g.channels):
        raise ValueError(f"channel {channel} out of range for {g.channels} channels")
    occ = np.zeros(g.dims, dtype=np.float64)
    if g.num_voxels:
        c = np.asarray(g.coords)
        values = 1.0 if channel is None else np.asarray(g.feats)[:, channel]
        occ[c[:, 0], c[:, 1], c[:, 2]] = values
    return DenseOccupancyGrid(g.dims, occ)


def downsample(g: SparseVoxelGrid, factor: int = 2) -> SparseVoxelGrid:
    """Halve the grid: parents at floor(coord / 2), features max-pooled over children."""
    if factor != 2:
        raise ValueError("only factor 2 downsampling is supported")
    out_dims = tuple(-(-d // 2) for d in g.dims)
    if g.num_voxels == 0:
        return SparseVoxelGrid(out_dims, np.zeros((0, 3), np.int64),
                               np.zeros((0, g.channels)), stride=g.stride * 2)
    parents = np.asarray(g.coords) // 2
    _, oh, od = out_dims
    flat = (parents[:, 0] * oh + parents[:, 1]) * od + parents[:, 2]
    uniq, inverse = np.unique(flat, return_inverse=True)
    feats = np.full((uniq.size, g.channels), -np.inf)
    np.maximum.at(feats, inverse, np.asarray(g.feats))
    coords = np.stack([uniq // (oh * od), (uniq // od) % oh, uniq % od], axis=1)
    return SparseVoxelGrid(out_dims, coords, feats, stride=g.stride * 2)
