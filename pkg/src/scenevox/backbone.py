"""Transformer 3D backbone over sparse voxel grids.

Three blocks, each one expanding ("sparse") attention module followed by two
submanifold attention modules, with a 2x max-pool downsample after each block.
Attention is multi-head over a local Chebyshev window with learned relative
position embeddings; submanifold modules preserve the occupancy pattern,
expanding modules also produce features at empty voxels near occupied ones.

Coordinates are (N, 3) integer voxel indices, or (N, 4) with a leading scene
index so a whole training batch runs through the encoder as one sparse set
(windows never cross scenes).
"""

import hashlib
import json
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .errors import ConfigError
from .grids import SparseVoxelGrid


def _digest(obj):
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()


@dataclass(frozen=True)
class BackboneConfig:
    """Architecture of the shared 3D backbone (exactly three blocks)."""

    in_channels: int = 4
    widths: tuple = (16, 32, 64)
    heads: tuple = (2, 4, 4)
    window_radius: tuple = (2, 2, 2)
    expansion_radius: int = 1
    ffn_ratio: int = 2

    def __post_init__(self):
        if len(self.widths) != 3 or len(self.heads) != 3:
            raise ConfigError("backbone must have exactly 3 blocks")
        radii = self.window_radius
        if all(np.ndim(r) == 0 for r in radii):
            radii = tuple((int(r),) * 3 for r in radii)
        radii = tuple(tuple(int(v) for v in r) for r in radii)
        if len(radii) != 3 or any(len(r) != 3 for r in radii):
            raise ConfigError("window_radius needs one entry per module (3 blocks x 3)")
        if any(v < 1 for r in radii for v in r):
            raise ConfigError("window radii must be >= 1")
        if any(c % h for c, h in zip(self.widths, self.heads)):
            raise ConfigError("widths must be divisible by heads")
        if self.expansion_radius < 1 or any(self.expansion_radius > r[0] for r in radii):
            raise ConfigError(
                "expansion_radius must be in [1, window radius of the expanding module]"
            )
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        object.__setattr__(self, "heads", tuple(int(h) for h in self.heads))
        object.__setattr__(self, "window_radius", radii)

    def digest(self):
        return _digest({
            "in_channels": self.in_channels, "widths": self.widths,
            "heads": self.heads, "window_radius": self.window_radius,
            "expansion_radius": self.expansion_radius, "ffn_ratio": self.ffn_ratio,
        })


def with_batch_column(coords):
    """Ensure coords are (N, 4) = (scene, i, j, k); bare (N, 3) become scene 0."""
    if coords.shape[1] == 4:
        return coords
    pad = torch.zeros(coords.shape[0], 1, dtype=coords.dtype, device=coords.device)
    return torch.cat([pad, coords], dim=1)


def chebyshev_offsets(radius, device=None):
    """All integer offsets with Chebyshev norm <= radius, x-major order."""
    r = torch.arange(-radius, radius + 1, device=device)
    return torch.cartesian_prod(r, r, r)


def _flat_ids(coords, dims):
    w, h, d = dims
    return ((coords[:, 0] * w + coords[:, 1]) * h + coords[:, 2]) * d + coords[:, 3]


def _unflatten(flat, dims, n_batch):
    w, h, d = dims
    k = flat % d
    rest = flat // d
    j = rest % h
    rest = rest // h
    i = rest % w
    return torch.stack([rest // w, i, j, k], dim=1)


def neighbor_table(query_coords, key_coords, dims, radius):
    """(Nq, K) indices into key_coords per window slot, -1 where empty/out of range.

    Both coord sets are (N, 4); windows are confined to each query's scene.
    """
    w, h, d = dims
    device = query_coords.device
    n_batch = 1
    if query_coords.shape[0] or key_coords.shape[0]:
        n_batch = int(max(
            query_coords[:, 0].max().item() if query_coords.shape[0] else 0,
            key_coords[:, 0].max().item() if key_coords.shape[0] else 0)) + 1
    vol = torch.full((n_batch * w * h * d,), -1, dtype=torch.long, device=device)
    if key_coords.shape[0]:
        vol[_flat_ids(key_coords, dims)] = torch.arange(key_coords.shape[0], device=device)
    offs = chebyshev_offsets(radius, device=device)
    offs4 = torch.cat([torch.zeros(offs.shape[0], 1, dtype=offs.dtype, device=device),
                       offs], dim=1)
    cand = query_coords[:, None, :] + offs4[None, :, :]
    bounds = torch.tensor([w, h, d], device=device)
    valid = ((cand[..., 1:] >= 0) & (cand[..., 1:] < bounds)).all(dim=-1)
    cflat = _flat_ids(cand.reshape(-1, 4), dims).reshape(cand.shape[:2])
    cflat = cflat.clamp(0, n_batch * w * h * d - 1)
    return torch.where(valid, vol[cflat], torch.full_like(cflat, -1))


def expand_coords(coords, dims, radius):
    """Empty voxels within Chebyshev radius of any occupied voxel, sorted by flat id."""
    w, h, d = dims
    device = coords.device
    if coords.shape[0] == 0:
        return torch.zeros((0, 4), dtype=torch.long, device=device)
    n_batch = int(coords[:, 0].max().item()) + 1
    offs = chebyshev_offsets(radius, device=device)
    offs4 = torch.cat([torch.zeros(offs.shape[0], 1, dtype=offs.dtype, device=device),
                       offs], dim=1)
    cand = (coords[:, None, :] + offs4[None, :, :]).reshape(-1, 4)
    bounds = torch.tensor([w, h, d], device=device)
    cand = cand[((cand[:, 1:] >= 0) & (cand[:, 1:] < bounds)).all(dim=-1)]
    flat = torch.unique(_flat_ids(cand, dims))
    occupied = torch.zeros(n_batch * w * h * d, dtype=torch.bool, device=device)
    occupied[_flat_ids(coords, dims)] = True
    flat = flat[~occupied[flat]]
    return _unflatten(flat, dims, n_batch)


class WindowAttention(nn.Module):
    """Pre-norm multi-head attention over a local voxel window, plus FFN.

    With expand=True the module also emits features at empty voxels within
    expansion_radius of the occupied set; those voxels query the window from
    a learned content-free seed embedding. Keys and values always come from
    the occupied input voxels.
    """

    def __init__(self, channels, heads, window_radius, expand=False,
                 expansion_radius=1, ffn_ratio=2):
        super().__init__()
        if channels % heads:
            raise ConfigError(f"channels {channels} not divisible by heads {heads}")
        if expand and expansion_radius > window_radius:
            raise ConfigError("expansion_radius must not exceed window_radius")
        self.channels = channels
        self.heads = heads
        self.window_radius = int(window_radius)
        self.expand = expand
        self.expansion_radius = int(expansion_radius)
        k = (2 * self.window_radius + 1) ** 3
        self.q_proj = nn.Linear(channels, channels)
        self.k_proj = nn.Linear(channels, channels)
        self.v_proj = nn.Linear(channels, channels)
        self.out_proj = nn.Linear(channels, channels)
        self.pos_embed = nn.Parameter(torch.randn(k, channels) * 0.02)
        if expand:
            self.seed_embed = nn.Parameter(torch.randn(channels) * 0.02)
        self.norm_attn = nn.LayerNorm(channels)
        self.norm_ffn = nn.LayerNorm(channels)
        self.ffn = nn.Sequential(
            nn.Linear(channels, ffn_ratio * channels),
            nn.GELU(),
            nn.Linear(ffn_ratio * channels, channels),
        )

    def _attend(self, x_query, x_key, nbr):
        n_q, k = nbr.shape
        h, dh = self.heads, self.channels // self.heads
        nq = self.norm_attn(x_query)
        nk = nq if x_key is x_query else self.norm_attn(x_key)
        q = self.q_proj(nq).view(n_q, h, dh).unsqueeze(2)
        safe = nbr.clamp(min=0)
        kg = (self.k_proj(nk)[safe] + self.pos_embed[None, :, :]) \
            .view(n_q, k, h, dh).transpose(1, 2)
        vg = self.v_proj(nk)[safe].view(n_q, k, h, dh).transpose(1, 2)
        mask = (nbr >= 0)[:, None, None, :]
        msg = torch.nn.functional.scaled_dot_product_attention(q, kg, vg, attn_mask=mask)
        out = x_query + self.out_proj(msg.reshape(n_q, self.channels))
        return out + self.ffn(self.norm_ffn(out))

    def forward(self, coords, feats, dims, nbr=None):
        if feats.shape[1] != self.channels:
            raise ValueError(
                f"grid has {feats.shape[1]} channels, attention expects {self.channels}"
            )
        coords = with_batch_column(coords)
        if self.expand:
            new_coords = expand_coords(coords, dims, self.expansion_radius)
            all_coords = torch.cat([coords, new_coords], dim=0)
            if all_coords.shape[0] == 0:
                return all_coords, feats
            seeds = self.seed_embed[None, :].expand(new_coords.shape[0], -1)
            x_all = torch.cat([feats, seeds], dim=0)
            if nbr is None:
                nbr = neighbor_table(all_coords, coords, dims, self.window_radius)
            return all_coords, self._attend(x_all, feats, nbr)
        if coords.shape[0] == 0:
            return coords, feats
        if nbr is None:
            nbr = neighbor_table(coords, coords, dims, self.window_radius)
        return coords, self._attend(feats, feats, nbr)


def downsample_max(coords, feats, dims):
    """Torch twin of grids.downsample: parents at coord // 2, max-pooled features."""
    out_dims = tuple(-(-v // 2) for v in dims)
    coords = with_batch_column(coords)
    if coords.shape[0] == 0:
        return coords, feats, out_dims
    parents = torch.cat([coords[:, :1], coords[:, 1:] // 2], dim=1)
    n_batch = int(coords[:, 0].max().item()) + 1
    flat = _flat_ids(parents, out_dims)
    uniq, inverse = torch.unique(flat, return_inverse=True)
    pooled = torch.full((uniq.shape[0], feats.shape[1]), float("-inf"),
                        dtype=feats.dtype, device=feats.device)
    pooled = pooled.scatter_reduce(0, inverse[:, None].expand(-1, feats.shape[1]),
                                   feats, reduce="amax", include_self=False)
    return _unflatten(uniq, out_dims, n_batch), pooled, out_dims


class VoxelTransformerBlock(nn.Module):
    """Input projection, one expanding module, then two submanifold modules."""

    def __init__(self, in_channels, channels, heads, radii, expansion_radius, ffn_ratio):
        super().__init__()
        self.in_proj = nn.Linear(in_channels, channels)
        self.expanding = WindowAttention(channels, heads, radii[0], expand=True,
                                         expansion_radius=expansion_radius,
                                         ffn_ratio=ffn_ratio)
        self.local1 = WindowAttention(channels, heads, radii[1], ffn_ratio=ffn_ratio)
        self.local2 = WindowAttention(channels, heads, radii[2], ffn_ratio=ffn_ratio)

    def forward(self, coords, feats, dims):
        feats = self.in_proj(feats)
        coords, feats = self.expanding(coords, feats, dims)
        if coords.shape[0] == 0:
            return coords, feats
        # the two submanifold modules share one window table when radii match
        nbr = neighbor_table(coords, coords, dims, self.local1.window_radius)
        coords, feats = self.local1(coords, feats, dims, nbr=nbr)
        if self.local2.window_radius != self.local1.window_radius:
            nbr = neighbor_table(coords, coords, dims, self.local2.window_radius)
        coords, feats = self.local2(coords, feats, dims, nbr=nbr)
        return coords, feats


class VoxelBackbone(nn.Module):
    """Three attention blocks with a 2x downsample after each; stride 1 -> 8."""

    def __init__(self, config: BackboneConfig):
        super().__init__()
        self.config = config
        blocks = []
        prev = config.in_channels
        for width, heads, radii in zip(config.widths, config.heads, config.window_radius):
            blocks.append(VoxelTransformerBlock(prev, width, heads, radii,
                                                config.expansion_radius, config.ffn_ratio))
            prev = width
        self.blocks = nn.ModuleList(blocks)

    @property
    def out_channels(self):
        return self.config.widths[-1]

    def forward(self, coords, feats, dims):
        coords = with_batch_column(coords)
        for block in self.blocks:
            coords, feats = block(coords, feats, dims)
            coords, feats, dims = downsample_max(coords, feats, dims)
        return coords, feats, dims


# ---------------------------------------------------------------------------
# SparseVoxelGrid wrappers (inference-style contracts)
# ---------------------------------------------------------------------------

def _to_tensors(g: SparseVoxelGrid, dtype):
    coords = torch.from_numpy(np.array(g.coords))
    feats = torch.from_numpy(np.array(g.feats)).to(dtype)
    return coords, feats


def _module_dtype(module):
    return next(module.parameters()).dtype


def submanifold_attention(g: SparseVoxelGrid, module: WindowAttention) -> SparseVoxelGrid:
    """Apply a submanifold attention module; output coords equal input coords."""
    if module.expand:
        raise ValueError("module is an expanding module; use sparse_attention")
    coords, feats = _to_tensors(g, _module_dtype(module))
    with torch.no_grad():
        coords, feats = module(coords, feats, g.dims)
    return SparseVoxelGrid(g.dims, coords[:, 1:].numpy(), feats.double().numpy(),
                           stride=g.stride)


def sparse_attention(g: SparseVoxelGrid, module: WindowAttention) -> SparseVoxelGrid:
    """Apply an expanding attention module; empty neighbors join the coord set."""
    if not module.expand:
        raise ValueError("module is submanifold; use submanifold_attention")
    coords, feats = _to_tensors(g, _module_dtype(module))
    with torch.no_grad():
        coords, feats = module(coords, feats, g.dims)
    return SparseVoxelGrid(g.dims, coords[:, 1:].numpy(), feats.double().numpy(),
                           stride=g.stride)


def backbone_forward(g: SparseVoxelGrid, backbone: VoxelBackbone) -> SparseVoxelGrid:
    """Run the full backbone on a stride-1 grid, returning the stride-8 grid."""
    if g.stride != 1:
        raise ValueError(f"backbone input must be at stride 1, got {g.stride}")
    if g.channels != backbone.config.in_channels:
        raise ValueError(
            f"grid has {g.channels} channels, backbone expects {backbone.config.in_channels}"
        )
    coords, feats = _to_tensors(g, _module_dtype(backbone))
    with torch.no_grad():
        coords, feats, dims = backbone(coords, feats, g.dims)
    return SparseVoxelGrid(dims, coords[:, 1:].numpy(), feats.double().numpy(), stride=8)
