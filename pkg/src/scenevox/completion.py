"""Scene-completion decoder: anisotropic convolution plus three upsampling stages.

The decoder densifies the stride-8 backbone output and restores full
resolution with three learned 2x upsamples interleaved with three 3D
convolutions, ending in a per-voxel occupancy probability.
"""

import hashlib
import json
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .backbone import BackboneConfig, VoxelBackbone
from .errors import ConfigError
from .grids import DenseOccupancyGrid, SparseVoxelGrid


@dataclass(frozen=True)
class CompletionConfig:
    """Decoder layout; three x2 stages restore the encoder's x8 downsampling."""

    decoder_widths: tuple = (32, 16, 8)
    kernel_sizes: tuple = (1, 3, 5)
    aic_first: bool = True

    def __post_init__(self):
        if len(self.decoder_widths) != 3:
            raise ConfigError("decoder needs exactly 3 stage widths")
        if len(self.kernel_sizes) != 3 or any(k % 2 == 0 for k in self.kernel_sizes):
            raise ConfigError("kernel_sizes must be 3 odd sizes")
        object.__setattr__(self, "decoder_widths", tuple(int(w) for w in self.decoder_widths))
        object.__setattr__(self, "kernel_sizes", tuple(int(k) for k in self.kernel_sizes))

    def digest(self):
        payload = {"decoder_widths": self.decoder_widths,
                   "kernel_sizes": self.kernel_sizes, "aic_first": self.aic_first}
        return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()


class AnisotropicConv3d(nn.Module):
    """Per-axis 1D convolutions mixed by a learned positive row-stochastic matrix.

    For each axis in x, y, z order the output is the convex combination of
    candidate 1D convolutions with distinct kernel sizes; the mixture weights
    are a row-softmax of a 3x3 logit matrix, so each axis row sums to one.
    Bias and nonlinearity apply once, after the z-axis stage.
    """

    def __init__(self, channels, kernel_sizes=(1, 3, 5)):
        super().__init__()
        self.channels = channels
        self.kernel_sizes = tuple(int(k) for k in kernel_sizes)
        convs = []
        for axis in range(3):
            shapes = [[1, 1, 1] for _ in self.kernel_sizes]
            for i, k in enumerate(self.kernel_sizes):
                shapes[i][axis] = k
            convs.append(nn.ModuleList([
                nn.Conv3d(channels, channels, tuple(shape),
                          padding=tuple(s // 2 for s in shape), bias=False)
                for shape in shapes
            ]))
        self.axis_convs = nn.ModuleList(convs)
        self.mix_logits = nn.Parameter(torch.zeros(3, 3))
        self.bias = nn.Parameter(torch.zeros(channels))
        self.act = nn.GELU()

    def kernel_mixture(self):
        """(3, 3) positive mixture weights; each axis row sums to one."""
        return torch.softmax(self.mix_logits, dim=1)

    def forward(self, x):
        if x.shape[1] != self.channels:
            raise ValueError(f"expected {self.channels} channels, got {x.shape[1]}")
        mix = self.kernel_mixture()
        for axis in range(3):
            x = sum(mix[axis, i] * conv(x) for i, conv in enumerate(self.axis_convs[axis]))
        x = x + self.bias.view(1, -1, 1, 1, 1)
        return self.act(x)


class CompletionDecoder(nn.Module):
    """Dense decoder from the stride-8 bottleneck to full-resolution occupancy logits."""

    def __init__(self, in_channels, config: CompletionConfig = None):
        super().__init__()
        self.config = config or CompletionConfig()
        self.in_channels = in_channels
        widths = self.config.decoder_widths
        aic_channels = in_channels if self.config.aic_first else widths[-1]
        self.aic = AnisotropicConv3d(aic_channels, self.config.kernel_sizes)
        ups, convs = [], []
        prev = in_channels
        for i, width in enumerate(widths):
            ups.append(nn.ConvTranspose3d(prev, width, kernel_size=2, stride=2))
            out_c = 1 if i == len(widths) - 1 else width
            convs.append(nn.Conv3d(width, out_c, kernel_size=3, padding=1))
            prev = width
        self.ups = nn.ModuleList(ups)
        self.convs = nn.ModuleList(convs)
        self.act = nn.GELU()

    def forward(self, x):
        """(1, C, W/8, H/8, D/8) features -> (1, 1, W, H, D) occupancy logits."""
        if self.config.aic_first:
            x = self.aic(x)
        last = len(self.convs) - 1
        for i, (up, conv) in enumerate(zip(self.ups, self.convs)):
            x = self.act(up(x))
            if i == last and not self.config.aic_first:
                x = self.aic(x)
            x = conv(x)
            if i < last:
                x = self.act(x)
        return x


class CompletionModel(nn.Module):
    """Backbone encoder plus dense completion decoder."""

    def __init__(self, backbone_config: BackboneConfig = None,
                 completion_config: CompletionConfig = None):
        super().__init__()
        self.backbone = VoxelBackbone(backbone_config or BackboneConfig())
        self.decoder = CompletionDecoder(self.backbone.out_channels, completion_config)

    def forward(self, coords, feats, dims):
        """Sparse stride-1 input -> dense (W, H, D) occupancy probabilities."""
        return self.forward_batch([(coords, feats)], dims)[0]

    def forward_batch(self, scenes, dims):
        """Encode and decode a batch of scenes sharing `dims` as one sparse set.

        scenes is a list of (coords, feats) at stride 1; returns (B, W, H, D)
        occupancy probabilities.
        """
        if any(d % 8 for d in dims):
            raise ConfigError(f"grid dims {tuple(dims)} must be divisible by 8")
        coords, feats = batch_scenes(scenes)
        coords, feats, bdims = self.backbone(coords, feats, dims)
        dense = densify_features(coords, feats, bdims, len(scenes))
        logits = self.decoder(dense)
        return torch.sigmoid(logits)[:, 0]


def batch_scenes(scenes):
    """Concatenate per-scene (coords, feats) with a leading scene index column."""
    coords_list, feats_list = [], []
    for b, (coords, feats) in enumerate(scenes):
        col = torch.full((coords.shape[0], 1), b, dtype=coords.dtype,
                         device=coords.device)
        coords_list.append(torch.cat([col, coords], dim=1)
                           if coords.shape[1] == 3 else coords)
        feats_list.append(feats)
    return torch.cat(coords_list, dim=0), torch.cat(feats_list, dim=0)


def densify_features(coords, feats, dims, n_batch=1):
    """Scatter (N, C) sparse features into a dense (B, C, W, H, D) volume."""
    w, h, d = dims
    c = feats.shape[1]
    dense = torch.zeros(n_batch, c, w * h * d, dtype=feats.dtype, device=feats.device)
    if coords.shape[0]:
        if coords.shape[1] == 3:
            b = torch.zeros(coords.shape[0], dtype=coords.dtype, device=coords.device)
        else:
            b, coords = coords[:, 0], coords[:, 1:]
        flat = (coords[:, 0] * h + coords[:, 1]) * d + coords[:, 2]
        dense[b, :, flat] = feats
    return dense.view(n_batch, c, w, h, d)


def completion_forward(bottleneck: SparseVoxelGrid, decoder: CompletionDecoder) -> DenseOccupancyGrid:
    """Decode a stride-8 grid to occupancy probabilities at the original dims."""
    if bottleneck.stride != 8:
        raise ValueError(f"bottleneck must be at stride 8, got stride {bottleneck.stride}")
    if bottleneck.channels != decoder.in_channels:
        raise ValueError(
            f"bottleneck has {bottleneck.channels} channels, decoder expects {decoder.in_channels}"
        )
    dtype = next(decoder.parameters()).dtype
    coords = torch.from_numpy(np.array(bottleneck.coords))
    feats = torch.from_numpy(np.array(bottleneck.feats)).to(dtype)
    with torch.no_grad():
        dense = densify_features(coords, feats, bottleneck.dims)
        probs = torch.sigmoid(decoder(dense))[0, 0]
    dims = tuple(8 * v for v in bottleneck.dims)
    return DenseOccupancyGrid(dims, probs.double().numpy())


def completion_loss(pred, target, valid_mask=None):
    """Class-balanced binary cross-entropy over valid voxels.

    Positive and negative voxels are reweighted inversely to their counts so
    each class contributes half the loss; a class absent from the target gets
    weight zero. Probabilities are clamped to [1e-6, 1 - 1e-6].
    """
    as_torch = isinstance(pred, torch.Tensor)
    p = pred if as_torch else torch.from_numpy(np.asarray(pred, dtype=np.float64))
    if isinstance(target, DenseOccupancyGrid):
        if valid_mask is None:
            valid_mask = np.asarray(target.valid_mask)
        target = np.asarray(target.occupancy)
    t = target if isinstance(target, torch.Tensor) else \
        torch.from_numpy(np.asarray(target, dtype=np.float64))
    t = t.to(p.dtype)
    if p.shape != t.shape:
        raise ValueError(f"shape mismatch: pred {tuple(p.shape)} vs target {tuple(t.shape)}")
    if not bool(((t == 0) | (t == 1)).all()):
        raise ValueError("completion target must be binary")
    if valid_mask is None:
        mask = torch.ones_like(t)
    else:
        mask = valid_mask if isinstance(valid_mask, torch.Tensor) else \
            torch.from_numpy(np.asarray(valid_mask))
        mask = (mask > 0).to(p.dtype)
    n_valid = mask.sum()
    if n_valid.item() == 0:
        raise ValueError("no valid voxels to compute the loss over")

    n_pos = (t * mask).sum()
    n_neg = n_valid - n_pos
    w_pos = torch.where(n_pos > 0, 0.5 * n_valid / n_pos.clamp(min=1), torch.zeros_like(n_pos))
    w_neg = torch.where(n_neg > 0, 0.5 * n_valid / n_neg.clamp(min=1), torch.zeros_like(n_neg))
    pc = p.clamp(1e-6, 1.0 - 1e-6)
    per_voxel = -(w_pos * t * torch.log(pc) + w_neg * (1.0 - t) * torch.log(1.0 - pc))
    loss = (per_voxel * mask).sum() / n_valid
    return loss if as_torch else float(loss.item())
