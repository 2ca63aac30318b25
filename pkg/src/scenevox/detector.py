"""Single-stage 3D detector: shared backbone, BEV projection, 2D head, NMS.

The stride-8 voxel features are stacked vertically into BEV channels, run
through a small 2D conv stack with one upsampled skip, and decoded by
anchor-based 1x1 heads (class logits, box deltas, direction logits).
"""

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .backbone import BackboneConfig, VoxelBackbone
from .boxes import Box3D, box_from_array, wrap_angle
from .errors import ConfigError, FormatError
from .grids import SparseVoxelGrid, VoxelGridConfig
from .metrics import box_iou_bev

BEV_STRIDE = 8


@dataclass(frozen=True)
class AnchorConfig:
    """Anchor geometry and BEV-IoU matching thresholds.

    One anchor per BEV cell and yaw. Anchor size is a fixed car-class prior
    (not derived from any dataset statistics shipped here); matching uses
    rotated BEV IoU with an ignore band between neg_iou and pos_iou. Each
    ground-truth box is additionally force-matched to its best-overlapping
    anchor when that IoU reaches force_match_iou, so coarse anchor grids
    still produce positives.
    """

    size: tuple = (3.9, 1.6, 1.56)
    yaws: tuple = (0.0, math.pi / 2.0)
    z_center: float = 1.3
    pos_iou: float = 0.6
    neg_iou: float = 0.45
    force_match_iou: float = 0.05
    smooth_l1_beta: float = 1.0 / 9.0
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0
    loss_weights: tuple = (1.0, 2.0, 0.2)

    def __post_init__(self):
        if not self.pos_iou > self.neg_iou:
            raise ConfigError("pos_iou must exceed neg_iou")
        if any(s <= 0 for s in self.size):
            raise ConfigError("anchor size must be positive")


def make_anchors(grid_cfg: VoxelGridConfig, cfg: AnchorConfig) -> np.ndarray:
    """(A, 7) anchors (x, y, z, l, w, h, yaw) tiled over the stride-8 BEV grid.

    Ordering is x-major, then y, then yaw, matching the head's output layout.
    """
    wb, hb = grid_cfg.dims[0] // BEV_STRIDE, grid_cfg.dims[1] // BEV_STRIDE
    cell = (grid_cfg.voxel_size[0] * BEV_STRIDE, grid_cfg.voxel_size[1] * BEV_STRIDE)
    xs = grid_cfg.origin[0] + (np.arange(wb) + 0.5) * cell[0]
    ys = grid_cfg.origin[1] + (np.arange(hb) + 0.5) * cell[1]
    anchors = np.zeros((wb, hb, len(cfg.yaws), 7))
    anchors[..., 0] = xs[:, None, None]
    anchors[..., 1] = ys[None, :, None]
    anchors[..., 2] = cfg.z_center
    anchors[..., 3:6] = np.asarray(cfg.size)
    anchors[..., 6] = np.asarray(cfg.yaws)[None, None, :]
    return anchors.reshape(-1, 7)


# ---------------------------------------------------------------------------
# Box delta coding
# ---------------------------------------------------------------------------

def encode_boxes(boxes, anchors):
    """Encode boxes against anchors as (deltas (M, 7), direction bins (M,)).

    Offsets are normalized by the anchor BEV diagonal (x, y) and height (z),
    sizes are log ratios, and yaw is the residual folded into (-pi/2, pi/2]
    with a binary direction bin carrying the remaining half-turn.
    """
    b = np.atleast_2d(np.asarray(boxes, dtype=np.float64))
    a = np.atleast_2d(np.asarray(anchors, dtype=np.float64))
    diag = np.sqrt(a[:, 3] ** 2 + a[:, 4] ** 2)
    deltas = np.empty_like(b)
    deltas[:, 0] = (b[:, 0] - a[:, 0]) / diag
    deltas[:, 1] = (b[:, 1] - a[:, 1]) / diag
    deltas[:, 2] = (b[:, 2] - a[:, 2]) / a[:, 5]
    deltas[:, 3:6] = np.log(b[:, 3:6] / a[:, 3:6])
    res = wrap_angle(b[:, 6] - a[:, 6])
    bins = ((res <= -math.pi / 2.0) | (res > math.pi / 2.0)).astype(np.int64)
    deltas[:, 6] = wrap_angle(res - bins * math.pi)
    return deltas, bins


def decode_boxes(deltas, bins, anchors):
    """Invert encode_boxes: decode(encode(b, a), a) == b to within 1e-6."""
    d = np.atleast_2d(np.asarray(deltas, dtype=np.float64))
    a = np.atleast_2d(np.asarray(anchors, dtype=np.float64))
    bins = np.atleast_1d(np.asarray(bins))
    diag = np.sqrt(a[:, 3] ** 2 + a[:, 4] ** 2)
    out = np.empty_like(d)
    out[:, 0] = d[:, 0] * diag + a[:, 0]
    out[:, 1] = d[:, 1] * diag + a[:, 1]
    out[:, 2] = d[:, 2] * a[:, 5] + a[:, 2]
    out[:, 3:6] = np.exp(d[:, 3:6]) * a[:, 3:6]
    out[:, 6] = wrap_angle(d[:, 6] + a[:, 6] + bins * math.pi)
    return out


# ---------------------------------------------------------------------------
# BEV projection and 2D head
# ---------------------------------------------------------------------------

def bev_project_features(coords, feats, dims, n_batch=1):
    """Stack the vertical axis into channels: (B, C * D, W, H) dense BEV map.

    A voxel at (i, j, k) lands in BEV cell (i, j), channel band [k*C, (k+1)*C).
    """
    w, h, d = dims
    c = feats.shape[1]
    dense = torch.zeros(n_batch, d * c, w * h, dtype=feats.dtype, device=feats.device)
    if coords.shape[0]:
        if coords.shape[1] == 3:
            b = torch.zeros(coords.shape[0], dtype=coords.dtype, device=coords.device)
        else:
            b, coords = coords[:, 0], coords[:, 1:]
        flat = coords[:, 0] * h + coords[:, 1]
        chan = coords[:, 2][:, None] * c + torch.arange(c, device=feats.device)[None, :]
        dense[b[:, None].expand(-1, c).reshape(-1), chan.reshape(-1),
              flat[:, None].expand(-1, c).reshape(-1)] = feats.reshape(-1)
    return dense.view(n_batch, d * c, w, h)


def bev_project(g: SparseVoxelGrid) -> np.ndarray:
    """Numpy contract wrapper over bev_project_features for stride-8 grids."""
    if g.stride != BEV_STRIDE:
        raise ValueError(f"BEV projection expects a stride-8 grid, got {g.stride}")
    coords = torch.from_numpy(np.array(g.coords))
    feats = torch.from_numpy(np.array(g.feats))
    return bev_project_features(coords, feats, g.dims)[0].numpy()


class DetectionHead(nn.Module):
    """Small strided 2D conv stack with one upsampled skip and 1x1 heads."""

    def __init__(self, in_channels, channels=32, n_yaws=2, n_classes=1):
        super().__init__()
        self.n_yaws = n_yaws
        self.n_classes = n_classes
        self.stem = nn.Sequential(
            nn.Conv2d(in_channels, channels, 3, padding=1), nn.GELU(),
            nn.Conv2d(channels, channels, 3, padding=1), nn.GELU(),
        )
        self.down = nn.Sequential(
            nn.Conv2d(channels, 2 * channels, 3, stride=2, padding=1), nn.GELU(),
            nn.Conv2d(2 * channels, 2 * channels, 3, padding=1), nn.GELU(),
        )
        self.up = nn.ConvTranspose2d(2 * channels, channels, 2, stride=2)
        self.fuse = nn.Sequential(
            nn.Conv2d(2 * channels, channels, 3, padding=1), nn.GELU(),
        )
        self.cls_head = nn.Conv2d(channels, n_yaws * n_classes, 1)
        self.box_head = nn.Conv2d(channels, n_yaws * 7, 1)
        self.dir_head = nn.Conv2d(channels, n_yaws * 2, 1)

    def forward(self, bev):
        """BEV map (B, C, W, H) -> per-anchor (cls logits, deltas, dir logits).

        Outputs are (B, A, ch) with anchors ordered x-major, then y, then yaw;
        a bare (C, W, H) input yields unbatched (A, ch) outputs.
        """
        squeeze = bev.dim() == 3
        if squeeze:
            bev = bev[None]
        if bev.shape[-1] % 2 or bev.shape[-2] % 2:
            raise ValueError(f"BEV dims {tuple(bev.shape[-2:])} must be even")
        x = self.stem(bev)
        y = self.down(x)
        x = self.fuse(torch.cat([x, F.gelu(self.up(y))], dim=1))

        def flatten(t, ch):
            n, _, w, h = t.shape
            out = t.view(n, self.n_yaws, ch, w, h).permute(0, 3, 4, 1, 2) \
                .reshape(n, -1, ch)
            return out[0] if squeeze else out

        return (flatten(self.cls_head(x), self.n_classes),
                flatten(self.box_head(x), 7),
                flatten(self.dir_head(x), 2))


def detect_forward(bev, head: DetectionHead):
    """Run the detection head on a dense BEV map (numpy or torch).

    A (C, W, H) map yields per-anchor (A, ch) arrays; a batched (B, C, W, H)
    map yields (B, A, ch)."""
    t = bev if isinstance(bev, torch.Tensor) else \
        torch.from_numpy(np.asarray(bev)).to(next(head.parameters()).dtype)
    with torch.no_grad():
        cls_logits, deltas, dir_logits = head(t)
    return cls_logits.numpy(), deltas.numpy(), dir_logits.numpy()


class DetectionModel(nn.Module):
    """Backbone encoder plus BEV detection head."""

    def __init__(self, backbone_config: BackboneConfig = None, grid_dims=(64, 64, 16),
                 head_channels=32, anchor_config: AnchorConfig = None):
        super().__init__()
        self.backbone = VoxelBackbone(backbone_config or BackboneConfig())
        self.anchor_config = anchor_config or AnchorConfig()
        d8 = grid_dims[2] // BEV_STRIDE
        if any(v % (2 * BEV_STRIDE) for v in grid_dims[:2]) or d8 < 1:
            raise ConfigError(f"grid dims {tuple(grid_dims)} unsupported by the BEV head")
        self.head = DetectionHead(self.backbone.out_channels * d8, head_channels,
                                  n_yaws=len(self.anchor_config.yaws))

    def forward(self, coords, feats, dims):
        cls_logits, deltas, dir_logits = self.forward_batch([(coords, feats)], dims)
        return cls_logits[0], deltas[0], dir_logits[0]

    def forward_batch(self, scenes, dims):
        """Batch of (coords, feats) scenes -> (B, A, ch) prediction triples."""
        from .completion import batch_scenes

        coords, feats = batch_scenes(scenes)
        coords, feats, bdims = self.backbone(coords, feats, dims)
        bev = bev_project_features(coords, feats, bdims, len(scenes))
        return self.head(bev)


# ---------------------------------------------------------------------------
# Anchor matching and loss
# ---------------------------------------------------------------------------

def match_anchors(anchors, gts, cfg: AnchorConfig):
    """Label anchors against ground truth by rotated BEV IoU.

    Returns (labels, gt_idx): labels are 1 positive, 0 negative, -1 ignored;
    gt_idx holds the matched ground-truth index for positives. Anchors in the
    ignore band keep label -1; the best anchor of each ground-truth box is
    promoted to positive when its IoU reaches force_match_iou.
    """
    n = anchors.shape[0]
    labels = np.zeros(n, dtype=np.int64)
    gt_idx = np.full(n, -1, dtype=np.int64)
    if not gts:
        return labels, gt_idx
    anchor_boxes = [box_from_array(a) for a in anchors]
    iou = np.zeros((n, len(gts)))
    for gi, gt in enumerate(gts):
        for ai, ab in enumerate(anchor_boxes):
            iou[ai, gi] = box_iou_bev(ab, gt)
    best_gt = iou.argmax(axis=1)
    best_iou = iou[np.arange(n), best_gt]
    labels[best_iou >= cfg.neg_iou] = -1
    pos = best_iou >= cfg.pos_iou
    labels[pos] = 1
    gt_idx[pos] = best_gt[pos]
    for gi in range(len(gts)):
        ai = int(iou[:, gi].argmax())
        if iou[ai, gi] >= cfg.force_match_iou:
            labels[ai] = 1
            gt_idx[ai] = gi
    return labels, gt_idx


def detection_loss(preds, anchors, gts, cfg: AnchorConfig = None, match=None,
                   return_parts=False):
    """Focal classification + smooth-L1 box regression + direction cross-entropy.

    The three terms are normalized by max(1, number of positive anchors) and
    combined with cfg.loss_weights. With no ground truth the loss reduces to
    the classification term over all-negative anchors.
    """
    cfg = cfg or AnchorConfig()
    cls_logits, deltas, dir_logits = preds
    if cls_logits.shape[0] != anchors.shape[0]:
        raise ValueError(
            f"{cls_logits.shape[0]} predictions for {anchors.shape[0]} anchors"
        )
    labels, gt_idx = match_anchors(anchors, gts, cfg) if match is None else match
    labels_t = torch.from_numpy(labels)
    dtype = cls_logits.dtype

    p = torch.sigmoid(cls_logits[:, 0])
    eps = 1e-12
    target = (labels_t == 1).to(dtype)
    focal_pos = -cfg.focal_alpha * (1.0 - p) ** cfg.focal_gamma * torch.log(p.clamp(min=eps))
    focal_neg = -(1.0 - cfg.focal_alpha) * p ** cfg.focal_gamma \
        * torch.log((1.0 - p).clamp(min=eps))
    per_anchor = target * focal_pos + (1.0 - target) * focal_neg
    considered = (labels_t >= 0).to(dtype)
    n_pos = max(1, int((labels == 1).sum()))
    cls_loss = (per_anchor * considered).sum() / n_pos

    pos_rows = np.flatnonzero(labels == 1)
    if pos_rows.size:
        gt_arr = np.stack([gts[g].as_array() for g in gt_idx[pos_rows]])
        tgt_deltas, tgt_bins = encode_boxes(gt_arr, anchors[pos_rows])
        pos_t = torch.from_numpy(pos_rows)
        box_loss = F.smooth_l1_loss(
            deltas[pos_t], torch.from_numpy(tgt_deltas).to(dtype),
            beta=cfg.smooth_l1_beta, reduction="sum") / n_pos
        dir_loss = F.cross_entropy(
            dir_logits[pos_t], torch.from_numpy(tgt_bins),
            reduction="sum") / n_pos
    else:
        box_loss = deltas.sum() * 0.0
        dir_loss = dir_logits.sum() * 0.0

    w_cls, w_box, w_dir = cfg.loss_weights
    total = w_cls * cls_loss + w_box * box_loss + w_dir * dir_loss
    if return_parts:
        return total, {"cls": cls_loss, "box": box_loss, "dir": dir_loss}
    return total


# ---------------------------------------------------------------------------
# Decoding and NMS
# ---------------------------------------------------------------------------

def nms_bev(boxes, scores, nms_iou):
    """Greedy rotated-BEV NMS; returns kept indices in descending score order."""
    order = sorted(range(len(boxes)), key=lambda i: (-scores[i], i))
    kept = []
    for i in order:
        if all(box_iou_bev(boxes[i], boxes[j]) < nms_iou for j in kept):
            kept.append(i)
    return kept


def decode_and_nms(preds, anchors, score_thresh=0.3, nms_iou=0.5):
    """Decode per-anchor predictions into boxes and apply greedy NMS.

    Boxes scoring below score_thresh are dropped; survivors are returned as
    Box3D sorted by descending score.
    """
    if not 0.0 <= score_thresh < 1.0:
        raise ValueError(f"score_thresh must be in [0, 1), got {score_thresh}")
    if not 0.0 < nms_iou < 1.0:
        raise ValueError(f"nms_iou must be in (0, 1), got {nms_iou}")
    cls_logits, deltas, dir_logits = (np.asarray(t.detach() if isinstance(t, torch.Tensor) else t)
                                      for t in preds)
    scores = 1.0 / (1.0 + np.exp(-cls_logits[:, 0]))
    keep = np.flatnonzero(scores >= score_thresh)
    if keep.size == 0:
        return []
    bins = dir_logits[keep].argmax(axis=1)
    decoded = decode_boxes(deltas[keep], bins, anchors[keep])
    boxes = [box_from_array(row, score=float(s))
             for row, s in zip(decoded, scores[keep])]
    kept = nms_bev(boxes, [b.score for b in boxes], nms_iou)
    return [boxes[i] for i in kept]


# ---------------------------------------------------------------------------
# Detection dump format
# ---------------------------------------------------------------------------

def dump_detections(frames):
    """Serialize [(frame_id, boxes)] as text: a frame-id header line, then one
    `class cx cy cz l w h yaw score` line per box."""
    lines = []
    for frame_id, boxes in frames:
        lines.append(str(frame_id))
        for b in boxes:
            vals = (*b.center, *b.size, b.yaw, b.score)
            lines.append(str(b.cls) + " " + " ".join(f"{v:.9g}" for v in vals))
    return "\n".join(lines) + ("\n" if lines else "")


def parse_detections(text):
    """Parse dump_detections output into {frame_id: [Box3D, ...]}."""
    frames = {}
    current = None
    for lineno, line in enumerate(text.splitlines(), start=1):
        parts = line.split()
        if not parts:
            continue
        if len(parts) == 1:
            current = parts[0]
            frames[current] = []
        elif len(parts) == 9:
            if current is None:
                raise FormatError(f"line {lineno}: box record before any frame header")
            try:
                cls = int(parts[0])
                vals = [float(v) for v in parts[1:]]
            except ValueError as e:
                raise FormatError(f"line {lineno}: {e}") from e
            frames[current].append(Box3D(tuple(vals[0:3]), tuple(vals[3:6]), vals[6],
                                         cls=cls, score=min(max(vals[7], 0.0), 1.0)))
        else:
            raise FormatError(f"line {lineno}: expected frame id or 9-field box record")
    return frames
