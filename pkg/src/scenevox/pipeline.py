"""End-to-end runs: pretraining, transfer + fine-tuning, and evaluation.

All randomness flows from the single run seed through named sub-seeds
(dataset split, fraction sampling, weight init, epoch shuffling), so any
component can be reproduced in isolation.
"""

import hashlib
import json
import math
import os
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np
import torch

from .backbone import BackboneConfig
from .boxes import DIFFICULTIES
from .completion import CompletionConfig, CompletionModel, completion_loss
from .data_io import (SyntheticSceneConfig, load_scene, read_dataset_meta,
                      write_semantickitti_voxels, write_synthetic_dataset)
from .detector import (AnchorConfig, DetectionModel, decode_and_nms, detection_loss,
                       dump_detections, make_anchors, match_anchors)
from .errors import ConfigError, DatasetError, TaskError
from .grids import DenseOccupancyGrid, VoxelGridConfig, voxelize
from .metrics import ap11, voxel_iou
from .reports import format_table
from .transfer import (Checkpoint, LabelFraction, load_checkpoint, model_checkpoint,
                       sample_label_fraction, save_checkpoint, transfer_backbone)


def derive_seed(master, name):
    """Stable named sub-seed from the master seed."""
    digest = hashlib.sha256(f"{master}:{name}".encode()).digest()
    return int.from_bytes(digest[:4], "little")


@dataclass(frozen=True)
class OptimSettings:
    """Optimizer, schedule, and loop sizes for one training stage."""

    lr: float = 1e-3
    batch_size: int = 3
    epochs: int = 30
    schedule: str = "cosine"  # "cosine" | "onecycle" | "constant"
    warmup_frac: float = 0.3
    snapshot_epochs: tuple = ()

    def __post_init__(self):
        if self.schedule not in ("cosine", "onecycle", "constant"):
            raise ConfigError(f"unknown schedule {self.schedule!r}")
        if self.batch_size < 1 or self.epochs < 1:
            raise ConfigError("batch_size and epochs must be >= 1")
        object.__setattr__(self, "snapshot_epochs",
                           tuple(int(e) for e in self.snapshot_epochs))


@dataclass(frozen=True)
class EvalSettings:
    """Evaluation thresholds and split selection."""

    iou_thresh: float = 0.5
    score_thresh: float = 0.3
    nms_iou: float = 0.5
    occupancy_thresh: float = 0.5
    val_fraction: float = 0.2
    split: str = "val"  # "val" | "train" | "all"

    def __post_init__(self):
        if self.split not in ("val", "train", "all"):
            raise ConfigError(f"unknown split {self.split!r}")


@dataclass(frozen=True)
class RunConfig:
    """Full description of a run; the digest of everything but paths and mode
    is embedded in every checkpoint and report."""

    mode: str = ""
    dataset_root: str = ""
    out_dir: str = "runs/out"
    seed: int = 0
    fraction: float = 1.0
    init: str = "random"  # "scp" | "random"
    head_channels: int = 32
    scene: SyntheticSceneConfig = field(default_factory=SyntheticSceneConfig)
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    completion: CompletionConfig = field(default_factory=CompletionConfig)
    anchors: AnchorConfig = field(default_factory=AnchorConfig)
    pretrain: OptimSettings = field(default_factory=lambda: OptimSettings(
        lr=1e-3, batch_size=3, epochs=30, schedule="cosine"))
    finetune: OptimSettings = field(default_factory=lambda: OptimSettings(
        lr=3e-3, batch_size=6, epochs=24, schedule="onecycle"))
    eval: EvalSettings = field(default_factory=EvalSettings)

    def __post_init__(self):
        if self.init not in ("scp", "random"):
            raise ConfigError(f"init must be 'scp' or 'random', got {self.init!r}")
        if not 0.0 < self.fraction <= 1.0:
            raise ConfigError(f"fraction must be in (0, 1], got {self.fraction}")

    @property
    def grid(self) -> VoxelGridConfig:
        return self.scene.grid

    def to_dict(self):
        d = asdict(self)
        d["scene"].pop("fixed_boxes", None)  # programmatic-only, not serialized
        return d

    def digest(self):
        payload = self.to_dict()
        for key in ("mode", "dataset_root", "out_dir", "seed"):
            payload.pop(key)
        return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()

    def model_digest(self, kind):
        """Digest of the parts that define a model's architecture."""
        payload = {"backbone": self.backbone.digest(), "dims": list(self.grid.dims)}
        if kind == "completion":
            payload["completion"] = self.completion.digest()
        else:
            payload["head_channels"] = self.head_channels
            payload["yaws"] = list(self.anchors.yaws)
        return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()


def _build(cls, data):
    if isinstance(data, cls):
        return data
    kwargs = {}
    for f in fields(cls):
        if f.name not in data:
            continue
        val = data[f.name]
        if f.name == "grid":
            val = _build(VoxelGridConfig, val)
        elif isinstance(val, list):
            val = tuple(tuple(v) if isinstance(v, list) else v for v in val)
        kwargs[f.name] = val
    return cls(**kwargs)


def config_from_dict(data) -> RunConfig:
    """Build a RunConfig from a plain dict (parsed JSON)."""
    data = dict(data)
    nested = {"scene": SyntheticSceneConfig, "backbone": BackboneConfig,
              "completion": CompletionConfig, "anchors": AnchorConfig,
              "pretrain": OptimSettings, "finetune": OptimSettings,
              "eval": EvalSettings}
    kwargs = {}
    for f in fields(RunConfig):
        if f.name not in data:
            continue
        val = data[f.name]
        if f.name in nested and isinstance(val, dict):
            val = _build(nested[f.name], val)
        kwargs[f.name] = val
    unknown = set(data) - {f.name for f in fields(RunConfig)}
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    return RunConfig(**kwargs)


def load_config(path) -> RunConfig:
    try:
        with open(path) as f:
            data = json.load(f)
    except FileNotFoundError as e:
        raise ConfigError(f"config file not found: {path}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON ({e})") from e
    return config_from_dict(data)


# ---------------------------------------------------------------------------
# Dataset access
# ---------------------------------------------------------------------------

class SceneDataset:
    """In-memory dataset of voxelized scenes with targets and ground truth."""

    def __init__(self, root, cfg: RunConfig):
        self.root = str(root)
        meta = read_dataset_meta(self.root)
        if tuple(meta["dims"]) != tuple(cfg.grid.dims):
            raise ConfigError(
                f"dataset dims {tuple(meta['dims'])} do not match config {tuple(cfg.grid.dims)}"
            )
        self.meta = meta
        self.scenes = []
        for i in range(meta["n_scenes"]):
            cloud, target, boxes = load_scene(self.root, i)
            grid = voxelize(cloud, cfg.grid)
            self.scenes.append({
                "coords": torch.from_numpy(np.array(grid.coords)),
                "feats": torch.from_numpy(np.array(grid.feats)).float(),
                "target": torch.from_numpy(np.array(target.occupancy)).float(),
                "mask": torch.from_numpy(np.array(target.valid_mask)).float(),
                "target_grid": target,
                "boxes": boxes,
            })
        self.dims = tuple(cfg.grid.dims)
        self._match_cache = {}

    def __len__(self):
        return len(self.scenes)

    def match(self, index, anchors, anchor_cfg):
        if index not in self._match_cache:
            self._match_cache[index] = match_anchors(
                anchors, self.scenes[index]["boxes"], anchor_cfg)
        return self._match_cache[index]


def split_indices(n, val_fraction, seed):
    """Deterministic train/val split; at least one scene on each side."""
    order = np.random.default_rng(seed).permutation(n)
    n_val = min(n - 1, max(1, int(round(n * val_fraction))))
    return np.sort(order[n_val:]).tolist(), np.sort(order[:n_val]).tolist()


def _eval_indices(train_idx, val_idx, split):
    return {"val": val_idx, "train": train_idx, "all": sorted(train_idx + val_idx)}[split]


def _make_scheduler(optimizer, settings: OptimSettings, steps_per_epoch):
    total = max(1, settings.epochs * steps_per_epoch)
    if settings.schedule == "onecycle":
        sched = torch.optim.lr_scheduler.OneCycleLR(
            optimizer, max_lr=settings.lr, total_steps=total,
            pct_start=settings.warmup_frac, anneal_strategy="cos",
            cycle_momentum=False)
        return sched, "step"
    if settings.schedule == "cosine":
        sched = torch.optim.lr_scheduler.CosineAnnealingLR(
            optimizer, T_max=settings.epochs)
        return sched, "epoch"
    return None, "none"


def _epoch_batches(indices, batch_size, rng):
    order = [indices[i] for i in rng.permutation(len(indices))]
    return [order[i:i + batch_size] for i in range(0, len(order), batch_size)]


# ---------------------------------------------------------------------------
# Pretraining (scene completion)
# ---------------------------------------------------------------------------

def _completion_val_iou(model, dataset, indices, thresh):
    ious = []
    with torch.no_grad():
        for i in indices:
            s = dataset.scenes[i]
            probs = model(s["coords"], s["feats"], dataset.dims)
            pred = DenseOccupancyGrid(dataset.dims, probs.double().numpy(),
                                      np.array(s["target_grid"].valid_mask))
            ious.append(voxel_iou(pred, s["target_grid"], thresh))
    return float(np.mean(ious))


def run_pretrain(cfg: RunConfig):
    """Train the completion model; returns checkpoint paths and the IoU history.

    Tracks validation voxel IoU each epoch, keeps the best checkpoint, and
    writes an (epoch, iou) report.
    """
    dataset = SceneDataset(cfg.dataset_root, cfg)
    train_idx, val_idx = split_indices(len(dataset), cfg.eval.val_fraction,
                                       derive_seed(cfg.seed, "split"))
    os.makedirs(cfg.out_dir, exist_ok=True)

    torch.manual_seed(derive_seed(cfg.seed, "completion-init"))
    model = CompletionModel(cfg.backbone, cfg.completion)
    optimizer = torch.optim.Adam(model.parameters(), lr=cfg.pretrain.lr)
    scheduler, sched_kind = _make_scheduler(
        optimizer, cfg.pretrain, math.ceil(len(train_idx) / cfg.pretrain.batch_size))

    base_meta = {
        "config_digest": cfg.digest(),
        "model_digest": cfg.model_digest("completion"),
        "backbone_digest": cfg.backbone.digest(),
        "seed": cfg.seed,
        "kind": "completion",
    }
    shuffle_rng = np.random.default_rng(derive_seed(cfg.seed, "pretrain-shuffle"))
    history, epoch_losses = [], []
    best = {"iou": -1.0, "epoch": 0, "ck": None}
    snapshots = {}
    for epoch in range(1, cfg.pretrain.epochs + 1):
        model.train()
        losses = []
        for batch in _epoch_batches(train_idx, cfg.pretrain.batch_size, shuffle_rng):
            optimizer.zero_grad()
            scenes = [dataset.scenes[i] for i in batch]
            probs = model.forward_batch([(s["coords"], s["feats"]) for s in scenes],
                                        dataset.dims)
            loss = sum(completion_loss(probs[j], s["target"], s["mask"])
                       for j, s in enumerate(scenes)) / len(batch)
            loss.backward()
            losses.append(float(loss.detach()))
            optimizer.step()
            if sched_kind == "step":
                scheduler.step()
        if sched_kind == "epoch":
            scheduler.step()
        epoch_losses.append(float(np.mean(losses)))

        model.eval()
        iou = _completion_val_iou(model, dataset, val_idx, cfg.eval.occupancy_thresh)
        history.append((epoch, iou))
        if iou > best["iou"]:
            best = {"iou": iou, "epoch": epoch,
                    "ck": model_checkpoint(model, {**base_meta, "epoch": epoch,
                                                   "best_iou": iou})}
        if epoch in cfg.pretrain.snapshot_epochs:
            path = os.path.join(cfg.out_dir, f"completion_epoch{epoch:03d}.ckpt")
            save_checkpoint(model_checkpoint(model, {**base_meta, "epoch": epoch,
                                                     "best_iou": iou}), path)
            snapshots[epoch] = path

    ck_path = os.path.join(cfg.out_dir, "completion_best.ckpt")
    save_checkpoint(best["ck"], ck_path)
    report_path = os.path.join(cfg.out_dir, "pretrain_report.tsv")
    table = format_table(("epoch", "iou"), history, cfg.digest(), cfg.seed)
    with open(report_path, "w") as f:
        f.write(table)
    return {"checkpoint": ck_path, "snapshots": snapshots, "report": report_path,
            "history": history, "epoch_losses": epoch_losses,
            "best_iou": best["iou"], "best_epoch": best["epoch"]}


# ---------------------------------------------------------------------------
# Fine-tuning (3D detection)
# ---------------------------------------------------------------------------

def _detect_frames(model, dataset, indices, cfg: RunConfig):
    """Run detection on the given scenes; returns (detections, gts) per frame."""
    dets, gts = [], []
    model.eval()
    with torch.no_grad():
        anchors = make_anchors(cfg.grid, cfg.anchors)
        for i in indices:
            s = dataset.scenes[i]
            preds = model(s["coords"], s["feats"], dataset.dims)
            dets.append(decode_and_nms(preds, anchors, cfg.eval.score_thresh,
                                       cfg.eval.nms_iou))
            gts.append(s["boxes"])
    return dets, gts


def _ap_rows(dets, gts, cfg: RunConfig, method):
    rows = []
    for difficulty in DIFFICULTIES:
        try:
            ap = ap11(dets, gts, cfg.eval.iou_thresh, difficulty)
        except ValueError:
            ap = None  # bucket empty on this split
        rows.append((method, f"{cfg.fraction:.2f}", difficulty, ap))
    return rows


def run_finetune(cfg: RunConfig, checkpoint_path=None):
    """Fine-tune the detector on a labeled fraction; returns AP11 report rows.

    With a checkpoint the backbone starts from the completion weights
    (method label "scp"); otherwise from random init (label "random").
    """
    init = "scp" if checkpoint_path else "random"
    cfg = replace(cfg, init=init)
    dataset = SceneDataset(cfg.dataset_root, cfg)
    train_idx, val_idx = split_indices(len(dataset), cfg.eval.val_fraction,
                                       derive_seed(cfg.seed, "det-split"))
    lf = LabelFraction(cfg.fraction, derive_seed(cfg.seed, "fraction"))
    picks = sample_label_fraction(len(train_idx), lf)
    labeled_idx = [train_idx[i] for i in picks]
    os.makedirs(cfg.out_dir, exist_ok=True)

    torch.manual_seed(derive_seed(cfg.seed, "detector-init"))
    model = DetectionModel(cfg.backbone, cfg.grid.dims, cfg.head_channels, cfg.anchors)
    pretrain_iou = None
    if checkpoint_path is not None:
        ck = load_checkpoint(checkpoint_path)
        if ck.meta.get("kind") != "completion":
            raise TaskError(
                f"fine-tuning expects a completion checkpoint, got {ck.meta.get('kind')!r}"
            )
        transfer_backbone(ck, model)
        pretrain_iou = ck.meta.get("best_iou")

    anchors = make_anchors(cfg.grid, cfg.anchors)
    optimizer = torch.optim.Adam(model.parameters(), lr=cfg.finetune.lr)
    scheduler, sched_kind = _make_scheduler(
        optimizer, cfg.finetune, math.ceil(len(labeled_idx) / cfg.finetune.batch_size))
    shuffle_rng = np.random.default_rng(derive_seed(cfg.seed, "finetune-shuffle"))
    epoch_losses = []
    for _epoch in range(cfg.finetune.epochs):
        model.train()
        losses = []
        for batch in _epoch_batches(labeled_idx, cfg.finetune.batch_size, shuffle_rng):
            optimizer.zero_grad()
            scenes = [dataset.scenes[i] for i in batch]
            cls_b, box_b, dir_b = model.forward_batch(
                [(s["coords"], s["feats"]) for s in scenes], dataset.dims)
            loss = sum(
                detection_loss((cls_b[j], box_b[j], dir_b[j]), anchors,
                               s["boxes"], cfg.anchors,
                               match=dataset.match(i, anchors, cfg.anchors))
                for j, (i, s) in enumerate(zip(batch, scenes))) / len(batch)
            loss.backward()
            losses.append(float(loss.detach()))
            optimizer.step()
            if sched_kind == "step":
                scheduler.step()
        if sched_kind == "epoch":
            scheduler.step()
        epoch_losses.append(float(np.mean(losses)))

    dets, gts = _detect_frames(model, dataset, val_idx, cfg)
    rows = _ap_rows(dets, gts, cfg, cfg.init)

    meta = {
        "config_digest": cfg.digest(),
        "model_digest": cfg.model_digest("detector"),
        "backbone_digest": cfg.backbone.digest(),
        "seed": cfg.seed,
        "kind": "detector",
        "init": cfg.init,
        "fraction": cfg.fraction,
        "epoch": cfg.finetune.epochs,
        "best_iou": pretrain_iou,
    }
    ck_path = os.path.join(cfg.out_dir, f"detector_{cfg.init}.ckpt")
    save_checkpoint(model_checkpoint(model, meta), ck_path)
    report_path = os.path.join(cfg.out_dir, f"finetune_report_{cfg.init}.tsv")
    with open(report_path, "w") as f:
        f.write(format_table(("method", "fraction", "difficulty", "ap11"),
                             rows, cfg.digest(), cfg.seed))
    return {"checkpoint": ck_path, "report": report_path, "rows": rows,
            "n_train_frames": len(labeled_idx), "init": cfg.init,
            "epoch_losses": epoch_losses}


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------

def run_eval(cfg: RunConfig, checkpoint_path, task):
    """Evaluate a checkpoint; writes a report and per-scene prediction dumps."""
    if task not in ("completion", "detection"):
        raise ConfigError(f"unknown eval task {task!r}")
    ck = load_checkpoint(checkpoint_path)
    kind = ck.meta.get("kind")
    expected = "completion" if task == "completion" else "detector"
    if kind != expected:
        raise TaskError(f"task {task!r} needs a {expected} checkpoint, got {kind!r}")
    want = cfg.model_digest(expected)
    if ck.meta.get("model_digest") != want:
        raise TaskError(
            "checkpoint model digest does not match the configured architecture")

    dataset = SceneDataset(cfg.dataset_root, cfg)
    split_name = "det-split" if task == "detection" else "split"
    train_idx, val_idx = split_indices(len(dataset), cfg.eval.val_fraction,
                                       derive_seed(cfg.seed, split_name))
    indices = _eval_indices(train_idx, val_idx, cfg.eval.split)
    os.makedirs(cfg.out_dir, exist_ok=True)
    dumps_dir = os.path.join(cfg.out_dir, "dumps")
    os.makedirs(dumps_dir, exist_ok=True)

    from .transfer import apply_checkpoint

    if task == "completion":
        torch.manual_seed(0)
        model = CompletionModel(cfg.backbone, cfg.completion)
        apply_checkpoint(ck, model)
        model.eval()
        rows, ious = [], []
        with torch.no_grad():
            for i in indices:
                s = dataset.scenes[i]
                probs = model(s["coords"], s["feats"], dataset.dims)
                pred = DenseOccupancyGrid(dataset.dims, probs.double().numpy(),
                                          np.array(s["target_grid"].valid_mask))
                iou = voxel_iou(pred, s["target_grid"], cfg.eval.occupancy_thresh)
                ious.append(iou)
                rows.append((f"{i:06d}", iou))
                binary = DenseOccupancyGrid(
                    dataset.dims,
                    (np.asarray(pred.occupancy) >= cfg.eval.occupancy_thresh).astype(float))
                write_semantickitti_voxels(
                    os.path.join(dumps_dir, f"{i:06d}.bin"), binary)
        rows.append(("mean", float(np.mean(ious))))
        report_path = os.path.join(cfg.out_dir, "eval_completion.tsv")
        with open(report_path, "w") as f:
            f.write(format_table(("scene", "iou"), rows, cfg.digest(), cfg.seed))
        return {"report": report_path, "dumps": dumps_dir,
                "mean_iou": float(np.mean(ious)), "per_scene": rows[:-1]}

    torch.manual_seed(0)
    model = DetectionModel(cfg.backbone, cfg.grid.dims, cfg.head_channels, cfg.anchors)
    apply_checkpoint(ck, model)
    dets, gts = _detect_frames(model, dataset, indices, cfg)
    method = ck.meta.get("init", "random")
    rows = _ap_rows(dets, gts, cfg, method)
    dump_path = os.path.join(dumps_dir, "detections.txt")
    with open(dump_path, "w") as f:
        f.write(dump_detections([(f"{i:06d}", d) for i, d in zip(indices, dets)]))
    report_path = os.path.join(cfg.out_dir, "eval_detection.tsv")
    with open(report_path, "w") as f:
        f.write(format_table(("method", "fraction", "difficulty", "ap11"),
                             rows, cfg.digest(), cfg.seed))
    return {"report": report_path, "dumps": dump_path, "rows": rows}


# ---------------------------------------------------------------------------
# The label-fraction experiment grid
# ---------------------------------------------------------------------------

REPORT_FRACTIONS = (0.1, 0.2, 0.3, 0.4)


def run_report_grid(cfg: RunConfig, checkpoint_path):
    """Fine-tune over fractions {0.1, 0.2, 0.3, 0.4} x {scp, random} and emit
    one combined report. The scp arm of each fraction uses the given
    completion checkpoint; pairing is by the shared run seed."""
    all_rows = []
    for fraction in REPORT_FRACTIONS:
        for init_ck in (checkpoint_path, None):
            sub = replace(cfg, fraction=fraction,
                          out_dir=os.path.join(cfg.out_dir,
                                               f"grid_f{int(fraction * 100):03d}_"
                                               f"{'scp' if init_ck else 'random'}"))
            result = run_finetune(sub, init_ck)
            all_rows.extend(result["rows"])
    os.makedirs(cfg.out_dir, exist_ok=True)
    report_path = os.path.join(cfg.out_dir, "report_grid.tsv")
    with open(report_path, "w") as f:
        f.write(format_table(("method", "fraction", "difficulty", "ap11"),
                             all_rows, cfg.digest(), cfg.seed))
    return {"report": report_path, "rows": all_rows}


def run_synth_gen(cfg: RunConfig, n_scenes):
    """Generate a synthetic dataset at cfg.dataset_root."""
    if n_scenes < 1:
        raise ConfigError("need at least one scene")
    meta = write_synthetic_dataset(cfg.dataset_root, cfg.scene, n_scenes, cfg.seed)
    return {"root": cfg.dataset_root, "meta": meta}
