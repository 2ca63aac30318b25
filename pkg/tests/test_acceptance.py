"""Acceptance suite: one test per criterion, each printing a PASS line.

Heavy training fixtures are session-scoped and shared between criteria; the
desk-scale runs use small grids and deterministic seeds throughout.
"""

import math
import time
from dataclasses import replace

import numpy as np
import pytest
import torch

from scenevox.backbone import BackboneConfig, VoxelBackbone, WindowAttention, \
    backbone_forward, submanifold_attention
from scenevox.boxes import Box3D, difficulty_rank
from scenevox.completion import AnisotropicConv3d, CompletionConfig, CompletionModel, \
    completion_loss
from scenevox.data_io import SyntheticSceneConfig, pack_voxel_bits, \
    read_kitti_velodyne, read_semantickitti_voxels, unpack_voxel_bits, \
    write_kitti_velodyne
from scenevox.detector import AnchorConfig, DetectionModel, decode_and_nms, \
    detection_loss, encode_boxes, make_anchors
from scenevox.grids import PointCloud, SparseVoxelGrid, VoxelGridConfig, voxelize
from scenevox.metrics import ConfusionCounts, ap11, box_iou_3d, voxel_iou
from scenevox.pipeline import EvalSettings, OptimSettings, RunConfig, run_finetune, \
    run_pretrain, run_synth_gen
from scenevox.reports import parse_table
from scenevox.transfer import load_checkpoint, model_checkpoint, save_checkpoint, \
    transfer_backbone
from scenevox import cli

from oracles import (aic_reference, aic_weights_numpy, attention_weights_numpy,
                     balanced_bce_reference, detection_loss_reference,
                     finite_difference_check, greedy_nms_reference,
                     voxel_iou_reference, window_attention_reference)
from oracles import ap11_cutoff_reference, _decode_reference
from test_backbone import randomize_parameters

DESK_BACKBONE = BackboneConfig(window_radius=(1, 1, 1))
DESK_COMPLETION = CompletionConfig(decoder_widths=(24, 12, 6))


def report_pass(criterion, detail):
    print(f"\nACCEPTANCE C{criterion} PASS: {detail}", flush=True)


# ---------------------------------------------------------------------------
# Shared training fixtures (criteria 8 and 9)
# ---------------------------------------------------------------------------

def pretrain_config(root, out):
    grid = VoxelGridConfig(dims=(64, 64, 16), voxel_size=(0.5, 0.5, 0.5))
    scene = SyntheticSceneConfig(grid=grid, n_boxes=(3, 8),
                                 azimuth_rays=64, elevation_rays=16)
    return RunConfig(
        dataset_root=str(root), out_dir=str(out), seed=7,
        scene=scene, backbone=DESK_BACKBONE, completion=DESK_COMPLETION,
        pretrain=OptimSettings(lr=4e-4, batch_size=3, epochs=30, schedule="cosine",
                               snapshot_epochs=(2, 10, 20, 30)),
        eval=EvalSettings(val_fraction=0.12),
    )


def detection_config(root, out, seed=0):
    grid = VoxelGridConfig(dims=(48, 48, 16), voxel_size=(0.5, 0.5, 0.5))
    scene = SyntheticSceneConfig(grid=grid, n_boxes=(2, 5),
                                 sensor_origin=(0.8, 12.0, 2.2),
                                 azimuth_rays=80, elevation_rays=20,
                                 easy_below=12.0, moderate_below=18.0)
    return RunConfig(
        dataset_root=str(root), out_dir=str(out), seed=seed, fraction=0.2,
        scene=scene, backbone=DESK_BACKBONE, completion=DESK_COMPLETION,
        anchors=AnchorConfig(z_center=1.25),
        finetune=OptimSettings(lr=3e-3, batch_size=6, epochs=30, schedule="onecycle"),
        eval=EvalSettings(val_fraction=1 / 3, iou_thresh=0.5, score_thresh=0.3),
    )


@pytest.fixture(scope="session")
def pretrain_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("pre_data")
    out = tmp_path_factory.mktemp("pre_out")
    cfg = pretrain_config(root, out)
    run_synth_gen(cfg, 200)
    t0 = time.monotonic()
    result = run_pretrain(cfg)
    result["train_seconds"] = time.monotonic() - t0
    result["config"] = cfg
    return result


@pytest.fixture(scope="session")
def detection_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("det_data")
    cfg = detection_config(root, root / "unused")
    run_synth_gen(cfg, 90)
    return root


# ---------------------------------------------------------------------------
# C1: metric oracle equivalence on 1,000 randomized instances each, < 60 s
# ---------------------------------------------------------------------------

def test_c01_metric_oracle_equivalence(rng):
    t0 = time.monotonic()

    for _ in range(1000):  # voxel IoU vs per-voxel counting oracle
        pred = rng.uniform(size=(6, 6, 6))
        target = (rng.uniform(size=(6, 6, 6)) > 0.5).astype(float)
        mask = (rng.uniform(size=(6, 6, 6)) > 0.2).astype(float)
        got = voxel_iou(pred * mask, target * mask)
        want = voxel_iou_reference(pred * mask, target * mask, np.ones((6, 6, 6)))
        assert abs(got - want) <= 1e-9

    for case in range(1000):  # AP11 vs score-cutoff enumeration oracle
        gts, dets = [], []
        for _ in range(int(rng.integers(1, 3))):
            frame_gts = [Box3D((float(i * 6), float(rng.uniform(-2, 2)), 0.0),
                               (2.5, 2.5, 2.0), float(rng.uniform(-3, 3)),
                               difficulty=str(rng.choice(["easy", "moderate", "hard"])))
                         for i in range(int(rng.integers(1, 4)))]
            frame_dets = []
            for g in frame_gts:
                if rng.uniform() < 0.75:
                    dx, dy = rng.uniform(-1.2, 1.2, size=2)
                    frame_dets.append(Box3D((g.center[0] + dx, g.center[1] + dy, 0.0),
                                            g.size, g.yaw,
                                            score=float(rng.uniform(0.05, 1.0))))
            if rng.uniform() < 0.5:
                frame_dets.append(Box3D((float(rng.uniform(30, 50)), 0.0, 0.0),
                                        (2.5, 2.5, 2.0), 0.0,
                                        score=float(rng.uniform(0.05, 1.0))))
            gts.append(frame_gts)
            dets.append(frame_dets)
        difficulty = "hard"  # every box counted: bucket never empty
        got = ap11(dets, gts, 0.4, difficulty)
        want = ap11_cutoff_reference(dets, gts, 0.4, difficulty, box_iou_3d,
                                     difficulty_rank)
        assert abs(got - want) <= 1e-9

    grid = VoxelGridConfig(dims=(32, 32, 8), voxel_size=(0.5, 0.5, 0.5))
    anchors = make_anchors(grid, AnchorConfig())
    n_anchors = len(anchors)
    for _ in range(1000):  # decode_and_nms vs independent decode + greedy oracle
        cls_logits = rng.normal(size=(n_anchors, 1)) * 2.0
        deltas = rng.normal(size=(n_anchors, 7)) * 0.2
        dir_logits = rng.normal(size=(n_anchors, 2))
        got = decode_and_nms((cls_logits, deltas, dir_logits), anchors,
                             score_thresh=0.6, nms_iou=0.4)
        scores = 1.0 / (1.0 + np.exp(-cls_logits[:, 0]))
        keep = np.flatnonzero(scores >= 0.6)
        boxes = [_decode_reference(deltas[i], int(dir_logits[i].argmax()), anchors[i],
                                   float(scores[i])) for i in keep]
        kept = greedy_nms_reference(boxes, [b.score for b in boxes], 0.4,
                                    __import__("scenevox.metrics",
                                               fromlist=["box_iou_bev"]).box_iou_bev)
        want = [boxes[i] for i in kept]
        assert len(got) == len(want)
        for a, b in zip(got, want):
            assert abs(a.score - b.score) <= 1e-12
            np.testing.assert_allclose(a.as_array(), b.as_array(), atol=1e-9)

    elapsed = time.monotonic() - t0
    assert elapsed < 60.0, f"oracle sweep took {elapsed:.1f}s"
    report_pass(1, f"ap11/voxel_iou/decode_and_nms match oracles on 1000 "
                   f"instances each in {elapsed:.1f}s")


# ---------------------------------------------------------------------------
# C2: literal formula checks
# ---------------------------------------------------------------------------

def test_c02_literal_formula_checks(rng):
    assert ConfusionCounts(5, 3, 2).iou() == 0.5
    gts, dets = [], []
    for _ in range(5):
        frame = [Box3D((float(i * 8), float(rng.uniform(-3, 3)), 0.0),
                       (3.0, 2.0, 1.6), float(rng.uniform(-3, 3)))
                 for i in range(int(rng.integers(1, 4)))]
        gts.append(frame)
        dets.append([b.with_score(float(rng.uniform(0.4, 1.0))) for b in frame])
    assert ap11(dets, gts, 0.7, "easy") == pytest.approx(100.0, abs=1e-12)
    report_pass(2, "IoU(5,3,2) = 0.5 and perfect detector AP11 = 100.0")


# ---------------------------------------------------------------------------
# C3: attention equivalence and sparsity preservation
# ---------------------------------------------------------------------------

def test_c03_attention_equivalence(rng):
    for seed, dims in ((0, (4, 4, 4)), (1, (3, 4, 2)), (2, (2, 2, 2))):
        torch.manual_seed(seed)
        m = WindowAttention(8, 2, window_radius=4).double()
        coords = np.array([[i, j, k] for i in range(dims[0]) for j in range(dims[1])
                           for k in range(dims[2])])
        feats = rng.normal(size=(len(coords), 8))
        out = submanifold_attention(SparseVoxelGrid(dims, coords, feats), m)
        want = window_attention_reference(coords, feats, coords, feats,
                                          attention_weights_numpy(m))
        assert np.abs(np.asarray(out.feats) - want).max() < 1e-5

    torch.manual_seed(3)
    m = WindowAttention(8, 2, 2).double()
    for case in range(500):
        dims = (int(rng.integers(2, 7)),) * 3
        total = dims[0] * dims[1] * dims[2]
        n = int(rng.integers(1, total + 1))
        flat = rng.choice(total, size=n, replace=False)
        coords = np.stack([flat // (dims[1] * dims[2]),
                           (flat // dims[2]) % dims[1], flat % dims[2]], axis=1)
        g = SparseVoxelGrid(dims, coords, rng.normal(size=(n, 8)))
        out = submanifold_attention(g, m)
        assert out.coord_set() == g.coord_set()
    report_pass(3, "dense full-attention oracle < 1e-5 on covering windows; "
                   "sparsity preserved on 500 random grids")


# ---------------------------------------------------------------------------
# C4: anisotropic convolution correctness
# ---------------------------------------------------------------------------

def test_c04_aic_correctness(rng):
    torch.manual_seed(0)
    layer = AnisotropicConv3d(4).double()
    with torch.no_grad():
        layer.mix_logits.zero_()
        layer.mix_logits[0, 1] = 60.0   # x axis: size-3 kernel
        layer.mix_logits[1, 0] = 60.0   # y axis: size-1
        layer.mix_logits[2, 0] = 60.0   # z axis: size-1
        for axis in (1, 2):
            layer.axis_convs[axis][0].weight.copy_(
                torch.eye(4, dtype=torch.float64).reshape(4, 4, 1, 1, 1))
        layer.bias.zero_()
    x = torch.from_numpy(rng.normal(size=(1, 4, 6, 6, 6)))
    got = layer(x)
    plain = torch.nn.functional.conv3d(x, layer.axis_convs[0][1].weight,
                                       padding=(1, 0, 0))
    assert (got - torch.nn.functional.gelu(plain)).abs().max().item() < 1e-5

    torch.manual_seed(1)
    layer2 = AnisotropicConv3d(4).double()
    opt = torch.optim.Adam(layer2.parameters(), lr=0.03)
    x2 = torch.from_numpy(rng.normal(size=(1, 4, 5, 5, 5)))
    for _ in range(12):
        opt.zero_grad()
        (layer2(x2) ** 2).mean().backward()
        opt.step()
        mix = layer2.kernel_mixture().detach().numpy()
        assert (mix > 0).all()
        assert np.abs(mix.sum(axis=1) - 1.0).max() < 1e-6

    for _ in range(5):
        torch.manual_seed(int(rng.integers(0, 1000)))
        layer3 = AnisotropicConv3d(3).double()
        with torch.no_grad():
            layer3.mix_logits.copy_(torch.from_numpy(rng.normal(size=(3, 3))))
            layer3.bias.copy_(torch.from_numpy(rng.normal(size=3) * 0.2))
        vol = rng.normal(size=(1, 3, 6, 6, 6))
        got = layer3(torch.from_numpy(vol)).detach().numpy()[0]
        want = aic_reference(vol[0], aic_weights_numpy(layer3))
        assert np.abs(got - want).max() < 1e-5
    report_pass(4, "one-hot reduction, row-stochastic mixture through training, "
                   "weighted-sum oracle on 6^3 volumes")


# ---------------------------------------------------------------------------
# C5: gradient checks for every trainable operation, < 5 min
# ---------------------------------------------------------------------------

def test_c05_gradient_checks(rng):
    t0 = time.monotonic()

    def sparse_grid(n, dims=(3, 3, 3), channels=8):
        total = dims[0] * dims[1] * dims[2]
        flat = rng.choice(total, size=n, replace=False)
        coords = np.stack([flat // (dims[1] * dims[2]),
                           (flat // dims[2]) % dims[1], flat % dims[2]], axis=1)
        return (torch.from_numpy(coords), torch.from_numpy(
            rng.normal(size=(n, channels))))

    # submanifold attention
    m = randomize_parameters(WindowAttention(8, 2, 1).double(), 11)
    coords, feats = sparse_grid(8)
    probe = torch.from_numpy(rng.normal(size=(8, 8)))
    finite_difference_check(
        lambda: (m(coords, feats, (3, 3, 3))[1] * probe).sum(),
        list(m.parameters()))

    # expanding attention
    me = randomize_parameters(WindowAttention(8, 2, 1, expand=True).double(), 12)
    coords_e, feats_e = sparse_grid(4)
    with torch.no_grad():
        n_out = me(coords_e, feats_e, (3, 3, 3))[1].shape[0]
    probe_e = torch.from_numpy(rng.normal(size=(n_out, 8)))
    finite_difference_check(
        lambda: (me(coords_e, feats_e, (3, 3, 3))[1] * probe_e).sum(),
        list(me.parameters()))

    # anisotropic convolution layer
    torch.manual_seed(13)
    aic = AnisotropicConv3d(2).double()
    with torch.no_grad():
        for p in aic.parameters():
            p.copy_(torch.randn_like(p) * 0.3)
    x = torch.from_numpy(rng.normal(size=(1, 2, 3, 3, 3)))
    probe_a = torch.from_numpy(rng.normal(size=(1, 2, 3, 3, 3)))
    finite_difference_check(lambda: (aic(x) * probe_a).sum(), list(aic.parameters()))

    # upsampling stage (transposed conv + conv)
    torch.manual_seed(14)
    up = torch.nn.ConvTranspose3d(2, 2, 2, stride=2).double()
    conv = torch.nn.Conv3d(2, 1, 3, padding=1).double()
    xin = torch.from_numpy(rng.normal(size=(1, 2, 2, 2, 2)))
    probe_u = torch.from_numpy(rng.normal(size=(1, 1, 4, 4, 4)))
    finite_difference_check(
        lambda: (conv(torch.nn.functional.gelu(up(xin))) * probe_u).sum(),
        list(up.parameters()) + list(conv.parameters()))

    # completion loss through the sigmoid
    target = torch.from_numpy((rng.uniform(size=(3, 3, 3)) > 0.5).astype(float))
    logits = torch.from_numpy(rng.normal(size=(3, 3, 3))).requires_grad_(True)
    finite_difference_check(lambda: completion_loss(torch.sigmoid(logits), target),
                            [logits])

    # detection loss wrt its prediction inputs
    grid = VoxelGridConfig(dims=(32, 32, 8), voxel_size=(0.5, 0.5, 0.5))
    acfg = AnchorConfig()
    anchors = make_anchors(grid, acfg)[:16]
    gts = [Box3D((3, 3, 1.3), (3.9, 1.6, 1.56), 0.3)]
    labels = np.zeros(16, np.int64)
    labels[2] = 1
    gt_idx = np.full(16, -1, np.int64)
    gt_idx[2] = 0
    cls_logits = torch.from_numpy(rng.normal(size=(16, 1)) * 0.5)
    tgt, _ = encode_boxes(gts[0].as_array()[None], anchors[2][None])
    deltas = torch.from_numpy(rng.normal(size=(16, 7)) * 0.5)
    with torch.no_grad():
        deltas[2] = torch.from_numpy(tgt[0]) + torch.tensor(
            [0.4, -0.3, 0.05, -0.02, 0.5, -0.6, 0.25], dtype=torch.float64)
    dir_logits = torch.from_numpy(rng.normal(size=(16, 2)) * 0.5)
    preds = [t.requires_grad_(True) for t in (cls_logits, deltas, dir_logits)]
    finite_difference_check(
        lambda: detection_loss(tuple(preds), anchors, gts, acfg,
                               match=(labels, gt_idx)), preds)

    elapsed = time.monotonic() - t0
    assert elapsed < 300.0, f"gradient suite took {elapsed:.1f}s"
    report_pass(5, f"finite-difference checks passed for attention (both kinds), "
                   f"AIC, upsampling, and both losses in {elapsed:.1f}s")


# ---------------------------------------------------------------------------
# C6: transfer identity
# ---------------------------------------------------------------------------

def test_c06_transfer_identity(tmp_path, rng):
    torch.manual_seed(0)
    cm = CompletionModel(DESK_BACKBONE, DESK_COMPLETION)
    meta = {"kind": "completion", "backbone_digest": DESK_BACKBONE.digest()}
    path = tmp_path / "c.ckpt"
    save_checkpoint(model_checkpoint(cm, meta), path)
    torch.manual_seed(99)
    det = DetectionModel(DESK_BACKBONE, grid_dims=(64, 64, 16))
    head_before = {k: v.clone() for k, v in det.state_dict().items()
                   if not k.startswith("backbone.")}
    transfer_backbone(load_checkpoint(path), det)
    for k, v in head_before.items():
        assert torch.equal(v, det.state_dict()[k]), f"{k} changed"
    for i in range(20):
        dims = (16, 16, 8)
        total = dims[0] * dims[1] * dims[2]
        n = int(rng.integers(1, 60))
        flat = rng.choice(total, size=n, replace=False)
        coords = np.stack([flat // (dims[1] * dims[2]),
                           (flat // dims[2]) % dims[1], flat % dims[2]], axis=1)
        g = SparseVoxelGrid(dims, coords, rng.normal(size=(n, 4)))
        a = backbone_forward(g, cm.backbone)
        b = backbone_forward(g, det.backbone)
        assert a.coord_set() == b.coord_set()
        assert np.array_equal(np.asarray(a.feats), np.asarray(b.feats))
    report_pass(6, "save -> load -> transfer reproduces backbone outputs exactly "
                   "on 20 grids; head parameters bit-unchanged")


# ---------------------------------------------------------------------------
# C7: format fidelity
# ---------------------------------------------------------------------------

def test_c07_format_fidelity(tmp_path, rng):
    dims = (256, 256, 32)
    occ = (rng.uniform(size=dims) > 0.8).astype(np.uint8)
    packed = pack_voxel_bits(occ)
    assert len(packed) == 262144
    np.testing.assert_array_equal(unpack_voxel_bits(packed, dims), occ)

    pts = np.concatenate([rng.normal(size=(500, 3)) * 10,
                          rng.uniform(0, 1, (500, 1))], axis=1)
    pts = pts.astype(np.float32).astype(np.float64)
    path = tmp_path / "scan.bin"
    write_kitti_velodyne(path, PointCloud(pts))
    back = read_kitti_velodyne(path)
    assert np.asarray(back.points).tobytes() == np.asarray(PointCloud(pts).points).tobytes()

    fixture = bytearray(262144)
    fixture[0] = 0x80
    vx = tmp_path / "one.bin"
    vx.write_bytes(bytes(fixture))
    g = read_semantickitti_voxels(vx)
    assert g.occupancy[0, 0, 0] == 1.0 and g.occupancy.sum() == 1.0
    report_pass(7, "packed-bit and velodyne round-trips bit-exact; 0x80 byte "
                   "maps to voxel (0,0,0)")


# ---------------------------------------------------------------------------
# C8: desk-scale pretext reproduction
# ---------------------------------------------------------------------------

def test_c08_pretext_reproduction(pretrain_run):
    history = dict(pretrain_run["history"])
    iou10, iou20, iou30 = history[10], history[20], history[30]
    assert iou10 < iou20 < iou30, (iou10, iou20, iou30)
    assert iou30 >= 0.60, iou30
    minutes = pretrain_run["train_seconds"] / 60.0
    assert minutes < 30.0, f"pretraining took {minutes:.1f} min"
    meta, _, rows = parse_table(open(pretrain_run["report"]).read())
    assert len(rows) == 30
    assert meta["config_digest"] == pretrain_run["config"].digest()
    report_pass(8, f"completion IoU {iou10:.3f} -> {iou20:.3f} -> {iou30:.3f} over "
                   f"epochs 10/20/30 (>= 0.60) in {minutes:.1f} CPU-min")


# ---------------------------------------------------------------------------
# C9: desk-scale transfer benefit
# ---------------------------------------------------------------------------

def _paired_easy_aps(detection_dataset, tmp_path_factory, strong, weak, seeds):
    out = {}
    for seed in seeds:
        for name, ck in (("random", None), ("scp", strong), ("scp_weak", weak)):
            run_out = tmp_path_factory.mktemp(f"c9_s{seed}_{name}")
            cfg = detection_config(detection_dataset, run_out, seed=seed)
            res = run_finetune(cfg, ck)
            easy = res["rows"][0]
            assert easy[2] == "easy" and easy[3] is not None
            out[(seed, name)] = easy[3]
    return out


def test_c09_transfer_benefit(pretrain_run, detection_dataset, tmp_path_factory):
    strong = pretrain_run["checkpoint"]
    weak = pretrain_run["snapshots"][2]
    strong_iou = load_checkpoint(strong).meta["best_iou"]
    weak_iou = load_checkpoint(weak).meta["best_iou"]
    assert strong_iou > weak_iou

    seeds = (0, 1, 2)
    aps = _paired_easy_aps(detection_dataset, tmp_path_factory, strong, weak, seeds)

    def means(table, names=("random", "scp", "scp_weak")):
        used = sorted({s for s, _ in table})
        return {n: float(np.mean([table[(s, n)] for s in used])) for n in names}

    m = means(aps)
    ok = m["scp"] >= m["random"] and m["scp"] >= m["scp_weak"]
    if not ok:  # documented statistical fallback: rerun with 5 seeds
        aps.update(_paired_easy_aps(detection_dataset, tmp_path_factory, strong,
                                    weak, (3, 4)))
        m = means(aps)
    assert m["scp"] >= m["random"], m
    assert m["scp"] >= m["scp_weak"], m
    report_pass(9, f"mean easy AP11: scp {m['scp']:.2f} >= random {m['random']:.2f}; "
                   f"better checkpoint (IoU {strong_iou:.3f}) >= weaker "
                   f"(IoU {weak_iou:.3f}): {m['scp']:.2f} >= {m['scp_weak']:.2f}")


# ---------------------------------------------------------------------------
# C10: fraction protocol grid from one report invocation
# ---------------------------------------------------------------------------

def test_c10_fraction_protocol_grid(tmp_path, capsys):
    import json
    from test_pipeline import tiny_config

    data = tmp_path / "data"
    cfg = tiny_config(data, tmp_path / "pre",
                      pretrain=OptimSettings(lr=1e-3, batch_size=3, epochs=1),
                      finetune=OptimSettings(lr=3e-3, batch_size=6, epochs=1))
    run_synth_gen(cfg, 12)
    pre = run_pretrain(cfg)
    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(json.dumps(cfg.to_dict()))
    rc = cli.main(["report", "--config", str(cfg_path), "--checkpoint",
                   pre["checkpoint"], "--out", str(tmp_path / "grid"),
                   "--data", str(data)])
    assert rc == 0
    capsys.readouterr()
    _, cols, rows = parse_table(open(tmp_path / "grid" / "report_grid.tsv").read())
    assert cols == ["method", "fraction", "difficulty", "ap11"]
    combos = {(r["method"], r["fraction"]) for r in rows}
    want = {(m, f"{f:.2f}") for m in ("scp", "random") for f in (0.1, 0.2, 0.3, 0.4)}
    assert combos == want
    report_pass(10, "one report invocation covers fractions {0.1,0.2,0.3,0.4} "
                    "x {scp, random}")
