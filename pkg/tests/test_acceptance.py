"""Acceptance suite: the headline guarantees of the package.

Each test prints the measured numbers next to its bar so a log scan shows not
just pass/fail but the margin. The heavy end-to-end tests live at the bottom;
run `pytest tests/test_acceptance.py -v -s` to watch them.
"""

import json
import time

import numpy as np
import pytest
import torch

from surgmotion.data import QuerySpec, resize_for_eval
from surgmotion.losses import (
    LossContext, LossWeights, RigidGroups, arap_loss, flow_loss,
    lift_tool_points, long_term_loss, mask_loss, rgb_loss, rigid_grouping,
    soft_mask, total_loss,
)
from surgmotion.metrics import (
    EVAL_RESOLUTION, THRESHOLDS, build_report, delta_avg,average_jaccard,
    occlusion_accuracy, write_report_json,
)
from surgmotion.model import ModelConfig, MotionModel, ParameterStore, save_checkpoint
from surgmotion.supervision import (
    BatchPair, StoreConfig, TrainingBatch, appearance_filter, build_store,
    cycle_filter,
)
from surgmotion.synth import CorruptionSpec, SceneSpec, corrupt_supervision, generate
from surgmotion.train import TrainConfig, export_trajectories, train, write_loss_csv

from test_losses import make_ctx, pair
from test_metrics import _random_pair, oracle_aj, oracle_delta, oracle_oa
from test_model import RAND_SCALE, randomize, tiny_model

torch.set_num_threads(1)


def _report(name, **values):
    parts = ", ".join(f"{k}={v}" for k, v in values.items())
    print(f"\n[acceptance] {name}: {parts}")


# ---------------------------------------------------------------------------
# 1. Bijection invertibility
# ---------------------------------------------------------------------------

class TestBijectionInvertibility:
    def test_random_parameters(self):
        t0 = time.time()
        model = tiny_model()
        randomize(model, seed=11, scale=RAND_SCALE)
        x = torch.rand(1000, 3, dtype=torch.float64) * 2 - 1
        worst = 0.0
        for frame in range(model.config.num_frames):
            u = model.map_to_canonical(x, frame)
            back = model.map_from_canonical(u, frame)
            worst = max(worst, float((back - x).detach().abs().max()))
        _report("invertibility/random-params", max_err=f"{worst:.2e}",
                seconds=f"{time.time() - t0:.1f}")
        assert worst < 1e-5

    def test_after_200_training_steps(self):
        t0 = time.time()
        spec = SceneSpec(width=24, height=24, num_frames=4, square_size=8.0,
                         square_center=(8.0, 12.0), num_tool_points=3,
                         num_tissue_points=4, flow_offsets=(1, 2),
                         matches_per_pair=20, match_frame_stride=1)
        scene = generate(spec)
        store = build_store(scene.sequence, scene.flows, scene.matches,
                            StoreConfig())
        cfg = TrainConfig(iterations=200, batch_frame_pairs=2,
                          batch_flow_points=16, batch_match_points=8,
                          ray_samples_train=4, num_coupling_layers=3,
                          conditioner_hidden=16, latent_dim=4,
                          canonical_hidden=16, pe_octaves=2,
                          mask_arap_start=50, checkpoint_every=0, seed=5)
        model = train(scene.sequence, store, cfg, log_every=0).model
        x = (torch.rand(1000, 3) * 2 - 1).to(model.config.torch_dtype)
        worst = 0.0
        for frame in range(scene.sequence.num_frames):
            u = model.map_to_canonical(x, frame)
            back = model.map_from_canonical(u, frame)
            worst = max(worst, float((back - x).detach().abs().max()))
        elapsed = time.time() - t0
        _report("invertibility/after-training", max_err=f"{worst:.2e}",
                seconds=f"{elapsed:.1f}")
        assert worst < 1e-5


# ---------------------------------------------------------------------------
# 2. Gradient correctness: every parameter, central differences, float64
# ---------------------------------------------------------------------------

def test_gradient_correctness_every_parameter(rng):
    t0 = time.time()
    model = tiny_model()  # 2 coupling layers, 16-unit nets, float64
    store = randomize(model, seed=31)
    ctx = make_ctx(rng)  # num_ray_samples=4, eval mode
    batch = TrainingBatch([
        pair(0, 1, (16.0, 16.0), (18.0, 17.0)),
        pair(1, 2, (12.0, 20.0), (12.0, 19.0)),
        pair(0, 3, (16.0, 18.0), (17.0, 18.0), "match"),
    ])
    tool_pairs = [batch.pairs[0], batch.pairs[2]]
    x_i, x_j = lift_tool_points(tool_pairs, model, ctx)
    groups = rigid_grouping((x_j - x_i).detach().numpy(), 1, seed=0)
    weights = LossWeights(mask_arap_start=0)

    def f(flat):
        store.set_flat(flat)
        loss, _ = total_loss(batch, model, ctx, weights, iteration=10,
                             groups=groups, tool_pairs=tool_pairs)
        return loss

    flat0 = store.get_flat().clone()
    store.zero_grads()
    f(flat0).backward()
    grad = store.grads_flat().clone()

    eps = 1e-6
    worst_rel = 0.0
    for i in range(len(flat0)):
        plus = flat0.clone(); plus[i] += eps
        minus = flat0.clone(); minus[i] -= eps
        with torch.no_grad():
            fd = (float(f(plus)) - float(f(minus))) / (2 * eps)
        g = float(grad[i])
        rel = abs(fd - g) / max(1.0, abs(fd), abs(g))
        worst_rel = max(worst_rel, rel)
        assert rel <= 1e-4, f"param {i}: autodiff {g} vs fd {fd}"
    store.set_flat(flat0)
    _report("gradient-correctness", params=len(flat0),
            worst_rel=f"{worst_rel:.2e}", seconds=f"{time.time() - t0:.1f}")


# ---------------------------------------------------------------------------
# 3. Metric oracle equivalence
# ---------------------------------------------------------------------------

def test_metric_oracle_equivalence_200_instances():
    t0 = time.time()
    for seed in range(200):
        gt, pred = _random_pair(seed)
        fracs, mean = delta_avg(gt, pred)
        ofracs, omean = oracle_delta(gt, pred)
        assert all(fracs[t] == ofracs[t] for t in THRESHOLDS)
        assert mean == omean
        assert average_jaccard(gt, pred) == oracle_aj(gt, pred)
        assert occlusion_accuracy(gt, pred) == oracle_oa(gt, pred)
    _report("metric-oracle", instances=200, seconds=f"{time.time() - t0:.1f}")


def test_metric_worked_example():
    from surgmotion.data import TrackedPoint, TrajectorySet
    gt = TrajectorySet(video="w", width=256, height=256, num_frames=4, points=[
        TrackedPoint(id=0, category="tool",
                     positions=[(10, 10), (20, 10), (30, 10), (40, 10)],
                     visibility=["visible"] * 4)])
    pred = TrajectorySet(video="w", width=256, height=256, num_frames=4, points=[
        TrackedPoint(id=0, category="tool",
                     positions=[(10, 10), (20.5, 10), (33, 10), (60, 10)],
                     visibility=["visible"] * 4)])
    fracs, mean = delta_avg(gt, pred)
    got = [fracs[t] for t in THRESHOLDS]
    _report("metric-worked-example", fractions=[f"{v:.4f}" for v in got],
            mean=f"{mean:.4f}")
    assert got == pytest.approx([1 / 3, 1 / 3, 2 / 3, 2 / 3, 2 / 3])
    assert mean == pytest.approx(0.5333333333333333)


# ---------------------------------------------------------------------------
# 4. Loss zero-cases (exact)
# ---------------------------------------------------------------------------

def test_loss_zero_cases(rng):
    model = tiny_model()
    ctx = make_ctx(rng)

    # flow: identity model, target = source -> exactly 0
    batch = [pair(0, 1, (16.0, 16.0), (16.0, 16.0))]
    assert float(flow_loss(batch, model, ctx).detach()) == 0.0

    # long-term: same perfect-fit condition for match provenance
    mbatch = [pair(0, 2, (12.0, 8.0), (12.0, 8.0), "match")]
    assert float(long_term_loss(mbatch, model, ctx).detach()) == 0.0

    # rgb: constant 0.5 frames, identity model, saturated density so the
    # first ray sample's alpha is exactly 1.0 -> rendered color exactly 0.5
    const_ctx = make_ctx(rng)
    const_ctx.frames = [np.full((32, 32, 3), 0.5) for _ in range(4)]
    with torch.no_grad():
        model.canonical.net[-1].weight.zero_()
        model.canonical.net[-1].bias.zero_()   # color logits 0 -> exactly 0.5
        model.canonical.net[-1].bias[0] = 80.0  # density head saturates alpha
    assert float(rgb_loss(batch, model, const_ctx).detach()) == 0.0

    # mask: both endpoints deep inside the instrument mask, identity model
    inner = [pair(0, 1, (16.0, 16.0), (16.0, 16.0))]
    assert float(mask_loss(inner, model, ctx).detach()) == 0.0

    # arap: pure cluster translation with dyadic coordinates -> exactly 0
    x_i = torch.tensor([[0.0, 0.25, 0.5], [1.0, 0.75, 0.25],
                        [0.5, 0.5, 0.0]], dtype=torch.float64)
    shift = torch.tensor([0.25, -0.5, 0.125], dtype=torch.float64)
    groups = RigidGroups(assignment=np.zeros(3, dtype=int),
                         centroids=np.zeros((1, 3)))
    assert float(arap_loss(groups, x_i, x_i + shift).detach()) == 0.0
    _report("loss-zero-cases", all_terms="exactly 0.0")


# ---------------------------------------------------------------------------
# 5. Schedule conformance via the loss CSV (scaled boundary 200)
# ---------------------------------------------------------------------------

def test_schedule_conformance_from_csv(tmp_path):
    spec = SceneSpec(width=24, height=24, num_frames=4, square_size=8.0,
                     square_center=(8.0, 12.0), num_tool_points=3,
                     num_tissue_points=4, flow_offsets=(1, 2),
                     matches_per_pair=20, match_frame_stride=1)
    scene = generate(spec)
    store = build_store(scene.sequence, scene.flows, scene.matches, StoreConfig())
    cfg = TrainConfig(iterations=205, batch_frame_pairs=2, batch_flow_points=12,
                      batch_match_points=6, ray_samples_train=4,
                      num_coupling_layers=3, conditioner_hidden=16, latent_dim=4,
                      canonical_hidden=16, pe_octaves=2, mask_arap_start=200,
                      checkpoint_every=0, seed=2)
    res = train(scene.sequence, store, cfg, log_every=0)
    csv_path = tmp_path / "loss.csv"
    write_loss_csv(res.history, csv_path)

    t0 = time.time()
    rows = csv_path.read_text().strip().splitlines()[1:]
    for row in rows:
        cols = row.split(",")
        it, w_mask, w_arap, w_long = (int(cols[0]), float(cols[7]),
                                      float(cols[8]), float(cols[9]))
        if it < 200:
            assert w_mask == 0.0 and w_arap == 0.0, it
        else:
            assert w_mask == 1.0 and w_arap == 1.0, it
        assert w_long == 0.3, it
    _report("schedule-conformance", rows=len(rows),
            csv_check_seconds=f"{time.time() - t0:.3f}")


# ---------------------------------------------------------------------------
# 6. Cycle-filter efficacy
# ---------------------------------------------------------------------------

def test_cycle_filter_efficacy():
    t0 = time.time()
    scene = generate(SceneSpec())
    by_pair = {(f.src_frame, f.dst_frame): f for f in scene.flows}
    cspec = CorruptionSpec(outlier_fraction=0.3, outlier_magnitude=10.0,
                           min_offset=4, seed=0)
    corrupted, _ = corrupt_supervision(scene.flows, scene.matches, cspec)
    caught = missed = lost = kept_clean = 0
    for f in corrupted:
        i, j = f.src_frame, f.dst_frame
        if abs(j - i) < cspec.min_offset or (j, i) not in by_pair:
            continue
        clean = by_pair[(i, j)]
        outlier = np.linalg.norm(f.flow - clean.flow, axis=-1) > 5.0
        kept = cycle_filter(f, by_pair[(j, i)], tau=3.0).valid
        caught += int((outlier & ~kept).sum())
        missed += int((outlier & kept).sum())
        lost += int((~outlier & ~kept).sum())
        kept_clean += int((~outlier & kept).sum())
    removed_frac = caught / (caught + missed)
    lost_frac = lost / (lost + kept_clean)
    _report("cycle-filter", outliers_removed=f"{removed_frac:.4f}",
            clean_lost=f"{lost_frac:.4f}", seconds=f"{time.time() - t0:.1f}")
    assert removed_frac >= 0.90
    assert lost_frac <= 0.05


# ---------------------------------------------------------------------------
# 7. Determinism: bit-identical checkpoints and reports
# ---------------------------------------------------------------------------

def test_determinism_bit_identical(tmp_path):
    spec = SceneSpec(width=24, height=24, num_frames=4, square_size=8.0,
                     square_center=(8.0, 12.0), num_tool_points=3,
                     num_tissue_points=4, flow_offsets=(1, 2),
                     matches_per_pair=20, match_frame_stride=1)
    scene = generate(spec)
    store = build_store(scene.sequence, scene.flows, scene.matches, StoreConfig())
    cfg = TrainConfig(iterations=40, batch_frame_pairs=2, batch_flow_points=12,
                      batch_match_points=6, ray_samples_train=4,
                      num_coupling_layers=3, conditioner_hidden=16, latent_dim=4,
                      canonical_hidden=16, pe_octaves=2, mask_arap_start=20,
                      checkpoint_every=0, seed=9)
    queries = QuerySpec.from_trajectories(scene.ground_truth)
    blobs, reports = [], []
    for run_id in (1, 2):
        model = train(scene.sequence, store, cfg, log_every=0).model
        ckpt = tmp_path / f"run{run_id}.smck"
        save_checkpoint(model, ckpt)
        blobs.append(ckpt.read_bytes())
        traj = export_trajectories(model, queries, scene.sequence, num_samples=8)
        rep = build_report(resize_for_eval(scene.ground_truth, EVAL_RESOLUTION),
                           resize_for_eval(traj, EVAL_RESOLUTION))
        path = tmp_path / f"report{run_id}.json"
        write_report_json([rep], path)
        reports.append(path.read_bytes())
    _report("determinism", checkpoint_bytes=len(blobs[0]),
            identical=blobs[0] == blobs[1] and reports[0] == reports[1])
    assert blobs[0] == blobs[1]
    assert reports[0] == reports[1]


# ---------------------------------------------------------------------------
# 8. End-to-end synthetic tracking (heavy: ~10 min CPU)
# ---------------------------------------------------------------------------

def _filtered_flows(scene, store_cfg):
    seq = scene.sequence
    by_pair = {(f.src_frame, f.dst_frame): f for f in scene.flows}
    flows = []
    for (i, j), fwd in by_pair.items():
        bwd = by_pair.get((j, i))
        f = cycle_filter(fwd, bwd, store_cfg.cycle_tau) if bwd is not None else fwd
        flows.append(appearance_filter(seq, f, store_cfg.rgb_tau))
    return flows


def _filtered_store(scene, store_cfg=None):
    store_cfg = store_cfg or StoreConfig()
    flows = _filtered_flows(scene, store_cfg)
    return build_store(scene.sequence, flows, scene.matches, store_cfg)


def _median_epe(gt, pred):
    by_id = {p.id: p for p in pred.points}
    errs = []
    for g in gt.points:
        p = by_id[g.id]
        for f in range(gt.num_frames):
            if g.visibility[f] == "visible" and p.positions[f] is not None:
                errs.append(np.hypot(g.positions[f][0] - p.positions[f][0],
                                     g.positions[f][1] - p.positions[f][1]))
    return float(np.median(errs))


# Scaled-down training setup for the 2000-iteration desk run: the package
# defaults (lr 3e-4, mask/ARAP from 20k) assume ~100k-iteration production
# runs; here the schedule boundary and learning rate are compressed to match.
E2E_CONFIG = dict(iterations=2000, learning_rate=5e-3, mask_arap_start=200,
                  checkpoint_every=0, seed=1)


def test_e2e_synthetic_tracking():
    t0 = time.time()
    scene = generate(SceneSpec())
    seq = scene.sequence
    store = _filtered_store(scene)
    queries = QuerySpec.from_trajectories(scene.ground_truth)

    identity = MotionModel(ModelConfig(num_frames=seq.num_frames))
    base_traj = export_trajectories(identity, queries, seq)
    base_epe = _median_epe(scene.ground_truth, base_traj)

    cfg = TrainConfig(**E2E_CONFIG)
    model = train(seq, store, cfg, log_every=0).model
    traj = export_trajectories(model, queries, seq)
    epe = _median_epe(scene.ground_truth, traj)

    rep = build_report(resize_for_eval(scene.ground_truth, EVAL_RESOLUTION),
                       resize_for_eval(traj, EVAL_RESOLUTION))
    improvement = 1 - epe / base_epe
    _report("e2e-tracking", base_epe=f"{base_epe:.3f}", epe=f"{epe:.3f}",
            improvement=f"{100 * improvement:.1f}%",
            tools_delta=f"{rep.tool.delta_avg:.4f}",
            minutes=f"{(time.time() - t0) / 60:.1f}")
    assert improvement >= 0.50
    assert rep.tool.delta_avg >= 0.60


# ---------------------------------------------------------------------------
# 9. Ablation direction (heavy: ~10 min CPU)
# ---------------------------------------------------------------------------

def test_ablation_direction():
    t0 = time.time()
    scene = generate(SceneSpec())
    store_cfg = StoreConfig()
    flows = _filtered_flows(scene, store_cfg)
    # inject the outliers *after* the standard filtering pass so they are
    # guaranteed to reach training (filtering first, as the pipeline does,
    # would simply remove them again)
    cspec = CorruptionSpec(outlier_fraction=0.2, outlier_magnitude=10.0,
                           min_offset=4, seed=3)
    flows, matches = corrupt_supervision(flows, scene.matches, cspec)
    store = build_store(scene.sequence, flows, matches, store_cfg)
    queries = QuerySpec.from_trajectories(scene.ground_truth)
    gt256 = resize_for_eval(scene.ground_truth, EVAL_RESOLUTION)

    deltas = {}
    for name, extra in (("full", True), ("flow+rgb only", False)):
        cfg = TrainConfig(iterations=2000, learning_rate=5e-3,
                          mask_arap_start=200, checkpoint_every=0, seed=1,
                          enable_mask=extra, enable_arap=extra,
                          enable_long=extra)
        model = train(scene.sequence, store, cfg, log_every=0).model
        traj = export_trajectories(model, queries, scene.sequence)
        rep = build_report(gt256, resize_for_eval(traj, EVAL_RESOLUTION))
        deltas[name] = rep.tool.delta_avg
    _report("ablation-direction", **{k: f"{v:.4f}" for k, v in deltas.items()},
            minutes=f"{(time.time() - t0) / 60:.1f}")
    assert deltas["full"] >= deltas["flow+rgb only"]
