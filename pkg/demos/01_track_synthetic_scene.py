"""Track points through a synthetic surgical-style scene, start to finish.

Generates the default scene (a textured rigid square moving over a deforming
background), filters the supervision, fits the motion model for a short run,
exports trajectories, and prints TAP metrics against the analytic ground
truth.  Expect a few minutes on CPU; raise `iterations` for better tracking.
"""

import numpy as np
import torch

from surgmotion.data import QuerySpec, resize_for_eval
from surgmotion.metrics import EVAL_RESOLUTION, build_report, format_table
from surgmotion.supervision import (
    StoreConfig, appearance_filter, build_store, cycle_filter,
)
from surgmotion.synth import SceneSpec, generate
from surgmotion.train import TrainConfig, export_trajectories, train

torch.set_num_threads(1)

# --- generate the scene ---------------------------------------------------
spec = SceneSpec()
scene = generate(spec)
seq = scene.sequence
print(f"scene: {seq.width}x{seq.height}, {seq.num_frames} frames, "
      f"{len(scene.ground_truth.points)} ground-truth points")

# --- filter flow like a real pipeline would -------------------------------
store_cfg = StoreConfig()
by_pair = {(f.src_frame, f.dst_frame): f for f in scene.flows}
flows = []
for (i, j), fwd in by_pair.items():
    bwd = by_pair.get((j, i))
    f = cycle_filter(fwd, bwd, store_cfg.cycle_tau) if bwd is not None else fwd
    flows.append(appearance_filter(seq, f, store_cfg.rgb_tau))
store = build_store(seq, flows, scene.matches, store_cfg)
print(f"supervision: {sum(int(f.valid.sum()) for f in flows)} flow pixels, "
      f"{sum(len(m.matches) for m in scene.matches)} matches")

# --- fit ------------------------------------------------------------------
config = TrainConfig(iterations=500, learning_rate=1e-3, mask_arap_start=200,
                     checkpoint_every=0, seed=1)
result = train(seq, store, config, log_every=100)
print(f"final loss {result.history[-1].total:.4f}")

# --- export and score -----------------------------------------------------
queries = QuerySpec.from_trajectories(scene.ground_truth)
pred = export_trajectories(result.model, queries, seq)

gt256 = resize_for_eval(scene.ground_truth, EVAL_RESOLUTION)
pred256 = resize_for_eval(pred, EVAL_RESOLUTION)
print(format_table([build_report(gt256, pred256)]))
