"""Per-video optimization loop: Adam updates, schedules, checkpointing.

Training is deterministic given (seed, config, inputs) in single-threaded
mode; NaN losses abort loudly with the offending term named.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
import torch

from .data import DataError, Query, QuerySpec, TrackedPoint, TrajectorySet, VideoSequence
from .losses import LossContext, LossReport, LossWeights, RigidGroups, rigid_grouping, soft_mask, lift_tool_points, total_loss
from .model import ModelConfig, MotionModel, ParameterStore, save_checkpoint
from .render import predict
from .supervision import SupervisionStore, sample_batch

log = logging.getLogger(__name__)

LOSS_CSV_HEADER = "iteration,flow,rgb,mask,arap,long,total,w_mask,w_arap,w_long"


class TrainError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    iterations: int = 100_000
    learning_rate: float = 3e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_frame_pairs: int = 8
    batch_flow_points: int = 192
    batch_match_points: int = 64
    mask_arap_start: int = 20_000
    w_flow: float = 1.0
    w_rgb: float = 1.0
    w_mask: float = 1.0
    w_arap: float = 1.0
    w_long: float = 0.3
    enable_flow: bool = True
    enable_rgb: bool = True
    enable_mask: bool = True
    enable_arap: bool = True
    enable_long: bool = True
    ray_samples_train: int = 16
    ray_samples_eval: int = 32
    visibility_threshold: float = 0.5
    regroup_every: int = 500
    seed: int = 0
    checkpoint_every: int = 10_000
    precision: str = "float32"
    num_coupling_layers: int = 6
    conditioner_hidden: int = 64
    latent_dim: int = 16
    canonical_hidden: int = 64
    pe_octaves: int = 4

    def __post_init__(self):
        if self.iterations <= 0:
            raise ValueError("iterations must be > 0")
        for b in (self.adam_beta1, self.adam_beta2):
            if not 0 <= b < 1:
                raise ValueError("Adam betas must be in [0, 1)")

    def loss_weights(self) -> LossWeights:
        return LossWeights(
            w_flow=self.w_flow, w_rgb=self.w_rgb, w_mask=self.w_mask,
            w_arap=self.w_arap, w_long=self.w_long,
            enable_flow=self.enable_flow, enable_rgb=self.enable_rgb,
            enable_mask=self.enable_mask, enable_arap=self.enable_arap,
            enable_long=self.enable_long, mask_arap_start=self.mask_arap_start,
        )


@dataclass
class AdamState:
    m: torch.Tensor
    v: torch.Tensor
    step: int = 0

    @classmethod
    def like(cls, params: torch.Tensor) -> "AdamState":
        return cls(m=torch.zeros_like(params), v=torch.zeros_like(params))


def adam_step(
    params: torch.Tensor,
    grads: torch.Tensor,
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> torch.Tensor:
    """One bias-corrected Adam update on flat parameter/gradient vectors."""
    if params.shape != grads.shape or state.m.shape != params.shape:
        raise ValueError(
            f"shape mismatch: params {tuple(params.shape)}, grads {tuple(grads.shape)}, "
            f"moments {tuple(state.m.shape)}"
        )
    if not torch.isfinite(grads).all():
        bad = int((~torch.isfinite(grads)).sum())
        raise TrainError(f"non-finite gradient ({bad} entries); aborting")
    state.step += 1
    state.m = beta1 * state.m + (1 - beta1) * grads
    state.v = beta2 * state.v + (1 - beta2) * grads * grads
    m_hat = state.m / (1 - beta1 ** state.step)
    v_hat = state.v / (1 - beta2 ** state.step)
    return params - lr * m_hat / (torch.sqrt(v_hat) + eps)


@dataclass
class TrainResult:
    model: MotionModel
    history: list[LossReport] = field(default_factory=list)


def _make_loss_context(seq: VideoSequence, config: TrainConfig,
                       rng: np.random.Generator) -> LossContext:
    soft = None
    binary = None
    if seq.masks is not None:
        binary = [seq.binary_mask(f) for f in range(seq.num_frames)]
        soft = [soft_mask(b) for b in binary]
    return LossContext(
        width=seq.width, height=seq.height, frames=seq.frames,
        soft_masks=soft, binary_masks=binary,
        num_ray_samples=config.ray_samples_train, train=True, rng=rng,
    )


def _num_instrument_groups(seq: VideoSequence) -> int:
    if seq.masks is None:
        return 1
    labels = set()
    for m in seq.masks:
        labels.update(np.unique(m).tolist())
    labels.discard(0)
    return max(1, len(labels))


def _tool_pairs(batch, binary_masks, width, height):
    if binary_masks is None:
        return []
    out = []
    for p in batch.pairs:
        x = int(np.clip(p.p_i[0], 0, width - 1))
        y = int(np.clip(p.p_i[1], 0, height - 1))
        if binary_masks[p.frame_i][y, x]:
            out.append(p)
    return out


def write_loss_csv(history: list[LossReport], path: str | Path):
    lines = [LOSS_CSV_HEADER]
    for r in history:
        lines.append(
            f"{r.iteration},{r.terms['flow']:.6g},{r.terms['rgb']:.6g},"
            f"{r.terms['mask']:.6g},{r.terms['arap']:.6g},{r.terms['long']:.6g},"
            f"{r.total:.6g},{r.weights['mask']:g},{r.weights['arap']:g},{r.weights['long']:g}"
        )
    Path(path).write_text("\n".join(lines) + "\n")


def train(
    seq: VideoSequence,
    store: SupervisionStore,
    config: TrainConfig,
    out_dir: str | Path | None = None,
    model: MotionModel | None = None,
    log_every: int = 100,
) -> TrainResult:
    """Fit the motion model to one video.

    Runs ``config.iterations`` of sample_batch -> total_loss -> backward ->
    adam_step, honoring the mask/ARAP weight schedule.  Checkpoints every
    ``checkpoint_every`` iterations when ``out_dir`` is given.
    """
    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)
    if model is None:
        model = MotionModel(ModelConfig(
            num_frames=seq.num_frames,
            num_coupling_layers=config.num_coupling_layers,
            conditioner_hidden=config.conditioner_hidden,
            latent_dim=config.latent_dim,
            canonical_hidden=config.canonical_hidden,
            pe_octaves=config.pe_octaves,
            dtype=config.precision,
        ))
    store_params = ParameterStore(model)
    adam = AdamState.like(store_params.get_flat())
    weights = config.loss_weights()
    ctx = _make_loss_context(seq, config, rng)
    k_groups = _num_instrument_groups(seq)

    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    history: list[LossReport] = []
    groups: RigidGroups | None = None
    tool_pairs = []
    for it in range(config.iterations):
        batch = sample_batch(
            store, rng_seed=config.seed * 1_000_003 + it,
            frame_pairs=config.batch_frame_pairs,
            flow_points=config.batch_flow_points,
            match_points=config.batch_match_points,
        )
        eff = weights.effective(it)
        if eff["arap"] > 0 or eff["mask"] > 0:
            tool_pairs = _tool_pairs(batch, ctx.binary_masks, seq.width, seq.height)
        else:
            tool_pairs = []
        if eff["arap"] > 0 and tool_pairs:
            if groups is None or it % config.regroup_every == 0 or len(groups.assignment) != len(tool_pairs):
                with torch.no_grad():
                    x_i, x_j = lift_tool_points(tool_pairs, model, ctx)
                    disp = (x_j - x_i).numpy()
                k = min(k_groups, len(tool_pairs))
                groups = rigid_grouping(disp, k, seed=config.seed)

        store_params.zero_grads()
        loss, report = total_loss(batch, model, ctx, weights, it,
                                  groups=groups, tool_pairs=tool_pairs)
        if not np.isfinite(report.total):
            bad = [n for n, v in report.terms.items() if not np.isfinite(v)]
            raise TrainError(f"non-finite loss at iteration {it}: {bad or ['total']}")
        if loss.requires_grad:
            store_params.backward(loss)
            new_flat = adam_step(
                store_params.get_flat(), store_params.grads_flat(), adam,
                lr=config.learning_rate, beta1=config.adam_beta1,
                beta2=config.adam_beta2, eps=config.adam_eps,
            )
            store_params.set_flat(new_flat)
        history.append(report)
        if log_every and it % log_every == 0:
            log.info("iter %d: total %.5f %s", it, report.total,
                     {k: round(v, 5) for k, v in report.terms.items()})
        if out_dir is not None and config.checkpoint_every > 0 and (it + 1) % config.checkpoint_every == 0:
            save_checkpoint(model, out_dir / f"checkpoint_{it + 1:06d}.smck")

    if out_dir is not None:
        save_checkpoint(model, out_dir / "checkpoint_final.smck")
        write_loss_csv(history, out_dir / "loss_history.csv")
    return TrainResult(model=model, history=history)


def export_trajectories(
    model: MotionModel,
    queries: QuerySpec,
    seq: VideoSequence,
    num_samples: int = 32,
    visibility_threshold: float = 0.5,
) -> TrajectorySet:
    """Track each query point through every frame with the fitted model."""
    points = []
    with torch.no_grad():
        for q in queries.queries:
            if not (0 <= q.frame < seq.num_frames):
                raise DataError(f"query frame {q.frame} outside sequence")
            if not (0 <= q.x < seq.width and 0 <= q.y < seq.height):
                raise DataError(f"query ({q.x}, {q.y}) outside frame")
            p_i = torch.tensor([[q.x, q.y]], dtype=model.config.torch_dtype)
            positions: list[tuple[float, float] | None] = []
            visibility: list[str] = []
            for f in range(seq.num_frames):
                p_j, _, visible, acc = predict(
                    p_i, q.frame, f, model, seq.width, seq.height,
                    num_samples=num_samples,
                    visibility_threshold=visibility_threshold,
                )
                x, y = float(p_j[0, 0]), float(p_j[0, 1])
                in_frame = 0 <= x < seq.width and 0 <= y < seq.height
                if bool(visible[0]) and in_frame:
                    positions.append((x, y))
                    visibility.append("visible")
                elif in_frame:
                    positions.append((x, y))
                    visibility.append("occluded")
                else:
                    positions.append(None)
                    visibility.append("out_of_view")
            category = "tissue"
            if seq.masks is not None:
                x0 = int(np.clip(q.x, 0, seq.width - 1))
                y0 = int(np.clip(q.y, 0, seq.height - 1))
                if seq.masks[q.frame][y0, x0] > 0:
                    category = "tool"
            points.append(TrackedPoint(
                id=q.point_id, category=category, positions=positions,
                visibility=visibility,
            ))
    return TrajectorySet(
        video=seq.name, width=seq.width, height=seq.height,
        num_frames=seq.num_frames, points=points,
    )


def config_to_dict(config: TrainConfig) -> dict:
    return asdict(config)
