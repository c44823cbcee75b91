"""Training objectives and their schedule.

Five terms: flow (MAE on predicted vs target displacement), RGB (MSE color
constancy), mask (soft tool-mask consistency), ARAP (displacement-magnitude
consistency within rigid groups), and long-term (MAE against feature matches).
Each term can be toggled independently for ablations; a disabled term
contributes exactly 0.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import torch
from scipy import ndimage

from .model import MotionModel
from .render import composite, lift, map_chain
from .supervision import TrainingBatch, bilinear_sample

log = logging.getLogger(__name__)


@dataclass
class LossWeights:
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
    mask_arap_start: int = 20000  # iterations before this get w_mask = w_arap = 0

    def __post_init__(self):
        for name in ("w_flow", "w_rgb", "w_mask", "w_arap", "w_long"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")

    def effective(self, iteration: int) -> dict[str, float]:
        """Scheduled weights at a given iteration (mask/ARAP gated until start)."""
        gate = 0.0 if iteration < self.mask_arap_start else 1.0
        return {
            "flow": self.w_flow if self.enable_flow else 0.0,
            "rgb": self.w_rgb if self.enable_rgb else 0.0,
            "mask": gate * self.w_mask if self.enable_mask else 0.0,
            "arap": gate * self.w_arap if self.enable_arap else 0.0,
            "long": self.w_long if self.enable_long else 0.0,
        }


@dataclass
class LossContext:
    """Everything loss evaluation needs besides the model and batch."""

    width: int
    height: int
    frames: list[np.ndarray]                 # (H, W, 3) float arrays in [0, 1]
    soft_masks: list[np.ndarray] | None      # per-frame soft tool masks in [0, 1]
    binary_masks: list[np.ndarray] | None    # per-frame bool tool masks
    num_ray_samples: int = 16
    train: bool = True
    rng: np.random.Generator | None = None


def soft_mask(binary: np.ndarray, scale: float = 2.0) -> np.ndarray:
    """Differentiable relaxation of a binary tool mask.

    sigmoid(SDF / scale) with the signed distance positive inside the mask;
    agrees with the binary mask away from boundaries and transitions over a
    band of width ~scale pixels.
    """
    binary = binary.astype(bool)
    if binary.all():
        return np.ones(binary.shape, dtype=np.float64)
    if not binary.any():
        return np.zeros(binary.shape, dtype=np.float64)
    d_out = ndimage.distance_transform_edt(~binary)
    d_in = ndimage.distance_transform_edt(binary)
    sdf = d_in - d_out
    return 1.0 / (1.0 + np.exp(-sdf / scale))


def _sample_grid_torch(grid: torch.Tensor, xy: torch.Tensor) -> torch.Tensor:
    """Bilinear sampling of a (H, W) grid at pixel coords (N, 2), autograd-friendly."""
    h, w = grid.shape
    x = torch.clamp(xy[:, 0] - 0.5, 0.0, w - 1.0)
    y = torch.clamp(xy[:, 1] - 0.5, 0.0, h - 1.0)
    x0 = torch.clamp(x.floor().long(), max=w - 1)
    y0 = torch.clamp(y.floor().long(), max=h - 1)
    x1 = torch.clamp(x0 + 1, max=w - 1)
    y1 = torch.clamp(y0 + 1, max=h - 1)
    fx = x - x0.to(x.dtype)
    fy = y - y0.to(y.dtype)
    top = grid[y0, x0] * (1 - fx) + grid[y0, x1] * fx
    bot = grid[y1, x0] * (1 - fx) + grid[y1, x1] * fx
    return top * (1 - fy) + bot * fy


def _batch_arrays(pairs):
    p_i = torch.as_tensor(np.stack([p.p_i for p in pairs]))
    p_j = torch.as_tensor(np.stack([p.p_j_target for p in pairs]))
    f_i = [p.frame_i for p in pairs]
    f_j = [p.frame_j for p in pairs]
    return p_i, p_j, f_i, f_j


def _predict_pairs(pairs, model: MotionModel, ctx: LossContext):
    """Shared forward pass for a list of batch pairs.

    Returns (p_i pixels, predicted p_j pixels, composite result, src samples,
    mapped dst samples)."""
    dtype = model.config.torch_dtype
    p_i, _, f_i, f_j = _batch_arrays(pairs)
    p_i = p_i.to(dtype)
    samples = lift(p_i, ctx.width, ctx.height, ctx.num_ray_samples,
                   train=ctx.train, rng=ctx.rng)
    mapped, canonical = map_chain(samples, f_i, f_j, model)
    result = composite(samples, mapped, canonical, model, ctx.width, ctx.height)
    return p_i, result, samples, mapped


def flow_loss(pairs, model: MotionModel, ctx: LossContext) -> torch.Tensor:
    """MAE between the predicted displacement and the flow target (per-point L1)."""
    if not pairs:
        log.warning("flow_loss: empty flow pool, contributing 0")
        return torch.zeros((), dtype=model.config.torch_dtype)
    _, target, _, _ = _batch_arrays(pairs)
    p_i, result, _, _ = _predict_pairs(pairs, model, ctx)
    err = result.p - target.to(result.p.dtype)
    return err.abs().sum(dim=1).mean()


def rgb_loss(pairs, model: MotionModel, ctx: LossContext) -> torch.Tensor:
    """MSE between the rendered track color and the source-frame color at p_i."""
    if not pairs:
        return torch.zeros((), dtype=model.config.torch_dtype)
    p_i, result, _, _ = _predict_pairs(pairs, model, ctx)
    targets = np.stack([
        bilinear_sample(ctx.frames[p.frame_i].astype(np.float64),
                        p.p_i.reshape(1, 2))[0]
        for p in pairs
    ])
    targets = torch.as_tensor(targets, dtype=result.color.dtype)
    return ((result.color - targets) ** 2).mean()


def mask_loss(pairs, model: MotionModel, ctx: LossContext) -> torch.Tensor:
    """Soft-mask consistency for points starting inside the tool mask.

    Over batch points with p_i inside the binarized tool mask of frame i:
    mean (M_soft_i(p_i) - M_soft_j(p_j))^2, differentiable w.r.t. p_j.
    """
    if ctx.binary_masks is None or ctx.soft_masks is None:
        log.warning("mask_loss: no masks available, term disabled")
        return torch.zeros((), dtype=model.config.torch_dtype)
    inside = [
        p for p in pairs
        if _inside_mask(ctx.binary_masks[p.frame_i], p.p_i, ctx.width, ctx.height)
    ]
    if not inside:
        return torch.zeros((), dtype=model.config.torch_dtype)
    p_i, result, _, _ = _predict_pairs(inside, model, ctx)
    dtype = result.p.dtype
    m_i = torch.stack([
        _sample_grid_torch(torch.as_tensor(ctx.soft_masks[p.frame_i], dtype=dtype),
                           p_i[k:k + 1])
        for k, p in enumerate(inside)
    ]).reshape(-1)
    m_j = torch.stack([
        _sample_grid_torch(torch.as_tensor(ctx.soft_masks[p.frame_j], dtype=dtype),
                           result.p[k:k + 1])
        for k, p in enumerate(inside)
    ]).reshape(-1)
    return ((m_i - m_j) ** 2).mean()


def _inside_mask(mask: np.ndarray, p: np.ndarray, width: int, height: int) -> bool:
    x, y = int(np.clip(p[0], 0, width - 1)), int(np.clip(p[1], 0, height - 1))
    return bool(mask[y, x])


@dataclass
class RigidGroups:
    assignment: np.ndarray  # (N,) cluster index per point
    centroids: np.ndarray   # (K, D) displacement centroids

    def __post_init__(self):
        counts = np.bincount(self.assignment, minlength=len(self.centroids))
        if (counts == 0).any():
            raise ValueError("every cluster must be nonempty")


def rigid_grouping(displacements: np.ndarray, k_groups: int, seed: int = 0,
                   max_iter: int = 50) -> RigidGroups:
    """Seeded k-means (k-means++ init) on per-point displacement vectors."""
    disp = np.asarray(displacements, dtype=np.float64)
    n = len(disp)
    if n < k_groups:
        raise ValueError(f"{n} points cannot form {k_groups} groups")
    rng = np.random.default_rng(seed)

    # k-means++ seeding
    centers = [disp[rng.integers(n)]]
    for _ in range(1, k_groups):
        d2 = np.min([np.sum((disp - c) ** 2, axis=1) for c in centers], axis=0)
        total = d2.sum()
        if total <= 0:
            centers.append(disp[rng.integers(n)])
            continue
        centers.append(disp[rng.choice(n, p=d2 / total)])
    centers = np.array(centers)

    assign = np.zeros(n, dtype=int)
    for _ in range(max_iter):
        dists = np.linalg.norm(disp[:, None, :] - centers[None, :, :], axis=2)
        new_assign = dists.argmin(axis=1)
        # keep clusters nonempty: give an empty cluster its farthest point
        for k in range(k_groups):
            if not (new_assign == k).any():
                far = dists[np.arange(n), new_assign].argmax()
                new_assign[far] = k
        if (new_assign == assign).all() and _ > 0:
            break
        assign = new_assign
        for k in range(k_groups):
            centers[k] = disp[assign == k].mean(axis=0)
    return RigidGroups(assignment=assign, centroids=centers)


def arap_loss(groups: RigidGroups, x_i: torch.Tensor, x_j: torch.Tensor) -> torch.Tensor:
    """Displacement-magnitude consistency within each rigid group.

    For same-cluster point pairs (k, p): |d(x_i^k, x_j^k) - d(x_i^p, x_j^p)|,
    averaged over all pairs.  Size-1 clusters contribute nothing.
    """
    mags = torch.linalg.norm(x_j - x_i, dim=1)
    terms = []
    for k in range(len(groups.centroids)):
        idx = np.flatnonzero(groups.assignment == k)
        if len(idx) < 2:
            continue
        m = mags[torch.as_tensor(idx)]
        diff = (m[:, None] - m[None, :]).abs()
        iu = torch.triu_indices(len(idx), len(idx), offset=1)
        terms.append(diff[iu[0], iu[1]])
    if not terms:
        return torch.zeros((), dtype=x_i.dtype)
    all_pairs = torch.cat(terms)
    return all_pairs.mean()


def lift_tool_points(pairs, model: MotionModel, ctx: LossContext):
    """Lift batch points at the central ray sample and map them to frame j in 3D.

    Used for ARAP: returns (x_i, x_j) 3D tensors plus the displacements as a
    detached numpy array for grouping.
    """
    dtype = model.config.torch_dtype
    p_i, _, f_i, f_j = _batch_arrays(pairs)
    samples = lift(p_i.to(dtype), ctx.width, ctx.height, 1, train=False)
    mapped, _ = map_chain(samples, f_i, f_j, model)
    x_i = samples[:, 0, :]
    x_j = mapped[:, 0, :]
    return x_i, x_j


def long_term_loss(pairs, model: MotionModel, ctx: LossContext) -> torch.Tensor:
    """MAE between predicted positions and feature-match targets.

    The matched and predicted displacements share the source point, so the
    p_i terms cancel and the loss reduces to the per-point L1 between the
    matched and predicted destination positions.
    """
    if not pairs:
        log.warning("long_term_loss: empty match pool, contributing 0")
        return torch.zeros((), dtype=model.config.torch_dtype)
    _, target, _, _ = _batch_arrays(pairs)
    p_i, result, _, _ = _predict_pairs(pairs, model, ctx)
    err = result.p - target.to(result.p.dtype)
    return err.abs().sum(dim=1).mean()


@dataclass
class LossReport:
    iteration: int
    terms: dict[str, float] = field(default_factory=dict)     # unweighted values
    weights: dict[str, float] = field(default_factory=dict)   # effective weights
    total: float = 0.0


def total_loss(
    batch: TrainingBatch,
    model: MotionModel,
    ctx: LossContext,
    weights: LossWeights,
    iteration: int,
    groups: RigidGroups | None = None,
    tool_pairs: list | None = None,
) -> tuple[torch.Tensor, LossReport]:
    """Weighted sum of enabled terms, honoring the iteration schedule.

    ``tool_pairs``/``groups`` carry the current rigid grouping for the ARAP
    term; when absent the term is 0.  Returns the scalar plus a per-term
    report with unweighted values for logging and ablation.
    """
    eff = weights.effective(iteration)
    flow_pairs = batch.by_provenance("flow")
    match_pairs = batch.by_provenance("match")

    zero = torch.zeros((), dtype=model.config.torch_dtype)
    terms: dict[str, torch.Tensor] = {}
    terms["flow"] = flow_loss(flow_pairs, model, ctx) if eff["flow"] > 0 else zero
    terms["rgb"] = rgb_loss(flow_pairs + match_pairs, model, ctx) if eff["rgb"] > 0 else zero
    terms["mask"] = mask_loss(batch.pairs, model, ctx) if eff["mask"] > 0 else zero
    if eff["arap"] > 0 and groups is not None and tool_pairs:
        x_i, x_j = lift_tool_points(tool_pairs, model, ctx)
        terms["arap"] = arap_loss(groups, x_i, x_j)
    else:
        terms["arap"] = zero
    terms["long"] = long_term_loss(match_pairs, model, ctx) if eff["long"] > 0 else zero

    total = sum(eff[name] * t for name, t in terms.items())
    report = LossReport(
        iteration=iteration,
        terms={name: float(t.detach()) for name, t in terms.items()},
        weights=eff,
        total=float(total.detach()),
    )
    return total, report
