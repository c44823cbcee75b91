"""Orthographic lifting, bijection chaining, and alpha compositing.

2D queries are lifted along rays orthogonal to the image plane, pushed through
the per-frame bijections into the destination frame, then alpha-composited
into a single predicted 3D point, 2D position, color, and opacity.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .model import MotionModel


@dataclass
class RenderConfig:
    samples_train: int = 16
    samples_eval: int = 32
    visibility_threshold: float = 0.5


def pixels_to_norm(xy: torch.Tensor, width: int, height: int) -> torch.Tensor:
    """Map continuous pixel coordinates into the normalized [-1, 1] box."""
    scale = torch.tensor([width, height], dtype=xy.dtype, device=xy.device)
    return 2.0 * xy / scale - 1.0

def norm_to_pixels(xy: torch.Tensor, width: int, height: int) -> torch.Tensor:
    scale = torch.tensor([width, height], dtype=xy.dtype, device=xy.device)
    return (xy + 1.0) * scale / 2.0


def lift(
    p: torch.Tensor,
    width: int,
    height: int,
    num_samples: int,
    train: bool = False,
    rng: np.random.Generator | None = None,
) -> torch.Tensor:
    """Lift pixel points (N, 2) to ray samples (N, K, 3), depth ascending.

    Depths stratify [-1, 1] into K bins: stratum midpoints when evaluating,
    uniform jitter within each stratum when training.
    """
    if num_samples < 1:
        raise ValueError("num_samples must be >= 1")
    n = p.shape[0]
    edges = torch.linspace(-1.0, 1.0, num_samples + 1, dtype=p.dtype)
    if train:
        rng = rng or np.random.default_rng()
        jitter = torch.as_tensor(rng.random((n, num_samples)), dtype=p.dtype)
    else:
        jitter = torch.full((n, num_samples), 0.5, dtype=p.dtype)
    depths = edges[:-1] + jitter * (2.0 / num_samples)
    xy = pixels_to_norm(p, width, height)
    samples = torch.empty(n, num_samples, 3, dtype=p.dtype)
    samples[:, :, 0:2] = xy[:, None, :]
    samples[:, :, 2] = depths
    return samples


def map_chain(
    samples: torch.Tensor, src_frame, dst_frame, model: MotionModel
) -> tuple[torch.Tensor, torch.Tensor]:
    """Map ray samples (N, K, 3) from src to dst frame via the canonical volume.

    Returns (mapped samples in dst frame, canonical points), both (N, K, 3).
    """
    n, k, _ = samples.shape
    flat = samples.reshape(n * k, 3)
    src_idx = _expand_frames(src_frame, n, k)
    dst_idx = _expand_frames(dst_frame, n, k)
    u = model.map_to_canonical(flat, src_idx)
    x_dst = model.map_from_canonical(u, dst_idx)
    return x_dst.reshape(n, k, 3), u.reshape(n, k, 3)


def _expand_frames(frame, n: int, k: int):
    if isinstance(frame, int):
        return frame
    return torch.as_tensor(frame).repeat_interleave(k)


@dataclass
class CompositeResult:
    x_hat: torch.Tensor      # (N, 3) alpha-composited 3D point (unnormalized sum)
    p: torch.Tensor          # (N, 2) pixel position of the opacity-normalized point
    color: torch.Tensor      # (N, 3)
    acc: torch.Tensor        # (N,) accumulated opacity in [0, 1]
    degenerate: torch.Tensor  # (N,) bool, true where acc underflowed to ~0


def composite(
    samples_src: torch.Tensor,
    mapped: torch.Tensor,
    canonical: torch.Tensor,
    model: MotionModel,
    width: int,
    height: int,
) -> CompositeResult:
    """Front-to-back alpha compositing of mapped ray samples.

    alpha_k = 1 - exp(-sigma_k * delta_k) with delta_k the depth gap between
    consecutive source samples (the last gap is the stratum width).  The 2D
    prediction uses the opacity-normalized point so low-opacity rays do not
    shrink toward the origin.
    """
    n, k, _ = mapped.shape
    if samples_src.shape != mapped.shape:
        raise ValueError(f"sample count mismatch: {samples_src.shape} vs {mapped.shape}")
    sigma, color = model.query_canonical(canonical.reshape(n * k, 3))
    sigma = sigma.reshape(n, k)
    color = color.reshape(n, k, 3)

    depths = samples_src[:, :, 2]
    stratum = 2.0 / k
    deltas = torch.cat(
        [depths[:, 1:] - depths[:, :-1],
         torch.full((n, 1), stratum, dtype=depths.dtype)], dim=1
    )
    alpha = 1.0 - torch.exp(-sigma * deltas)
    trans = torch.cumprod(
        torch.cat([torch.ones(n, 1, dtype=alpha.dtype), 1.0 - alpha], dim=1), dim=1
    )[:, :-1]
    weights = trans * alpha  # (N, K)
    acc = weights.sum(dim=1)

    x_hat = (weights[:, :, None] * mapped).sum(dim=1)
    c_hat = (weights[:, :, None] * color).sum(dim=1)

    eps = 1e-8
    degenerate = acc < eps
    norm = torch.clamp(acc, min=eps)
    p_norm = x_hat[:, 0:2] / norm[:, None]
    p_pix = norm_to_pixels(p_norm, width, height)
    return CompositeResult(x_hat=x_hat, p=p_pix, color=c_hat, acc=acc, degenerate=degenerate)


def predict(
    p_i: torch.Tensor,
    src_frame,
    dst_frame,
    model: MotionModel,
    width: int,
    height: int,
    num_samples: int = 32,
    train: bool = False,
    rng: np.random.Generator | None = None,
    visibility_threshold: float = 0.5,
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor, torch.Tensor]:
    """Full pipeline: lift -> map_chain -> composite.

    Returns (p_j (N,2), color (N,3), visible (N,) bool, acc (N,)).
    """
    samples = lift(p_i, width, height, num_samples, train=train, rng=rng)
    mapped, canonical = map_chain(samples, src_frame, dst_frame, model)
    result = composite(samples, mapped, canonical, model, width, height)
    visible = (result.acc >= visibility_threshold) & ~result.degenerate
    return result.p, result.color, visible, result.acc
