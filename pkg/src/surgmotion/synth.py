"""Synthetic sequences with analytic ground truth.

Stands in for the (non-redistributable) surgical videos: a textured rigid
square (tool proxy, instance label 1) moves over a sinusoidally deforming
textured background (tissue proxy).  Trajectories, visibility, flow fields,
matches, and masks all derive from the same analytic motion, so the rest of
the pipeline cannot distinguish synthetic from real data.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .data import (
    OCCLUDED, OUT_OF_VIEW, VISIBLE,
    TrackedPoint, TrajectorySet, VideoSequence, save_sequence, save_trajectories,
)
from .supervision import FlowField, MatchSet, save_flow_pair, save_matches


@dataclass
class Occluder:
    """Static opaque bar: x range, y range, active frame range (inclusive)."""

    x0: float
    x1: float
    y0: float
    y1: float
    frame_start: int = 0
    frame_end: int = 10 ** 9

    def covers(self, x: float, y: float, frame: int) -> bool:
        return (self.frame_start <= frame <= self.frame_end
                and self.x0 <= x <= self.x1 and self.y0 <= y <= self.y1)


@dataclass
class SceneSpec:
    width: int = 64
    height: int = 64
    num_frames: int = 24
    # background deformation: displacement A*sin(2*pi*freq*y/H + phase_vel*t)
    warp_amplitude: float = 1.5
    warp_frequency: float = 1.0
    warp_phase_velocity: float = 0.35
    # rigid square (tool proxy)
    square_size: float = 18.0
    square_center: tuple[float, float] = (20.0, 32.0)
    square_velocity: tuple[float, float] = (1.0, 0.25)
    square_rotation_rate: float = 0.02  # radians per frame
    occluders: list[Occluder] = field(default_factory=list)
    noise_level: float = 0.0
    num_tool_points: int = 10
    num_tissue_points: int = 15
    seed: int = 0
    flow_offsets: tuple[int, ...] = (1, 2, 4, 8)
    matches_per_pair: int = 80
    match_frame_stride: int = 4


# -- analytic motion -----------------------------------------------------
# Material coordinates q are positions in frame 0.  Background points move by
# a global sinusoidal displacement field evaluated at q; square points move
# rigidly.  Both forward maps are exact; the background inverse is solved by
# fixed-point iteration, which contracts fast because the displacement varies
# slowly with q, and reaches machine precision well within the iteration cap.


def _bg_displacement(q: np.ndarray, t: int, spec: SceneSpec) -> np.ndarray:
    phase = 2 * np.pi * spec.warp_frequency * q[..., 1] / spec.height + spec.warp_phase_velocity * t
    dx = spec.warp_amplitude * np.sin(phase)
    dy = 0.5 * spec.warp_amplitude * np.cos(phase)
    return np.stack([dx, dy], axis=-1)


def _bg_forward(q: np.ndarray, t: int, spec: SceneSpec) -> np.ndarray:
    return q + _bg_displacement(q, t, spec)


def _bg_inverse(x: np.ndarray, t: int, spec: SceneSpec, iters: int = 25) -> np.ndarray:
    q = x.copy()
    for _ in range(iters):
        q = x - _bg_displacement(q, t, spec)
    return q


def _square_pose(t: int, spec: SceneSpec):
    cx0, cy0 = spec.square_center
    vx, vy = spec.square_velocity
    theta = spec.square_rotation_rate * t
    center = np.array([cx0 + vx * t, cy0 + vy * t])
    rot = np.array([[np.cos(theta), -np.sin(theta)], [np.sin(theta), np.cos(theta)]])
    return center, rot


def _square_forward(q: np.ndarray, t: int, spec: SceneSpec) -> np.ndarray:
    c0 = np.asarray(spec.square_center)
    center, rot = _square_pose(t, spec)
    return (q - c0) @ rot.T + center


def _square_inverse(x: np.ndarray, t: int, spec: SceneSpec) -> np.ndarray:
    c0 = np.asarray(spec.square_center)
    center, rot = _square_pose(t, spec)
    return (x - center) @ rot + c0


def _in_square_material(q: np.ndarray, spec: SceneSpec) -> np.ndarray:
    """Inside-test in material (frame 0) coordinates."""
    c0 = np.asarray(spec.square_center)
    half = spec.square_size / 2
    rel = np.abs(q - c0)
    return (rel[..., 0] <= half) & (rel[..., 1] <= half)


def _point_forward(q: np.ndarray, on_square: np.ndarray, t: int, spec: SceneSpec) -> np.ndarray:
    out = _bg_forward(q, t, spec)
    if on_square.any():
        out[on_square] = _square_forward(q[on_square], t, spec)
    return out


def _bandlimited_texture(shape: tuple[int, int], rng: np.random.Generator,
                         smooth: float = 1.5) -> np.ndarray:
    tex = rng.random((*shape, 3))
    for c in range(3):
        tex[..., c] = ndimage.gaussian_filter(tex[..., c], smooth, mode="wrap")
    lo, hi = tex.min(), tex.max()
    return ((tex - lo) / (hi - lo + 1e-12)).astype(np.float64)


@dataclass
class SyntheticScene:
    sequence: VideoSequence
    ground_truth: TrajectorySet
    flows: list[FlowField]
    matches: list[MatchSet]


def _pixel_grid(h: int, w: int) -> np.ndarray:
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    return np.stack([xs + 0.5, ys + 0.5], axis=-1)


def _bilinear_wrap(img: np.ndarray, xy: np.ndarray) -> np.ndarray:
    h, w = img.shape[:2]
    x = np.mod(xy[..., 0] - 0.5, w)
    y = np.mod(xy[..., 1] - 0.5, h)
    x0 = np.floor(x).astype(int) % w
    y0 = np.floor(y).astype(int) % h
    x1 = (x0 + 1) % w
    y1 = (y0 + 1) % h
    fx = (x - np.floor(x))[..., None]
    fy = (y - np.floor(y))[..., None]
    top = img[y0, x0] * (1 - fx) + img[y0, x1] * fx
    bot = img[y1, x0] * (1 - fx) + img[y1, x1] * fx
    return top * (1 - fy) + bot * fy


def _material_at(x: np.ndarray, t: int, spec: SceneSpec):
    """Material coordinate + square membership of each rendered pixel.

    The square occludes the background wherever its footprint lands.
    """
    q_sq = _square_inverse(x, t, spec)
    on_sq = _in_square_material(q_sq, spec)
    q_bg = _bg_inverse(x, t, spec)
    q = np.where(on_sq[..., None], q_sq, q_bg)
    return q, on_sq


def generate(spec: SceneSpec) -> SyntheticScene:
    """Render the scene and derive all ground truth analytically."""
    rng = np.random.default_rng(spec.seed)
    h, w = spec.height, spec.width
    bg_tex = _bandlimited_texture((h, w), rng)
    sq_tex = _bandlimited_texture((h, w), rng) * np.array([1.0, 0.75, 0.55])  # warm tint

    grid = _pixel_grid(h, w)
    frames, masks = [], []
    for t in range(spec.num_frames):
        q, on_sq = _material_at(grid, t, spec)
        img = np.where(on_sq[..., None], _bilinear_wrap(sq_tex, q), _bilinear_wrap(bg_tex, q))
        for occ in spec.occluders:
            if occ.frame_start <= t <= occ.frame_end:
                cover = ((grid[..., 0] >= occ.x0) & (grid[..., 0] <= occ.x1)
                         & (grid[..., 1] >= occ.y0) & (grid[..., 1] <= occ.y1))
                img[cover] = 0.1
                on_sq = on_sq & ~cover
        if spec.noise_level > 0:
            img = img + rng.normal(0, spec.noise_level, img.shape)
        frames.append(np.clip(img, 0, 1).astype(np.float32))
        masks.append(on_sq.astype(np.uint8))

    seq = VideoSequence(name=f"synth_{spec.seed}", width=w, height=h,
                        frames=frames, masks=masks)

    gt = _ground_truth_points(spec, rng)
    flows = _ground_truth_flows(spec)
    matches = _ground_truth_matches(spec, rng)
    return SyntheticScene(sequence=seq, ground_truth=gt, flows=flows, matches=matches)


def _visibility(x: np.ndarray, on_square: bool, t: int, spec: SceneSpec) -> str:
    if not (0 <= x[0] < spec.width and 0 <= x[1] < spec.height):
        return OUT_OF_VIEW
    for occ in spec.occluders:
        if occ.covers(x[0], x[1], t):
            return OCCLUDED
    if not on_square:
        # square footprint occludes background points
        q_sq = _square_inverse(x[None, :], t, spec)
        if _in_square_material(q_sq, spec)[0]:
            return OCCLUDED
    return VISIBLE


def _ground_truth_points(spec: SceneSpec, rng: np.random.Generator) -> TrajectorySet:
    half = spec.square_size / 2 - 2.0
    c0 = np.asarray(spec.square_center)
    tool_q = c0 + rng.uniform(-half, half, (spec.num_tool_points, 2))
    margin = 4.0
    tissue_q = []
    while len(tissue_q) < spec.num_tissue_points:
        q = rng.uniform([margin, margin],
                        [spec.width - margin, spec.height - margin], (1, 2))[0]
        if not _in_square_material(q[None, :], spec)[0]:
            tissue_q.append(q)
    tissue_q = np.array(tissue_q)

    points = []
    pid = 0
    for qs, cat, instr in ((tool_q, "tool", 1), (tissue_q, "tissue", None)):
        for q in qs:
            positions, visibility = [], []
            for t in range(spec.num_frames):
                on_sq = cat == "tool"
                x = _point_forward(q[None, :], np.array([on_sq]), t, spec)[0]
                vis = _visibility(x, on_sq, t, spec)
                if vis == OUT_OF_VIEW:
                    positions.append(None)
                else:
                    positions.append((float(x[0]), float(x[1])))
                visibility.append(vis)
            points.append(TrackedPoint(id=pid, category=cat, instrument_id=instr,
                                       positions=positions, visibility=visibility))
            pid += 1
    return TrajectorySet(video=f"synth_{spec.seed}", width=spec.width,
                         height=spec.height, num_frames=spec.num_frames, points=points)


def _flow_between(i: int, j: int, spec: SceneSpec) -> FlowField:
    grid = _pixel_grid(spec.height, spec.width)
    q, on_sq = _material_at(grid, i, spec)
    x_j = _point_forward(q.reshape(-1, 2), on_sq.reshape(-1), j, spec).reshape(grid.shape)
    flow = (x_j - grid).astype(np.float32)
    return FlowField(i, j, flow, np.ones(grid.shape[:2], dtype=bool))


def _ground_truth_flows(spec: SceneSpec) -> list[FlowField]:
    flows = []
    for off in spec.flow_offsets:
        for i in range(spec.num_frames):
            for j in (i + off, i - off):
                if 0 <= j < spec.num_frames:
                    flows.append(_flow_between(i, j, spec))
    return flows


def _ground_truth_matches(spec: SceneSpec, rng: np.random.Generator) -> list[MatchSet]:
    matches = []
    for i in range(0, spec.num_frames, spec.match_frame_stride):
        for j in range(0, spec.num_frames, spec.match_frame_stride):
            if i == j:
                continue
            grid = _pixel_grid(spec.height, spec.width).reshape(-1, 2)
            idx = rng.choice(len(grid), size=spec.matches_per_pair, replace=False)
            x_i = grid[idx]
            q, on_sq = _material_at(x_i, i, spec)
            x_j = _point_forward(q, on_sq, j, spec)
            inside = ((x_j[:, 0] >= 0) & (x_j[:, 0] < spec.width)
                      & (x_j[:, 1] >= 0) & (x_j[:, 1] < spec.height))
            # a matcher only pairs co-visible features: drop destinations
            # hidden behind the square or an occluder
            for k in np.flatnonzero(inside):
                if _visibility(x_j[k], bool(on_sq[k]), j, spec) != VISIBLE:
                    inside[k] = False
            rows = np.concatenate(
                [x_i[inside], x_j[inside], np.ones((inside.sum(), 1))], axis=1
            )
            matches.append(MatchSet(i, j, rows))
    return matches


@dataclass
class CorruptionSpec:
    """Noise/outliers applied to supervision at long frame offsets."""

    noise_sigma: float = 0.0
    outlier_fraction: float = 0.0
    outlier_magnitude: float = 10.0
    min_offset: int = 4  # only offsets >= this are corrupted
    seed: int = 0
    corrupt_matches: bool = False


def corrupt_supervision(
    flows: list[FlowField], matches: list[MatchSet], spec: CorruptionSpec
) -> tuple[list[FlowField], list[MatchSet]]:
    """Add Gaussian noise and gross outliers to long-offset supervision.

    Short-offset entries pass through untouched (bit-identical).
    """
    rng = np.random.default_rng(spec.seed)
    out_flows = []
    for f in flows:
        if abs(f.dst_frame - f.src_frame) < spec.min_offset:
            out_flows.append(f)
            continue
        flow = f.flow.astype(np.float64).copy()
        if spec.noise_sigma > 0:
            flow += rng.normal(0, spec.noise_sigma, flow.shape)
        if spec.outlier_fraction > 0:
            mask = rng.random(flow.shape[:2]) < spec.outlier_fraction
            angles = rng.uniform(0, 2 * np.pi, flow.shape[:2])
            offset = spec.outlier_magnitude * np.stack(
                [np.cos(angles), np.sin(angles)], axis=-1
            )
            flow[mask] += offset[mask]
        out_flows.append(FlowField(f.src_frame, f.dst_frame,
                                   flow.astype(np.float32), f.valid.copy()))
    out_matches = []
    for m in matches:
        if not spec.corrupt_matches or abs(m.dst_frame - m.src_frame) < spec.min_offset:
            out_matches.append(m)
            continue
        rows = m.matches.copy()
        if spec.noise_sigma > 0:
            rows[:, 2:4] += rng.normal(0, spec.noise_sigma, rows[:, 2:4].shape)
        if spec.outlier_fraction > 0:
            sel = rng.random(len(rows)) < spec.outlier_fraction
            rows[sel, 2:4] += rng.uniform(-spec.outlier_magnitude,
                                          spec.outlier_magnitude, (sel.sum(), 2))
        out_matches.append(MatchSet(m.src_frame, m.dst_frame, rows))
    return out_flows, out_matches


def write_scene(scene: SyntheticScene, out_dir: str | Path):
    """Emit the dataset-io directory layout plus flow/ and matches/."""
    out_dir = Path(out_dir)
    save_sequence(scene.sequence, out_dir)
    save_trajectories(scene.ground_truth, out_dir / "gt.json")
    for f in scene.flows:
        save_flow_pair(out_dir / "flow", f)
    for m in scene.matches:
        save_matches(out_dir / "matches", m)
