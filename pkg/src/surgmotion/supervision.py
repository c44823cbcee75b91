"""Correspondence supervision: flow/match ingestion, filtering, batch sampling.

Flow and feature matches are precomputed elsewhere and ingested from files;
this module owns the reliability filters and the training-batch sampler.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .data import DataError, VideoSequence

log = logging.getLogger(__name__)

FLO_MAGIC = 202021.25


class SupervisionError(ValueError):
    """Raised for inconsistent or empty supervision inputs."""


def bilinear_sample(img: np.ndarray, xy: np.ndarray) -> np.ndarray:
    """Sample ``img`` (H, W[, C]) at continuous pixel coordinates ``xy`` (N, 2).

    Coordinates follow the half-pixel convention: (0.5, 0.5) is the center
    of pixel (0, 0).  Samples are clamped to the image border.
    """
    h, w = img.shape[:2]
    x = np.clip(xy[:, 0] - 0.5, 0.0, w - 1.0)
    y = np.clip(xy[:, 1] - 0.5, 0.0, h - 1.0)
    x0 = np.floor(x).astype(int)
    y0 = np.floor(y).astype(int)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = (x - x0)[..., None] if img.ndim == 3 else x - x0
    fy = (y - y0)[..., None] if img.ndim == 3 else y - y0
    top = img[y0, x0] * (1 - fx) + img[y0, x1] * fx
    bot = img[y1, x0] * (1 - fx) + img[y1, x1] * fx
    return top * (1 - fy) + bot * fy


@dataclass
class FlowField:
    """Dense flow (dx, dy) between an ordered frame pair, with validity mask."""

    src_frame: int
    dst_frame: int
    flow: np.ndarray  # (H, W, 2) float32
    valid: np.ndarray  # (H, W) bool

    def __post_init__(self):
        if self.src_frame == self.dst_frame:
            raise SupervisionError("flow src and dst frames must differ")
        if self.flow.shape[:2] != self.valid.shape or self.flow.shape[2] != 2:
            raise SupervisionError(
                f"flow shape {self.flow.shape} inconsistent with valid {self.valid.shape}"
            )


@dataclass
class MatchSet:
    """Sparse feature matches between an ordered frame pair."""

    src_frame: int
    dst_frame: int
    matches: np.ndarray  # (N, 5): x_i, y_i, x_j, y_j, confidence

    def __post_init__(self):
        self.matches = np.asarray(self.matches, dtype=np.float64).reshape(-1, 5)
        conf = self.matches[:, 4]
        if len(conf) and (conf.min() < 0 or conf.max() > 1):
            raise SupervisionError("match confidence outside [0, 1]")


def read_flo(path: str | Path) -> np.ndarray:
    """Read a Middlebury .flo file into an (H, W, 2) float32 array."""
    data = Path(path).read_bytes()
    magic, w, h = struct.unpack("<fii", data[:12])
    if abs(magic - FLO_MAGIC) > 1e-3:
        raise SupervisionError(f"{path}: bad .flo magic {magic}")
    flow = np.frombuffer(data[12:], dtype="<f4", count=h * w * 2)
    return flow.reshape(h, w, 2).copy()


def write_flo(path: str | Path, flow: np.ndarray):
    h, w = flow.shape[:2]
    with open(path, "wb") as f:
        f.write(struct.pack("<fii", FLO_MAGIC, w, h))
        f.write(flow.astype("<f4").tobytes())


def load_flow_pair(flow_dir: str | Path, src: int, dst: int) -> FlowField:
    """Load ``flow/%05d_%05d.flo`` plus the optional validity PNG."""
    flow_dir = Path(flow_dir)
    flow = read_flo(flow_dir / f"{src:05d}_{dst:05d}.flo")
    valid_path = flow_dir / f"{src:05d}_{dst:05d}.valid.png"
    if valid_path.exists():
        valid = np.asarray(Image.open(valid_path)) > 0
        if valid.ndim == 3:
            valid = valid[..., 0]
    else:
        valid = np.ones(flow.shape[:2], dtype=bool)
    return FlowField(src, dst, flow, valid)


def save_flow_pair(flow_dir: str | Path, f: FlowField):
    flow_dir = Path(flow_dir)
    flow_dir.mkdir(parents=True, exist_ok=True)
    write_flo(flow_dir / f"{f.src_frame:05d}_{f.dst_frame:05d}.flo", f.flow)
    if not f.valid.all():
        Image.fromarray((f.valid * 255).astype(np.uint8), mode="L").save(
            flow_dir / f"{f.src_frame:05d}_{f.dst_frame:05d}.valid.png"
        )


def load_matches(match_dir: str | Path, src: int, dst: int) -> MatchSet:
    """Load ``matches/%05d_%05d.txt`` (one line per match: x_i y_i x_j y_j conf)."""
    path = Path(match_dir) / f"{src:05d}_{dst:05d}.txt"
    rows = []
    for ln, line in enumerate(path.read_text().splitlines()):
        line = line.strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 5:
            raise SupervisionError(f"{path}:{ln + 1}: expected 5 fields, got {len(parts)}")
        rows.append([float(v) for v in parts])
    return MatchSet(src, dst, np.array(rows, dtype=np.float64).reshape(-1, 5))


def save_matches(match_dir: str | Path, m: MatchSet):
    match_dir = Path(match_dir)
    match_dir.mkdir(parents=True, exist_ok=True)
    lines = [" ".join(f"{v:.6f}" for v in row) for row in m.matches]
    (match_dir / f"{m.src_frame:05d}_{m.dst_frame:05d}.txt").write_text("\n".join(lines) + ("\n" if lines else ""))


def _pixel_grid(h: int, w: int) -> np.ndarray:
    """Pixel-center coordinates, shape (H, W, 2)."""
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    return np.stack([xs + 0.5, ys + 0.5], axis=-1)


def cycle_filter(fwd: FlowField, bwd: FlowField, tau: float) -> FlowField:
    """Keep pixels where forward and backward flow cancel within ``tau`` px.

    A pixel p survives iff |fwd(p) + bwd(p + fwd(p))| <= tau, with the
    backward flow sampled bilinearly at the forward endpoint.
    """
    if fwd.src_frame != bwd.dst_frame or fwd.dst_frame != bwd.src_frame:
        raise SupervisionError(
            f"cycle_filter frame-pair mismatch: fwd {fwd.src_frame}->{fwd.dst_frame}, "
            f"bwd {bwd.src_frame}->{bwd.dst_frame}"
        )
    h, w = fwd.flow.shape[:2]
    grid = _pixel_grid(h, w)
    endpoints = (grid + fwd.flow).reshape(-1, 2)
    bwd_at_end = bilinear_sample(bwd.flow.astype(np.float64), endpoints).reshape(h, w, 2)
    err = np.linalg.norm(fwd.flow + bwd_at_end, axis=-1)
    return FlowField(fwd.src_frame, fwd.dst_frame, fwd.flow, fwd.valid & (err <= tau))


def appearance_filter(seq: VideoSequence, f: FlowField, tau_rgb: float) -> FlowField:
    """Keep pixels whose color survives the flow within ``tau_rgb`` (max over channels)."""
    if not (0 <= f.src_frame < seq.num_frames and 0 <= f.dst_frame < seq.num_frames):
        raise SupervisionError(f"flow frames {f.src_frame},{f.dst_frame} outside sequence")
    h, w = f.flow.shape[:2]
    grid = _pixel_grid(h, w)
    src_rgb = seq.frames[f.src_frame].reshape(-1, 3)
    dst_rgb = bilinear_sample(
        seq.frames[f.dst_frame].astype(np.float64), (grid + f.flow).reshape(-1, 2)
    )
    diff = np.abs(src_rgb - dst_rgb).max(axis=-1).reshape(h, w)
    return FlowField(f.src_frame, f.dst_frame, f.flow, f.valid & (diff <= tau_rgb))


@dataclass
class Correspondences:
    """Filtered correspondences for one ordered frame pair."""

    src_frame: int
    dst_frame: int
    p_src: np.ndarray  # (N, 2)
    p_dst: np.ndarray  # (N, 2)
    weight: np.ndarray  # (N,)
    provenance: str  # "flow" | "match"


@dataclass
class StoreConfig:
    cycle_tau: float = 3.0
    rgb_tau: float = 0.15
    min_confidence: float = 0.5
    flow_offsets: tuple[int, ...] = (1, 2, 4, 8)


@dataclass
class SupervisionStore:
    """Immutable pool of filtered correspondences, keyed by ordered frame pair."""

    flow_pairs: list[Correspondences] = field(default_factory=list)
    match_pairs: list[Correspondences] = field(default_factory=list)

    @property
    def frame_pairs(self) -> list[tuple[int, int]]:
        seen = []
        for c in self.flow_pairs + self.match_pairs:
            key = (c.src_frame, c.dst_frame)
            if key not in seen:
                seen.append(key)
        return seen


def build_store(
    seq: VideoSequence,
    flows: list[FlowField],
    matches: list[MatchSet],
    cfg: StoreConfig | None = None,
) -> SupervisionStore:
    """Assemble the training pool from filtered flow plus confidence-thresholded matches.

    Flow fields are expected already cycle/appearance filtered (their ``valid``
    masks encode the result).  Matches deliberately bypass those filters: they
    exist to recover long-range pairs the filters destroy.
    """
    cfg = cfg or StoreConfig()
    store = SupervisionStore()
    h, w = seq.height, seq.width
    grid = _pixel_grid(h, w).reshape(-1, 2)
    for f in flows:
        keep = f.valid.reshape(-1)
        if not keep.any():
            continue
        p_src = grid[keep]
        p_dst = p_src + f.flow.reshape(-1, 2)[keep]
        store.flow_pairs.append(
            Correspondences(
                f.src_frame, f.dst_frame, p_src, p_dst,
                np.ones(len(p_src)), "flow",
            )
        )
    for m in matches:
        keep = m.matches[:, 4] >= cfg.min_confidence
        if not keep.any():
            continue
        rows = m.matches[keep]
        store.match_pairs.append(
            Correspondences(
                m.src_frame, m.dst_frame, rows[:, 0:2], rows[:, 2:4],
                rows[:, 4], "match",
            )
        )
    if not store.flow_pairs and not store.match_pairs:
        raise SupervisionError("empty supervision store: no flow or match correspondences survived")
    return store


@dataclass
class BatchPair:
    frame_i: int
    frame_j: int
    p_i: np.ndarray  # (2,)
    p_j_target: np.ndarray  # (2,)
    provenance: str


@dataclass
class TrainingBatch:
    pairs: list[BatchPair]

    def by_provenance(self, provenance: str) -> list[BatchPair]:
        return [p for p in self.pairs if p.provenance == provenance]


def sample_batch(
    store: SupervisionStore,
    rng_seed: int,
    frame_pairs: int = 8,
    flow_points: int = 192,
    match_points: int = 64,
) -> TrainingBatch:
    """Draw a deterministic batch: frame pairs uniformly, then points within them.

    Points are drawn with replacement when a pool is smaller than its quota.
    """
    rng = np.random.default_rng(rng_seed)
    if flow_points > 0 and not store.flow_pairs:
        raise SupervisionError("flow_points quota > 0 but the flow pool is empty")
    if match_points > 0 and not store.match_pairs:
        raise SupervisionError("match_points quota > 0 but the match pool is empty")

    all_keys = store.frame_pairs
    n_pairs = min(frame_pairs, len(all_keys))
    chosen = [all_keys[i] for i in rng.choice(len(all_keys), size=n_pairs, replace=False)]

    def draw(pools: list[Correspondences], quota: int, name: str) -> list[BatchPair]:
        if quota == 0:
            return []
        active = [c for c in pools if (c.src_frame, c.dst_frame) in chosen]
        if not active:
            active = pools  # chosen pairs may lack this provenance; fall back to the full pool
        sizes = np.array([len(c.p_src) for c in active])
        cum = np.cumsum(sizes)
        idx = rng.integers(0, cum[-1], size=quota)
        out = []
        for k in idx:
            ci = int(np.searchsorted(cum, k, side="right"))
            local = int(k - (cum[ci - 1] if ci else 0))
            c = active[ci]
            out.append(
                BatchPair(c.src_frame, c.dst_frame, c.p_src[local].copy(),
                          c.p_dst[local].copy(), name)
            )
        return out

    pairs = draw(store.flow_pairs, flow_points, "flow") + draw(store.match_pairs, match_points, "match")
    return TrainingBatch(pairs)
