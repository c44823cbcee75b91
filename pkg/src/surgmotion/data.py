"""Video sequences, point trajectories, and their on-disk formats.

Coordinates are continuous pixel positions with the origin at the top-left
corner of the top-left pixel, so (0.5, 0.5) is the center of pixel (0, 0).
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

VISIBLE = "visible"
OCCLUDED = "occluded"
OUT_OF_VIEW = "out_of_view"
VISIBILITY_FLAGS = (VISIBLE, OCCLUDED, OUT_OF_VIEW)


class DataError(ValueError):
    """Raised for malformed inputs or invariant violations."""


@dataclass
class VideoSequence:
    """Ordered RGB frames plus optional per-frame instrument instance masks.

    Frames are float32 arrays of shape (H, W, 3) in [0, 1].  Masks are uint8
    arrays of shape (H, W): 0 is background/tissue, k >= 1 is instrument
    instance k.  Binarize with ``mask > 0``.
    """

    name: str
    width: int
    height: int
    frames: list[np.ndarray]
    masks: list[np.ndarray] | None = None

    def __post_init__(self):
        if len(self.frames) < 2:
            raise DataError(f"sequence {self.name!r} needs >= 2 frames, got {len(self.frames)}")
        for i, fr in enumerate(self.frames):
            if fr.shape[:2] != (self.height, self.width):
                raise DataError(
                    f"frame {i} has shape {fr.shape[:2]}, expected {(self.height, self.width)}"
                )
        if self.masks is not None:
            if len(self.masks) != len(self.frames):
                raise DataError(
                    f"{len(self.masks)} masks for {len(self.frames)} frames"
                )
            for i, m in enumerate(self.masks):
                if m.shape != (self.height, self.width):
                    raise DataError(
                        f"mask {i} has shape {m.shape}, expected {(self.height, self.width)}"
                    )

    @property
    def num_frames(self) -> int:
        return len(self.frames)

    def binary_mask(self, frame: int) -> np.ndarray:
        """Tool-vs-rest binarization of the instance mask (label > 0)."""
        if self.masks is None:
            raise DataError(f"sequence {self.name!r} has no masks")
        return self.masks[frame] > 0


@dataclass
class TrackedPoint:
    """One tracked point: per-frame position and visibility flag."""

    id: int
    category: str  # "tool" | "tissue"
    positions: list[tuple[float, float] | None]
    visibility: list[str]
    instrument_id: int | None = None


@dataclass
class TrajectorySet:
    """Per-point positions and visibility over all frames.

    Serves both ground-truth annotations and tracker output.
    """

    video: str
    width: int
    height: int
    num_frames: int
    points: list[TrackedPoint] = field(default_factory=list)

    def __post_init__(self):
        self.validate()

    def validate(self):
        for pt in self.points:
            if len(pt.positions) != self.num_frames or len(pt.visibility) != self.num_frames:
                raise DataError(
                    f"point {pt.id}: expected {self.num_frames} entries, got "
                    f"{len(pt.positions)} positions / {len(pt.visibility)} flags"
                )
            if pt.category not in ("tool", "tissue"):
                raise DataError(f"point {pt.id}: unknown category {pt.category!r}")
            for f, (pos, vis) in enumerate(zip(pt.positions, pt.visibility)):
                if vis not in VISIBILITY_FLAGS:
                    raise DataError(f"point {pt.id} frame {f}: unknown flag {vis!r}")
                if vis == VISIBLE:
                    if pos is None:
                        raise DataError(f"point {pt.id} frame {f}: visible but no position")
                    x, y = pos
                    if not (0 <= x < self.width and 0 <= y < self.height):
                        raise DataError(
                            f"point {pt.id} frame {f}: visible position {pos} outside "
                            f"{self.width}x{self.height}"
                        )

    def first_visible_frame(self, point_id: int) -> int | None:
        for pt in self.points:
            if pt.id == point_id:
                for f, vis in enumerate(pt.visibility):
                    if vis == VISIBLE:
                        return f
                return None
        raise DataError(f"no point with id {point_id}")


@dataclass
class Query:
    point_id: int
    frame: int
    x: float
    y: float


@dataclass
class QuerySpec:
    """First visible location of each point to be tracked."""

    queries: list[Query]

    @classmethod
    def from_trajectories(cls, traj: TrajectorySet) -> "QuerySpec":
        """Standard TAP convention: query at each point's first visible frame."""
        queries = []
        for pt in traj.points:
            f = traj.first_visible_frame(pt.id)
            if f is None:
                continue
            x, y = pt.positions[f]
            queries.append(Query(pt.id, f, x, y))
        return cls(queries)


def _load_image_dir(dir_path: Path) -> list[np.ndarray]:
    files = sorted(dir_path.glob("*.png")) + sorted(dir_path.glob("*.jpg"))
    if not files:
        raise DataError(f"no images in {dir_path}")
    indices = []
    for p in files:
        m = re.fullmatch(r"(\d+)", p.stem)
        if not m:
            raise DataError(f"frame filename {p.name} is not a zero-padded index")
        indices.append(int(m.group(1)))
    order = np.argsort(indices)
    sorted_idx = [indices[i] for i in order]
    if sorted_idx != list(range(sorted_idx[0], sorted_idx[0] + len(sorted_idx))):
        raise DataError(f"non-contiguous frame numbering in {dir_path}: {sorted_idx}")
    return [np.asarray(Image.open(files[i])) for i in order]


def load_sequence(dir_path: str | Path) -> VideoSequence:
    """Load ``<dir>/frames/%05d.png`` (+ optional ``masks/``) into a VideoSequence."""
    dir_path = Path(dir_path)
    frames_dir = dir_path / "frames"
    if not frames_dir.is_dir():
        raise DataError(f"missing frames directory: {frames_dir}")
    raw = _load_image_dir(frames_dir)
    frames = []
    for img in raw:
        if img.ndim == 2:
            img = np.stack([img] * 3, axis=-1)
        frames.append(img[..., :3].astype(np.float32) / 255.0)
    h, w = frames[0].shape[:2]

    masks = None
    masks_dir = dir_path / "masks"
    if masks_dir.is_dir():
        masks = []
        for m in _load_image_dir(masks_dir):
            if m.ndim == 3:
                m = m[..., 0]
            masks.append(m.astype(np.uint8))

    return VideoSequence(name=dir_path.name, width=w, height=h, frames=frames, masks=masks)


def save_sequence(seq: VideoSequence, dir_path: str | Path):
    """Write the dataset directory layout (frames/%05d.png, masks/%05d.png)."""
    dir_path = Path(dir_path)
    (dir_path / "frames").mkdir(parents=True, exist_ok=True)
    for i, fr in enumerate(seq.frames):
        img = np.clip(fr * 255.0 + 0.5, 0, 255).astype(np.uint8)
        Image.fromarray(img).save(dir_path / "frames" / f"{i:05d}.png")
    if seq.masks is not None:
        (dir_path / "masks").mkdir(exist_ok=True)
        for i, m in enumerate(seq.masks):
            Image.fromarray(m, mode="L").save(dir_path / "masks" / f"{i:05d}.png")


def load_trajectories(file: str | Path) -> TrajectorySet:
    """Load the annotation/trajectory JSON schema (ground truth or tracker output)."""
    file = Path(file)
    try:
        doc = json.loads(file.read_text())
    except json.JSONDecodeError as e:
        raise DataError(f"{file}: not valid JSON ({e})") from e
    try:
        points = []
        for rec in doc["points"]:
            positions = [None if p is None else (float(p[0]), float(p[1])) for p in rec["positions"]]
            visibility = [str(v).lower() for v in rec["visibility"]]
            points.append(
                TrackedPoint(
                    id=int(rec["id"]),
                    category=str(rec["category"]).lower(),
                    instrument_id=rec.get("instrument_id"),
                    positions=positions,
                    visibility=visibility,
                )
            )
        return TrajectorySet(
            video=doc["video"],
            width=int(doc["width"]),
            height=int(doc["height"]),
            num_frames=int(doc["num_frames"]),
            points=points,
        )
    except (KeyError, TypeError, IndexError) as e:
        raise DataError(f"{file}: malformed record ({e!r})") from e


def save_trajectories(traj: TrajectorySet, file: str | Path):
    """Write the trajectory JSON schema; round-trips through load_trajectories."""
    traj.validate()
    doc = {
        "video": traj.video,
        "width": traj.width,
        "height": traj.height,
        "num_frames": traj.num_frames,
        "points": [
            {
                "id": pt.id,
                "category": pt.category,
                "instrument_id": pt.instrument_id,
                "positions": [None if p is None else [p[0], p[1]] for p in pt.positions],
                "visibility": list(pt.visibility),
            }
            for pt in traj.points
        ],
    }
    Path(file).write_text(json.dumps(doc, indent=1))


def resize_for_eval(traj: TrajectorySet, target: tuple[int, int]) -> TrajectorySet:
    """Rescale coordinates to a target resolution (per-axis, visibility unchanged)."""
    tw, th = target
    if tw <= 0 or th <= 0:
        raise DataError(f"zero-dimension target {target}")
    sx = tw / traj.width
    sy = th / traj.height
    points = [
        TrackedPoint(
            id=pt.id,
            category=pt.category,
            instrument_id=pt.instrument_id,
            positions=[None if p is None else (p[0] * sx, p[1] * sy) for p in pt.positions],
            visibility=list(pt.visibility),
        )
        for pt in traj.points
    ]
    return TrajectorySet(
        video=traj.video, width=tw, height=th, num_frames=traj.num_frames, points=points
    )
