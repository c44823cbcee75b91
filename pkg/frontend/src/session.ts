/**
 * Annotation session state and edit operations.
 *
 * Every edit goes through a recorded action so undo/redo can restore the
 * exact prior state; navigation (frame stepping, point selection) is not an
 * edit and is not recorded. Export refuses to produce a document that would
 * fail the trajectory schema invariants, listing each offending cell.
 */

import {
  OCCLUDED,
  OUT_OF_VIEW,
  VISIBLE,
  VISIBILITY_FLAGS,
  type Category,
  type Position,
  type TrackedPoint,
  type TrajectorySet,
  type Visibility,
  serializeTrajectories,
  trajectoriesEqual,
  validateTrajectories,
} from "./trajectories.js";

export class SessionError extends Error {}

export interface PointDef {
  id: number;
  category: Category;
  instrumentId?: number | null;
}

/** One point/frame cell as it was before or after an edit. */
interface CellState {
  pointId: number;
  frame: number;
  position: Position;
  visibility: Visibility;
}

export interface Action {
  label: string;
  before: CellState;
  after: CellState;
}

export interface AnnotationSession {
  /** Frame image sources, in display order; length fixes num_frames. */
  frames: string[];
  trajectories: TrajectorySet;
  currentFrame: number;
  selectedPoint: number | null;
  undoStack: Action[];
  redoStack: Action[];
}

export function createSession(
  video: string,
  width: number,
  height: number,
  frames: string[],
  points: PointDef[],
): AnnotationSession {
  const tracked: TrackedPoint[] = points.map((p) => ({
    id: p.id,
    category: p.category,
    instrumentId: p.instrumentId ?? null,
    positions: frames.map(() => null),
    visibility: frames.map(() => OUT_OF_VIEW as Visibility),
  }));
  const trajectories: TrajectorySet = {
    video,
    width,
    height,
    numFrames: frames.length,
    points: tracked,
  };
  return {
    frames,
    trajectories,
    currentFrame: 0,
    selectedPoint: points.length > 0 ? points[0]!.id : null,
    undoStack: [],
    redoStack: [],
  };
}

/** Rebuild a session from a previously exported trajectory set. */
export function sessionFromTrajectories(traj: TrajectorySet, frames: string[]): AnnotationSession {
  if (frames.length !== traj.numFrames) {
    throw new SessionError(
      `trajectory set covers ${traj.numFrames} frames but ${frames.length} were loaded`,
    );
  }
  const violations = validateTrajectories(traj);
  if (violations.length > 0) {
    throw new SessionError(`invalid trajectory set: ${violations.join("; ")}`);
  }
  return {
    frames,
    trajectories: {
      ...traj,
      points: traj.points.map((pt) => ({
        ...pt,
        positions: [...pt.positions],
        visibility: [...pt.visibility],
      })),
    },
    currentFrame: 0,
    selectedPoint: traj.points.length > 0 ? traj.points[0]!.id : null,
    undoStack: [],
    redoStack: [],
  };
}

function findPoint(session: AnnotationSession, pointId: number | null): TrackedPoint {
  if (pointId === null) {
    throw new SessionError("no point selected");
  }
  const pt = session.trajectories.points.find((p) => p.id === pointId);
  if (pt === undefined) {
    throw new SessionError(`unknown point ${pointId}`);
  }
  return pt;
}

function checkFrame(session: AnnotationSession, frame: number): void {
  if (!Number.isInteger(frame) || frame < 0 || frame >= session.frames.length) {
    throw new SessionError(`frame ${frame} not loaded (have ${session.frames.length})`);
  }
}

function snapshot(pt: TrackedPoint, frame: number): CellState {
  const pos = pt.positions[frame]!;
  return {
    pointId: pt.id,
    frame,
    position: pos === null ? null : [pos[0], pos[1]],
    visibility: pt.visibility[frame]!,
  };
}

function applyCell(session: AnnotationSession, cell: CellState): void {
  const pt = findPoint(session, cell.pointId);
  pt.positions[cell.frame] = cell.position === null ? null : [cell.position[0], cell.position[1]];
  pt.visibility[cell.frame] = cell.visibility;
}

function record(session: AnnotationSession, label: string, pt: TrackedPoint, frame: number, edit: () => void): void {
  const before = snapshot(pt, frame);
  edit();
  session.undoStack.push({ label, before, after: snapshot(pt, frame) });
  session.redoStack.length = 0;
}

/**
 * Place (or move) a point in a frame: sets its position and marks it visible.
 * Rejects out-of-canvas coordinates without touching the session.
 */
export function placePoint(
  session: AnnotationSession,
  frame: number,
  x: number,
  y: number,
  pointId: number | null = session.selectedPoint,
): AnnotationSession {
  checkFrame(session, frame);
  const pt = findPoint(session, pointId);
  const { width, height } = session.trajectories;
  if (!(Number.isFinite(x) && Number.isFinite(y) && x >= 0 && x < width && y >= 0 && y < height)) {
    throw new SessionError(`position (${x}, ${y}) outside canvas ${width}x${height}`);
  }
  record(session, `place point ${pt.id} @ frame ${frame}`, pt, frame, () => {
    pt.positions[frame] = [x, y];
    pt.visibility[frame] = VISIBLE;
  });
  return session;
}

/**
 * Set a point's visibility flag in a frame. Marking out-of-view clears the
 * stored position; marking occluded keeps it; marking visible requires a
 * position to already exist.
 */
export function setVisibility(
  session: AnnotationSession,
  frame: number,
  pointId: number,
  flag: Visibility,
): AnnotationSession {
  checkFrame(session, frame);
  const pt = findPoint(session, pointId);
  if (!VISIBILITY_FLAGS.includes(flag)) {
    throw new SessionError(`unknown visibility flag ${JSON.stringify(flag)}`);
  }
  if (flag === VISIBLE && pt.positions[frame] === null) {
    throw new SessionError(
      `point ${pt.id} frame ${frame}: cannot mark visible before a position is placed`,
    );
  }
  record(session, `set point ${pt.id} ${flag} @ frame ${frame}`, pt, frame, () => {
    pt.visibility[frame] = flag;
    if (flag === OUT_OF_VIEW) {
      pt.positions[frame] = null;
    }
  });
  return session;
}

/** Revert the most recent edit; returns false if there is nothing to undo. */
export function undo(session: AnnotationSession): boolean {
  const action = session.undoStack.pop();
  if (action === undefined) return false;
  applyCell(session, action.before);
  session.redoStack.push(action);
  return true;
}

/** Re-apply the most recently undone edit; false if there is nothing to redo. */
export function redo(session: AnnotationSession): boolean {
  const action = session.redoStack.pop();
  if (action === undefined) return false;
  applyCell(session, action.after);
  session.undoStack.push(action);
  return true;
}

/**
 * Export the working trajectory set as a schema-valid JSON document.
 * Blocked (with every violation named) if any invariant fails.
 */
export function exportSession(session: AnnotationSession): string {
  const violations = validateTrajectories(session.trajectories);
  if (violations.length > 0) {
    throw new SessionError(`export blocked: ${violations.join("; ")}`);
  }
  return serializeTrajectories(session.trajectories);
}

/** True when two sessions hold structurally identical annotations. */
export function sameAnnotations(a: AnnotationSession, b: AnnotationSession): boolean {
  return trajectoriesEqual(a.trajectories, b.trajectories);
}

export { OCCLUDED, OUT_OF_VIEW, VISIBLE };
