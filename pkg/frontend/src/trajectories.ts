/**
 * Trajectory JSON schema: per-point positions and visibility over all frames.
 *
 * This mirrors the harness's dataset format exactly, so annotation exports
 * load directly as ground truth. The serializer reproduces the harness's
 * writer byte-for-byte (one-space indent, `.0` suffix on integral floats,
 * ASCII-escaped strings), so re-saving an imported file is the identity.
 */

export const VISIBLE = "visible";
export const OCCLUDED = "occluded";
export const OUT_OF_VIEW = "out_of_view";
export type Visibility = typeof VISIBLE | typeof OCCLUDED | typeof OUT_OF_VIEW;
export const VISIBILITY_FLAGS: readonly Visibility[] = [VISIBLE, OCCLUDED, OUT_OF_VIEW];

export type Category = "tool" | "tissue";

/** Pixel position, or null when the point has no location in that frame. */
export type Position = readonly [number, number] | null;

export interface TrackedPoint {
  id: number;
  category: Category;
  instrumentId: number | null;
  positions: Position[];
  visibility: Visibility[];
}

export interface TrajectorySet {
  video: string;
  width: number;
  height: number;
  numFrames: number;
  points: TrackedPoint[];
}

export class SchemaError extends Error {}

/**
 * Check every schema invariant; returns one message per violation, each
 * naming the offending point/frame cell. Empty array means valid.
 */
export function validateTrajectories(traj: TrajectorySet): string[] {
  const violations: string[] = [];
  if (!Number.isInteger(traj.width) || traj.width <= 0) {
    violations.push(`width must be a positive integer, got ${traj.width}`);
  }
  if (!Number.isInteger(traj.height) || traj.height <= 0) {
    violations.push(`height must be a positive integer, got ${traj.height}`);
  }
  if (!Number.isInteger(traj.numFrames) || traj.numFrames <= 0) {
    violations.push(`num_frames must be a positive integer, got ${traj.numFrames}`);
  }
  const seen = new Set<number>();
  for (const pt of traj.points) {
    if (seen.has(pt.id)) {
      violations.push(`point ${pt.id}: duplicate id`);
    }
    seen.add(pt.id);
    if (pt.category !== "tool" && pt.category !== "tissue") {
      violations.push(`point ${pt.id}: unknown category ${JSON.stringify(pt.category)}`);
    }
    if (pt.positions.length !== traj.numFrames || pt.visibility.length !== traj.numFrames) {
      violations.push(
        `point ${pt.id}: expected ${traj.numFrames} entries, got ` +
          `${pt.positions.length} positions / ${pt.visibility.length} flags`,
      );
      continue;
    }
    for (let f = 0; f < traj.numFrames; f++) {
      const vis = pt.visibility[f]!;
      const pos = pt.positions[f]!;
      if (!VISIBILITY_FLAGS.includes(vis)) {
        violations.push(`point ${pt.id} frame ${f}: unknown flag ${JSON.stringify(vis)}`);
        continue;
      }
      if (vis === VISIBLE) {
        if (pos === null) {
          violations.push(`point ${pt.id} frame ${f}: visible but no position`);
        } else {
          const [x, y] = pos;
          if (!(x >= 0 && x < traj.width && y >= 0 && y < traj.height)) {
            violations.push(
              `point ${pt.id} frame ${f}: visible position (${x}, ${y}) outside ` +
                `${traj.width}x${traj.height}`,
            );
          }
        }
      }
    }
  }
  return violations;
}

function asNumber(value: unknown, what: string): number {
  if (typeof value !== "number" || !Number.isFinite(value)) {
    throw new SchemaError(`${what}: expected a finite number, got ${JSON.stringify(value)}`);
  }
  return value;
}

/** Parse the trajectory JSON document; throws SchemaError on malformed input. */
export function parseTrajectories(text: string): TrajectorySet {
  let doc: unknown;
  try {
    doc = JSON.parse(text);
  } catch (e) {
    throw new SchemaError(`not valid JSON (${e})`);
  }
  if (typeof doc !== "object" || doc === null) {
    throw new SchemaError("top-level value must be an object");
  }
  const d = doc as Record<string, unknown>;
  if (!Array.isArray(d.points)) {
    throw new SchemaError("missing points array");
  }
  const points: TrackedPoint[] = d.points.map((rec: unknown, i: number) => {
    if (typeof rec !== "object" || rec === null) {
      throw new SchemaError(`points[${i}]: expected an object`);
    }
    const r = rec as Record<string, unknown>;
    if (!Array.isArray(r.positions) || !Array.isArray(r.visibility)) {
      throw new SchemaError(`points[${i}]: missing positions/visibility arrays`);
    }
    const positions: Position[] = r.positions.map((p: unknown, f: number) => {
      if (p === null) return null;
      if (!Array.isArray(p) || p.length !== 2) {
        throw new SchemaError(`points[${i}] frame ${f}: position must be [x, y] or null`);
      }
      return [asNumber(p[0], `points[${i}] frame ${f} x`), asNumber(p[1], `points[${i}] frame ${f} y`)];
    });
    const visibility = r.visibility.map((v) => String(v).toLowerCase() as Visibility);
    return {
      id: Math.trunc(asNumber(r.id, `points[${i}].id`)),
      category: String(r.category).toLowerCase() as Category,
      instrumentId: r.instrument_id == null ? null : Math.trunc(asNumber(r.instrument_id, `points[${i}].instrument_id`)),
      positions,
      visibility,
    };
  });
  const traj: TrajectorySet = {
    video: String(d.video),
    width: Math.trunc(asNumber(d.width, "width")),
    height: Math.trunc(asNumber(d.height, "height")),
    numFrames: Math.trunc(asNumber(d.num_frames, "num_frames")),
    points,
  };
  const violations = validateTrajectories(traj);
  if (violations.length > 0) {
    throw new SchemaError(violations.join("; "));
  }
  return traj;
}

// --- writer -----------------------------------------------------------------
// The harness writes with Python's json.dumps(doc, indent=1): one-space
// indentation, every array element on its own line, floats via repr (so
// integral floats carry a trailing ".0"), and non-ASCII escaped. We reproduce
// that exactly so export -> import -> export is byte-identical.

function escapeString(s: string): string {
  let out = '"';
  for (const ch of s) {
    const code = ch.codePointAt(0)!;
    if (ch === '"') out += '\\"';
    else if (ch === "\\") out += "\\\\";
    else if (code < 0x20 || code > 0x7e) {
      if (ch === "\n") out += "\\n";
      else if (ch === "\t") out += "\\t";
      else if (ch === "\r") out += "\\r";
      else if (ch === "\b") out += "\\b";
      else if (ch === "\f") out += "\\f";
      else if (code > 0xffff) {
        // escape as a UTF-16 surrogate pair, like Python does
        const high = 0xd800 + ((code - 0x10000) >> 10);
        const low = 0xdc00 + ((code - 0x10000) & 0x3ff);
        out += `\\u${high.toString(16).padStart(4, "0")}\\u${low.toString(16).padStart(4, "0")}`;
      } else {
        out += `\\u${code.toString(16).padStart(4, "0")}`;
      }
    } else out += ch;
  }
  return out + '"';
}

/** Render a float the way Python's repr does: integral values get ".0". */
function pyFloat(x: number): string {
  if (Number.isInteger(x) && Math.abs(x) < 1e16) {
    return `${x}.0`;
  }
  return x.toString();
}

type JsonValue = null | number | string | JsonValue[] | { [k: string]: JsonValue };
const FLOAT = Symbol("float");
type Tagged = { [FLOAT]: number };

function float(x: number): Tagged {
  return { [FLOAT]: x };
}

function dump(value: JsonValue | Tagged, indent: number): string {
  const pad = " ".repeat(indent);
  const inner = " ".repeat(indent + 1);
  if (value === null) return "null";
  if (typeof value === "string") return escapeString(value);
  if (typeof value === "number") return Number.isInteger(value) ? value.toString() : pyFloat(value);
  if (typeof value === "object" && FLOAT in value) return pyFloat((value as Tagged)[FLOAT]);
  if (Array.isArray(value)) {
    if (value.length === 0) return "[]";
    const items = value.map((v) => inner + dump(v, indent + 1));
    return "[\n" + items.join(",\n") + "\n" + pad + "]";
  }
  const entries = Object.entries(value as Record<string, JsonValue>);
  if (entries.length === 0) return "{}";
  const items = entries.map(([k, v]) => `${inner}${escapeString(k)}: ${dump(v, indent + 1)}`);
  return "{\n" + items.join(",\n") + "\n" + pad + "}";
}

/**
 * Serialize to the trajectory JSON document. Throws SchemaError (with every
 * violation listed) if the set is invalid.
 */
export function serializeTrajectories(traj: TrajectorySet): string {
  const violations = validateTrajectories(traj);
  if (violations.length > 0) {
    throw new SchemaError(violations.join("; "));
  }
  const doc = {
    video: traj.video,
    width: traj.width,
    height: traj.height,
    num_frames: traj.numFrames,
    points: traj.points.map((pt) => ({
      id: pt.id,
      category: pt.category,
      instrument_id: pt.instrumentId,
      positions: pt.positions.map((p) => (p === null ? null : [float(p[0]), float(p[1])])),
      visibility: [...pt.visibility],
    })),
  };
  return dump(doc as unknown as JsonValue, 0);
}

/** Deep structural equality of two trajectory sets (positions compared exactly). */
export function trajectoriesEqual(a: TrajectorySet, b: TrajectorySet): boolean {
  if (
    a.video !== b.video ||
    a.width !== b.width ||
    a.height !== b.height ||
    a.numFrames !== b.numFrames ||
    a.points.length !== b.points.length
  ) {
    return false;
  }
  for (let i = 0; i < a.points.length; i++) {
    const p = a.points[i]!;
    const q = b.points[i]!;
    if (p.id !== q.id || p.category !== q.category || p.instrumentId !== q.instrumentId) {
      return false;
    }
    for (let f = 0; f < a.numFrames; f++) {
      if (p.visibility[f] !== q.visibility[f]) return false;
      const pp = p.positions[f]!;
      const qp = q.positions[f]!;
      if ((pp === null) !== (qp === null)) return false;
      if (pp !== null && qp !== null && (pp[0] !== qp[0] || pp[1] !== qp[1])) return false;
    }
  }
  return true;
}
