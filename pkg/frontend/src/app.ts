/**
 * Single-page annotation app. No backend: frames are read from a local
 * directory via the file picker and the only output is one downloaded JSON
 * file, so nothing leaves the machine.
 *
 * Workflow: pick a frames directory (frames/00000.png, …), click to place the
 * selected point in the current frame, step frames with the arrow keys, and
 * export when done. Keyboard bindings are listed in the sidebar.
 */

import {
  type AnnotationSession,
  createSession,
  exportSession,
  placePoint,
  redo,
  sessionFromTrajectories,
  setVisibility,
  undo,
  OCCLUDED,
  OUT_OF_VIEW,
  VISIBLE,
} from "./session.js";
import { parseTrajectories } from "./trajectories.js";

const NUM_POINTS = 25;
const POINT_COLORS = ["#e6194b", "#3cb44b", "#4363d8", "#f58231", "#911eb4"];

interface AppState {
  session: AnnotationSession | null;
  images: HTMLImageElement[];
  videoName: string;
}

const state: AppState = { session: null, images: [], videoName: "video" };

function el<T extends HTMLElement>(id: string): T {
  const node = document.getElementById(id);
  if (node === null) throw new Error(`missing element #${id}`);
  return node as T;
}

function status(msg: string): void {
  el<HTMLDivElement>("status").textContent = msg;
}

function defaultPoints() {
  // Half the budget on instruments, half on tissue; ids are stable so points
  // can be re-assigned categories later by editing the export if needed.
  return Array.from({ length: NUM_POINTS }, (_, i) => ({
    id: i,
    category: i < Math.ceil(NUM_POINTS / 2) ? ("tool" as const) : ("tissue" as const),
    instrumentId: i < Math.ceil(NUM_POINTS / 2) ? 0 : null,
  }));
}

async function loadFrames(files: FileList): Promise<void> {
  const frameFiles = Array.from(files)
    .filter((f) => /^\d+\.(png|jpg)$/.test(f.name))
    .sort((a, b) => a.name.localeCompare(b.name));
  if (frameFiles.length === 0) {
    status("no frames found: expected files named like 00000.png");
    return;
  }
  const first = frameFiles[0]!;
  const dir = first.webkitRelativePath.split("/");
  state.videoName = dir.length >= 3 ? dir[dir.length - 3]! : "video";
  state.images = await Promise.all(
    frameFiles.map(
      (f) =>
        new Promise<HTMLImageElement>((resolve, reject) => {
          const img = new Image();
          img.onload = () => resolve(img);
          img.onerror = () => reject(new Error(`failed to decode ${f.name}`));
          img.src = URL.createObjectURL(f);
        }),
    ),
  );
  const w = state.images[0]!.naturalWidth;
  const h = state.images[0]!.naturalHeight;
  state.session = createSession(
    state.videoName,
    w,
    h,
    frameFiles.map((f) => f.name),
    defaultPoints(),
  );
  const canvas = el<HTMLCanvasElement>("canvas");
  canvas.width = w;
  canvas.height = h;
  status(`loaded ${state.images.length} frames (${w}x${h})`);
  draw();
}

function draw(): void {
  const s = state.session;
  if (s === null) return;
  const canvas = el<HTMLCanvasElement>("canvas");
  const ctx = canvas.getContext("2d")!;
  const img = state.images[s.currentFrame];
  if (img !== undefined) {
    ctx.drawImage(img, 0, 0);
  } else {
    ctx.clearRect(0, 0, canvas.width, canvas.height);
  }
  for (const pt of s.trajectories.points) {
    const pos = pt.positions[s.currentFrame];
    const vis = pt.visibility[s.currentFrame];
    if (pos === null || pos === undefined) continue;
    const color = POINT_COLORS[pt.id % POINT_COLORS.length]!;
    ctx.strokeStyle = color;
    ctx.fillStyle = color;
    ctx.lineWidth = pt.id === s.selectedPoint ? 2.5 : 1;
    ctx.beginPath();
    ctx.arc(pos[0], pos[1], 4, 0, 2 * Math.PI);
    if (vis === VISIBLE) ctx.fill();
    ctx.stroke();
    ctx.font = "10px sans-serif";
    ctx.fillText(`${pt.id}${vis === OCCLUDED ? " (occ)" : ""}`, pos[0] + 6, pos[1] - 6);
  }
  el<HTMLSpanElement>("frame-label").textContent = `frame ${s.currentFrame + 1} / ${s.frames.length}`;
  el<HTMLSpanElement>("point-label").textContent =
    s.selectedPoint === null ? "no point selected" : `point ${s.selectedPoint}`;
}

function withSession(fn: (s: AnnotationSession) => void): void {
  if (state.session === null) {
    status("load a frames directory first");
    return;
  }
  try {
    fn(state.session);
  } catch (e) {
    status(e instanceof Error ? e.message : String(e));
    return;
  }
  draw();
}

function cyclePoint(s: AnnotationSession, step: number): void {
  const ids = s.trajectories.points.map((p) => p.id);
  if (ids.length === 0) return;
  const at = s.selectedPoint === null ? 0 : ids.indexOf(s.selectedPoint);
  s.selectedPoint = ids[(at + step + ids.length) % ids.length]!;
}

function onKey(ev: KeyboardEvent): void {
  withSession((s) => {
    switch (ev.key) {
      case "ArrowRight":
        s.currentFrame = Math.min(s.currentFrame + 1, s.frames.length - 1);
        break;
      case "ArrowLeft":
        s.currentFrame = Math.max(s.currentFrame - 1, 0);
        break;
      case "Tab":
        ev.preventDefault();
        cyclePoint(s, ev.shiftKey ? -1 : 1);
        break;
      case "o":
        if (s.selectedPoint !== null) {
          const pt = s.trajectories.points.find((p) => p.id === s.selectedPoint)!;
          const flag = pt.visibility[s.currentFrame] === OCCLUDED ? VISIBLE : OCCLUDED;
          setVisibility(s, s.currentFrame, s.selectedPoint, flag);
        }
        break;
      case "x":
        if (s.selectedPoint !== null) {
          setVisibility(s, s.currentFrame, s.selectedPoint, OUT_OF_VIEW);
        }
        break;
      case "u":
        undo(s);
        break;
      case "r":
        redo(s);
        break;
    }
  });
}

function onClick(ev: MouseEvent): void {
  withSession((s) => {
    const canvas = el<HTMLCanvasElement>("canvas");
    const rect = canvas.getBoundingClientRect();
    const x = ((ev.clientX - rect.left) / rect.width) * canvas.width;
    const y = ((ev.clientY - rect.top) / rect.height) * canvas.height;
    placePoint(s, s.currentFrame, x, y);
    status(`placed point ${s.selectedPoint} at (${x.toFixed(1)}, ${y.toFixed(1)})`);
  });
}

function onExport(): void {
  withSession((s) => {
    const json = exportSession(s);
    const blob = new Blob([json], { type: "application/json" });
    const a = document.createElement("a");
    a.href = URL.createObjectURL(blob);
    a.download = `${state.videoName}.json`;
    a.click();
    status(`exported ${s.trajectories.points.length} points`);
  });
}

async function onImport(files: FileList): Promise<void> {
  const file = files[0];
  if (file === undefined) return;
  try {
    const traj = parseTrajectories(await file.text());
    const frames =
      state.session !== null && state.session.frames.length === traj.numFrames
        ? state.session.frames
        : Array.from({ length: traj.numFrames }, (_, i) => `${String(i).padStart(5, "0")}.png`);
    state.session = sessionFromTrajectories(traj, frames);
    status(`imported ${traj.points.length} points over ${traj.numFrames} frames`);
    draw();
  } catch (e) {
    status(e instanceof Error ? e.message : String(e));
  }
}

export function main(): void {
  el<HTMLInputElement>("frames-input").addEventListener("change", (ev) => {
    const input = ev.target as HTMLInputElement;
    if (input.files !== null) void loadFrames(input.files);
  });
  el<HTMLInputElement>("import-input").addEventListener("change", (ev) => {
    const input = ev.target as HTMLInputElement;
    if (input.files !== null) void onImport(input.files);
  });
  el<HTMLButtonElement>("export-btn").addEventListener("click", onExport);
  el<HTMLCanvasElement>("canvas").addEventListener("click", onClick);
  document.addEventListener("keydown", onKey);
  status("pick a frames directory to begin");
}

if (typeof document !== "undefined") {
  main();
}
