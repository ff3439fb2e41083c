/**
 * Browser wiring: one render loop drives the 3-D bead view, the metric
 * cursors, and the state badge from a single SessionViewModel, so every
 * panel always reflects the same frame.
 */
import { ApiClient, ApiError, type FesResponse, type TopologyInfo } from "./api.js";
import { cursorPoint, seriesGeometry, type ChartLayout } from "./charts.js";
import { connectedBasins, fesCells, fesRange } from "./fes.js";
import { ckCurves, contributionCells, residueBars } from "./panels.js";
import { decodePistrj, frameOf } from "./pistrj.js";
import { FrameWindowCache, SessionViewModel } from "./session.js";
import { fitScale, projectBeads, residueCentroids, rotationFromAngles } from "./viewer.js";

const STATE_COLORS = ["#4c78a8", "#f58518", "#54a24b", "#e45756", "#72b7b2", "#b279a2"];

function el<T extends HTMLElement>(id: string): T {
  const node = document.getElementById(id);
  if (!node) throw new Error(`missing element #${id}`);
  return node as T;
}

function canvasCtx(id: string): CanvasRenderingContext2D {
  const canvas = el<HTMLCanvasElement>(id);
  const ctx = canvas.getContext("2d");
  if (!ctx) throw new Error(`no 2d context for #${id}`);
  return ctx;
}

function drawSeries(
  ctx: CanvasRenderingContext2D,
  values: number[],
  frameIndex: number,
  label: string,
): void {
  const layout: ChartLayout = {
    width: ctx.canvas.width,
    height: ctx.canvas.height,
    paddingX: 28,
    paddingY: 14,
  };
  ctx.clearRect(0, 0, layout.width, layout.height);
  const geometry = seriesGeometry(values, layout);
  ctx.strokeStyle = "#355";
  ctx.lineWidth = 1;
  ctx.beginPath();
  geometry.points.forEach((p, i) => (i ? ctx.lineTo(p.x, p.y) : ctx.moveTo(p.x, p.y)));
  ctx.stroke();
  const cursor = cursorPoint(geometry, values, frameIndex);
  ctx.fillStyle = "#d62728";
  ctx.beginPath();
  ctx.arc(cursor.x, cursor.y, 4, 0, 2 * Math.PI);
  ctx.fill();
  ctx.fillStyle = "#222";
  ctx.font = "11px sans-serif";
  ctx.fillText(`${label}: ${values[frameIndex].toFixed(3)}`, 6, 12);
}

function drawBeads(
  ctx: CanvasRenderingContext2D,
  frame: Float32Array,
  topology: TopologyInfo,
  angle: number,
): void {
  const { width, height } = ctx.canvas;
  ctx.clearRect(0, 0, width, height);
  const centroids = residueCentroids(frame, topology);
  const rotation = rotationFromAngles(angle, 0.35);
  const beads = projectBeads(centroids, rotation, { width, height }, fitScale(centroids, { width, height }));
  ctx.strokeStyle = "#98a";
  ctx.lineWidth = 2;
  ctx.beginPath();
  beads.forEach((b, i) => (i ? ctx.lineTo(b.x, b.y) : ctx.moveTo(b.x, b.y)));
  ctx.stroke();
  for (const bead of beads) {
    ctx.fillStyle = STATE_COLORS[bead.residue % STATE_COLORS.length];
    ctx.beginPath();
    ctx.arc(bead.x, bead.y, 6 + bead.depth * 0.05, 0, 2 * Math.PI);
    ctx.fill();
  }
}

function drawFes(ctx: CanvasRenderingContext2D, fes: FesResponse): void {
  const { width, height } = ctx.canvas;
  ctx.clearRect(0, 0, width, height);
  const rows = fes.free_energy.length;
  const cols = rows ? fes.free_energy[0].length : 0;
  const { max } = fesRange(fes);
  const cw = width / rows;
  const ch = height / cols;
  for (const cell of fesCells(fes)) {
    const t = max > 0 ? cell.value / max : 0;
    const shade = Math.round(250 - 210 * (1 - t));
    ctx.fillStyle = `rgb(${shade},${Math.round(80 + 140 * (1 - t))},${90 + Math.round(60 * t)})`;
    ctx.fillRect(cell.i * cw, height - (cell.j + 1) * ch, Math.ceil(cw), Math.ceil(ch));
  }
  el<HTMLSpanElement>("fes-basins").textContent =
    `${connectedBasins(fes)} basins (PC1 ${(fes.explained_variance[0] * 100).toFixed(1)}%, ` +
    `PC2 ${(fes.explained_variance[1] * 100).toFixed(1)}%)`;
}

function drawCk(ctx: CanvasRenderingContext2D, curves: ReturnType<typeof ckCurves>): void {
  const { width, height } = ctx.canvas;
  ctx.clearRect(0, 0, width, height);
  if (!curves.length) return;
  const m = Math.sqrt(curves.length);
  const cellW = width / m;
  const cellH = height / m;
  for (const curve of curves) {
    const x0 = curve.to * cellW;
    const y0 = curve.from * cellH;
    const maxStep = Math.max(...curve.steps);
    const place = (step: number, value: number): [number, number] => [
      x0 + 6 + ((step - 1) / Math.max(maxStep - 1, 1)) * (cellW - 12),
      y0 + cellH - 6 - value * (cellH - 12),
    ];
    ctx.strokeStyle = "#d62728";
    ctx.setLineDash([4, 3]);
    ctx.beginPath();
    curve.steps.forEach((s, i) => {
      const [x, y] = place(s, curve.predicted[i]);
      i ? ctx.lineTo(x, y) : ctx.moveTo(x, y);
    });
    ctx.stroke();
    ctx.setLineDash([]);
    ctx.strokeStyle = "#222";
    ctx.beginPath();
    curve.steps.forEach((s, i) => {
      const [x, y] = place(s, curve.estimated[i]);
      i ? ctx.lineTo(x, y) : ctx.moveTo(x, y);
    });
    ctx.stroke();
    ctx.strokeStyle = "#ddd";
    ctx.strokeRect(x0, y0, cellW, cellH);
  }
}

function drawBars(ctx: CanvasRenderingContext2D, values: number[], color: string): void {
  const { width, height } = ctx.canvas;
  ctx.clearRect(0, 0, width, height);
  const hi = Math.max(...values, 1e-12);
  const bw = width / values.length;
  ctx.fillStyle = color;
  values.forEach((v, i) => {
    const h = (v / hi) * (height - 8);
    ctx.fillRect(i * bw + 1, height - h, bw - 2, h);
  });
}

function drawContributions(ctx: CanvasRenderingContext2D, cells: ReturnType<typeof contributionCells>): void {
  const { width, height } = ctx.canvas;
  ctx.clearRect(0, 0, width, height);
  if (!cells || !cells.length) {
    ctx.fillStyle = "#777";
    ctx.font = "12px sans-serif";
    ctx.fillText("not computed", 8, 16);
    return;
  }
  const states = Math.max(...cells.map((c) => c.state)) + 1;
  const residues = Math.max(...cells.map((c) => c.residue)) + 1;
  const hi = Math.max(...cells.map((c) => c.value), 1e-12);
  const cw = width / residues;
  const ch = height / states;
  for (const cell of cells) {
    const t = cell.value / hi;
    ctx.fillStyle = `rgba(214,39,40,${0.1 + 0.9 * t})`;
    ctx.fillRect(cell.residue * cw, cell.state * ch, Math.ceil(cw), Math.ceil(ch));
  }
}

async function boot(): Promise<void> {
  const api = new ApiClient("");
  const status = el<HTMLSpanElement>("status");
  try {
    const manifest = await api.manifest();
    const topology = await api.topology();
    const trajId = 0;
    const nFrames = manifest.entries[trajId].n_frames;
    const [rg, sasa, states] = await Promise.all([
      api.metrics(trajId, "rg"),
      api.metrics(trajId, "sasa"),
      api.states(trajId),
    ]);
    const session = new SessionViewModel({
      trajId,
      nFrames,
      rg,
      sasa,
      states: states.state,
      chi: states.chi,
    });
    const frames = new FrameWindowCache((start, count) => api.frames(trajId, start, count), nFrames);

    const beadCtx = canvasCtx("viewer");
    const rgCtx = canvasCtx("rg-chart");
    const sasaCtx = canvasCtx("sasa-chart");
    const badge = el<HTMLSpanElement>("state-badge");
    const frameLabel = el<HTMLSpanElement>("frame-label");
    const scrubber = el<HTMLInputElement>("scrubber");
    scrubber.max = String(nFrames - 1);

    el<HTMLButtonElement>("play").onclick = () => session.play(60);
    el<HTMLButtonElement>("pause").onclick = () => session.pause();
    el<HTMLButtonElement>("step-back").onclick = () => session.stepBack();
    el<HTMLButtonElement>("step-forward").onclick = () => session.stepForward();
    scrubber.oninput = () => session.scrubTo(Number(scrubber.value));

    let lastTime = performance.now();
    let angle = 0;
    const loop = async (now: number) => {
      session.advance(now - lastTime);
      lastTime = now;
      angle += 0.004;
      const render = session.renderState();
      const slice = decodePistrj(await frames.get(render.frameIndex));
      const local = render.frameIndex - frames.windowStart(render.frameIndex);
      drawBeads(beadCtx, frameOf(slice, local), topology, angle);
      drawSeries(rgCtx, rg, render.rgCursorIndex, "Rg (A)");
      drawSeries(sasaCtx, sasa, render.sasaCursorIndex, "SASA (A^2)");
      badge.textContent = `state ${render.stateBadge}`;
      badge.style.background = STATE_COLORS[render.stateBadge % STATE_COLORS.length];
      frameLabel.textContent = `frame ${render.frameIndex} / ${nFrames - 1}`;
      if (!scrubber.matches(":active")) scrubber.value = String(render.frameIndex);
      requestAnimationFrame(loop);
    };
    requestAnimationFrame(loop);

    // Validation panels: fetched once, refreshed on demand.
    const refresh = async () => {
      try {
        const fes = await api.fes();
        drawFes(canvasCtx("fes"), fes);
      } catch (error) {
        if (error instanceof ApiError && error.staleOrBusy) {
          el<HTMLSpanElement>("fes-basins").textContent = "refresh needed";
        }
      }
      const lag = Number(el<HTMLInputElement>("ck-lag").value);
      const maxSteps = Number(el<HTMLInputElement>("ck-steps").value);
      try {
        const results = [];
        for (let n = 1; n <= maxSteps; n++) results.push(await api.cktest(lag, n));
        drawCk(canvasCtx("ck"), ckCurves(results));
      } catch (error) {
        if (error instanceof ApiError) status.textContent = `CK: ${error.message}`;
      }
      try {
        const residues = await api.residues();
        drawBars(canvasCtx("rmsf"), residueBars(residues).map((b) => b.rmsf), "#4c78a8");
        drawBars(canvasCtx("res-sasa"), residueBars(residues).map((b) => b.resSasa), "#54a24b");
        drawContributions(canvasCtx("contributions"), contributionCells(residues));
      } catch (error) {
        if (error instanceof ApiError) status.textContent = `residues: ${error.message}`;
      }
    };
    el<HTMLButtonElement>("refresh").onclick = refresh;
    await refresh();

    setInterval(async () => {
      try {
        const train = await api.trainStatus();
        el<HTMLSpanElement>("train-status").textContent =
          train.stage === "idle" ? "idle" :
            `${train.stage} epoch ${train.epoch} val ${train.val_score?.toFixed(4) ?? "-"}`;
      } catch {
        /* transient */
      }
    }, 1500);
    status.textContent = `loaded ${manifest.totals.n_trajectories} trajectories, ` +
      `${manifest.totals.n_frames_total} frames`;
  } catch (error) {
    status.textContent = error instanceof Error ? error.message : String(error);
  }
}

boot();
