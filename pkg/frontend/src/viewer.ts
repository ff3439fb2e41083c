/**
 * Bead-chain geometry: residue centroids plus chain bonds, projected to
 * screen space. Rendering stays in main.ts; everything here is pure math
 * over coordinates fetched from the frames endpoint.
 */
import type { TopologyInfo } from "./api.js";

export interface Bead {
  x: number;
  y: number;
  depth: number;
  residue: number;
}

export function residueCentroids(
  frame: Float32Array,
  topology: TopologyInfo,
): Float64Array {
  const out = new Float64Array(topology.n_residues * 3);
  topology.residue_ranges.forEach(([start, stop], r) => {
    let cx = 0;
    let cy = 0;
    let cz = 0;
    for (let a = start; a < stop; a++) {
      cx += frame[3 * a];
      cy += frame[3 * a + 1];
      cz += frame[3 * a + 2];
    }
    const n = stop - start;
    out[3 * r] = cx / n;
    out[3 * r + 1] = cy / n;
    out[3 * r + 2] = cz / n;
  });
  return out;
}

export function rotationFromAngles(yaw: number, pitch: number): number[] {
  const cy = Math.cos(yaw);
  const sy = Math.sin(yaw);
  const cp = Math.cos(pitch);
  const sp = Math.sin(pitch);
  // R = Rx(pitch) * Ry(yaw), row-major.
  return [cy, 0, sy, sy * sp, cp, -cy * sp, -sy * cp, sp, cy * cp];
}

export function projectBeads(
  centroids: Float64Array,
  rotation: number[],
  viewport: { width: number; height: number },
  scale: number,
): Bead[] {
  const n = centroids.length / 3;
  let mx = 0;
  let my = 0;
  let mz = 0;
  for (let r = 0; r < n; r++) {
    mx += centroids[3 * r];
    my += centroids[3 * r + 1];
    mz += centroids[3 * r + 2];
  }
  mx /= n;
  my /= n;
  mz /= n;
  const beads: Bead[] = [];
  for (let r = 0; r < n; r++) {
    const x = centroids[3 * r] - mx;
    const y = centroids[3 * r + 1] - my;
    const z = centroids[3 * r + 2] - mz;
    const rx = rotation[0] * x + rotation[1] * y + rotation[2] * z;
    const ry = rotation[3] * x + rotation[4] * y + rotation[5] * z;
    const rz = rotation[6] * x + rotation[7] * y + rotation[8] * z;
    beads.push({
      x: viewport.width / 2 + rx * scale,
      y: viewport.height / 2 - ry * scale,
      depth: rz,
      residue: r,
    });
  }
  return beads;
}

/** Scale that fits the whole chain into the viewport with a margin. */
export function fitScale(centroids: Float64Array, viewport: { width: number; height: number }): number {
  const n = centroids.length / 3;
  let radius = 1e-6;
  let mx = 0;
  let my = 0;
  let mz = 0;
  for (let r = 0; r < n; r++) {
    mx += centroids[3 * r];
    my += centroids[3 * r + 1];
    mz += centroids[3 * r + 2];
  }
  mx /= n;
  my /= n;
  mz /= n;
  for (let r = 0; r < n; r++) {
    const dx = centroids[3 * r] - mx;
    const dy = centroids[3 * r + 1] - my;
    const dz = centroids[3 * r + 2] - mz;
    radius = Math.max(radius, Math.hypot(dx, dy, dz));
  }
  return (0.42 * Math.min(viewport.width, viewport.height)) / radius;
}
