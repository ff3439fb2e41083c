/**
 * Free-energy surface helpers: heat-map cells with empty bins blanked,
 * and connected low-energy basin counting for the legend.
 */
import type { FesResponse } from "./api.js";

export interface FesCell {
  i: number;
  j: number;
  value: number;
}

/** Occupied cells only; empty bins stay blank in the heat map. */
export function fesCells(fes: FesResponse): FesCell[] {
  const cells: FesCell[] = [];
  fes.free_energy.forEach((row, i) => {
    row.forEach((value, j) => {
      if (value !== null) cells.push({ i, j, value });
    });
  });
  return cells;
}

export function fesRange(fes: FesResponse): { min: number; max: number } {
  const values = fesCells(fes).map((c) => c.value);
  if (!values.length) throw new Error("surface has no occupied bins");
  return { min: Math.min(...values), max: Math.max(...values) };
}

export interface Basin {
  bins: number;
  /** Fraction of the total occupancy carried by this region. */
  mass: number;
  minF: number;
}

/**
 * 4-connected regions of occupied bins, each weighted by its occupancy
 * mass (sum of exp(-F), normalized). Free energy is -ln density, so the
 * mass recovers the empirical probability of the region.
 */
export function basinRegions(fes: FesResponse): Basin[] {
  const rows = fes.free_energy.length;
  const cols = rows ? fes.free_energy[0].length : 0;
  const occupied = (i: number, j: number): boolean => fes.free_energy[i][j] !== null;
  const seen = Array.from({ length: rows }, () => new Array<boolean>(cols).fill(false));
  const regions: Basin[] = [];
  let totalWeight = 0;
  for (let i = 0; i < rows; i++) {
    for (let j = 0; j < cols; j++) {
      const v = fes.free_energy[i][j];
      if (v !== null) totalWeight += Math.exp(-v);
    }
  }
  for (let i = 0; i < rows; i++) {
    for (let j = 0; j < cols; j++) {
      if (seen[i][j] || !occupied(i, j)) continue;
      let bins = 0;
      let weight = 0;
      let minF = Infinity;
      const stack: [number, number][] = [[i, j]];
      seen[i][j] = true;
      while (stack.length) {
        const [ci, cj] = stack.pop()!;
        const value = fes.free_energy[ci][cj]!;
        bins += 1;
        weight += Math.exp(-value);
        minF = Math.min(minF, value);
        for (const [di, dj] of [[1, 0], [-1, 0], [0, 1], [0, -1]] as const) {
          const ni = ci + di;
          const nj = cj + dj;
          if (ni < 0 || nj < 0 || ni >= rows || nj >= cols) continue;
          if (seen[ni][nj] || !occupied(ni, nj)) continue;
          seen[ni][nj] = true;
          stack.push([ni, nj]);
        }
      }
      regions.push({ bins, mass: weight / totalWeight, minF });
    }
  }
  return regions.sort((a, b) => b.mass - a.mass);
}

/**
 * Number of separated basins: connected occupied regions carrying at
 * least ``minMass`` of the occupancy. The mass cut drops single-bin
 * sampling freckles while keeping every metastable basin, however
 * diffuse or tight it is.
 */
export function connectedBasins(fes: FesResponse, minMass = 0.05): number {
  return basinRegions(fes).filter((b) => b.mass >= minMass).length;
}
