/**
 * Validation-panel view models: CK overlay curves, residue bar charts,
 * contribution heat-map cells. Pure pass-through of fetched values.
 */
import type { CkResponse, ResiduesResponse } from "./api.js";

export interface CkEntryCurves {
  from: number;
  to: number;
  steps: number[];
  predicted: number[];
  estimated: number[];
}

/**
 * Per-entry predicted-versus-estimated curves over the fetched step
 * multiples; with n = 1 both matrices coincide by construction.
 */
export function ckCurves(results: CkResponse[]): CkEntryCurves[] {
  if (!results.length) return [];
  const ordered = [...results].sort((a, b) => a.steps - b.steps);
  const m = ordered[0].predicted.length;
  const curves: CkEntryCurves[] = [];
  for (let i = 0; i < m; i++) {
    for (let j = 0; j < m; j++) {
      curves.push({
        from: i,
        to: j,
        steps: ordered.map((r) => r.steps),
        predicted: ordered.map((r) => r.predicted[i][j]),
        estimated: ordered.map((r) => r.estimated[i][j]),
      });
    }
  }
  return curves;
}

export interface ResidueBar {
  residue: number;
  rmsf: number;
  resSasa: number;
}

export function residueBars(residues: ResiduesResponse): ResidueBar[] {
  return residues.rmsf.map((value, r) => ({
    residue: r,
    rmsf: value,
    resSasa: residues.res_sasa[r],
  }));
}

export interface ContributionCell {
  state: number;
  residue: number;
  value: number;
}

/** Heat-map cells, m states by n_residues; null means "not computed". */
export function contributionCells(residues: ResiduesResponse): ContributionCell[] | null {
  if (!residues.contributions) return null;
  const cells: ContributionCell[] = [];
  residues.contributions.forEach((row, state) => {
    row.forEach((value, residue) => {
      cells.push({ state, residue, value });
    });
  });
  return cells;
}
