/**
 * Chart geometry kept free of the DOM so cursor placement is testable:
 * a metric curve is a polyline, the red playback marker is the point of
 * that polyline at the current frame index.
 */

export interface ChartLayout {
  width: number;
  height: number;
  paddingX: number;
  paddingY: number;
}

export interface Point {
  x: number;
  y: number;
}

export function linearScale(
  domainMin: number,
  domainMax: number,
  rangeMin: number,
  rangeMax: number,
): (value: number) => number {
  const span = domainMax - domainMin;
  if (span === 0) {
    const mid = (rangeMin + rangeMax) / 2;
    return () => mid;
  }
  return (value) => rangeMin + ((value - domainMin) / span) * (rangeMax - rangeMin);
}

export interface SeriesGeometry {
  points: Point[];
  xOf: (index: number) => number;
  yOf: (value: number) => number;
}

export function seriesGeometry(values: number[], layout: ChartLayout): SeriesGeometry {
  if (!values.length) throw new Error("cannot lay out an empty series");
  const lo = Math.min(...values);
  const hi = Math.max(...values);
  const xOf = linearScale(0, Math.max(values.length - 1, 1),
    layout.paddingX, layout.width - layout.paddingX);
  const yOf = linearScale(lo, hi, layout.height - layout.paddingY, layout.paddingY);
  return {
    points: values.map((v, i) => ({ x: xOf(i), y: yOf(v) })),
    xOf,
    yOf,
  };
}

/** Red marker position for the current frame: exactly the curve point. */
export function cursorPoint(geometry: SeriesGeometry, values: number[], frameIndex: number): Point {
  if (frameIndex < 0 || frameIndex >= values.length) {
    throw new RangeError(`cursor index ${frameIndex} outside series of ${values.length}`);
  }
  return geometry.points[frameIndex];
}
