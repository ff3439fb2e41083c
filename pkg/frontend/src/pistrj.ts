/**
 * Decoder for PISTRJ frame-slice responses.
 *
 * Wire layout (little-endian): bytes 0-7 magic "PISTRJ01", u32 frame
 * count, u32 atom count, f32 time step (ps), then frame-major xyz
 * float32 coordinates.
 */

const MAGIC = "PISTRJ01";
const HEADER_SIZE = 20;

export interface FrameSlice {
  nFrames: number;
  nAtoms: number;
  dtPs: number;
  /** Flat (nFrames * nAtoms * 3) coordinate buffer, Angstrom. */
  coordinates: Float32Array;
}

export function decodePistrj(buffer: ArrayBuffer): FrameSlice {
  if (buffer.byteLength < HEADER_SIZE) {
    throw new Error(`stream of ${buffer.byteLength} bytes is shorter than the header`);
  }
  const magic = new TextDecoder().decode(new Uint8Array(buffer, 0, 8));
  if (magic !== MAGIC) {
    throw new Error(`bad magic ${JSON.stringify(magic)}`);
  }
  const view = new DataView(buffer);
  const nFrames = view.getUint32(8, true);
  const nAtoms = view.getUint32(12, true);
  const dtPs = view.getFloat32(16, true);
  const expected = nFrames * nAtoms * 3 * 4;
  const actual = buffer.byteLength - HEADER_SIZE;
  if (actual !== expected) {
    throw new Error(`payload truncated: expected ${expected} bytes, got ${actual}`);
  }
  const coordinates = new Float32Array(buffer.slice(HEADER_SIZE));
  return { nFrames, nAtoms, dtPs, coordinates };
}

/** View of one frame inside a slice as (nAtoms * 3) floats. */
export function frameOf(slice: FrameSlice, index: number): Float32Array {
  if (index < 0 || index >= slice.nFrames) {
    throw new RangeError(`frame ${index} outside [0, ${slice.nFrames})`);
  }
  const stride = slice.nAtoms * 3;
  return slice.coordinates.subarray(index * stride, (index + 1) * stride);
}
