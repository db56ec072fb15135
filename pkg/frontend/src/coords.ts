/**
 * Map a click position on the scaled canvas to integer image coordinates:
 * floor division by the scale, clamped into [0, w-1] x [0, h-1].
 */
export function canvasToImageCoords(
  clickX: number,
  clickY: number,
  scale: number,
  w: number,
  h: number,
): { x: number; y: number } {
  const clamp = (v: number, hi: number) => Math.min(Math.max(v, 0), hi);
  return {
    x: clamp(Math.floor(clickX / scale), w - 1),
    y: clamp(Math.floor(clickY / scale), h - 1),
  };
}

/** u_vl is displayed with three decimals everywhere. */
export function formatUvl(u: number): string {
  return u.toFixed(3);
}
