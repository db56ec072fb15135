// Pure pixel composition for the mask overlay; the canvas layer just blits
// the RGBA buffer this produces. Keeping it DOM-free makes it testable.

const MASK_RGBA = [66, 133, 244, 110] as const; // translucent blue

/**
 * Composite a grayscale image with a binary mask into an RGBA buffer.
 * `gray` is w*h bytes, `mask` is w*h 0/1 values (or null for no overlay).
 */
export function composeOverlay(
  gray: Uint8Array,
  mask: Uint8Array | null,
  w: number,
  h: number,
): Uint8ClampedArray {
  if (gray.length !== w * h) {
    throw new Error(`image is ${gray.length} bytes, expected ${w * h}`);
  }
  if (mask && mask.length !== w * h) {
    throw new Error(`mask length ${mask.length} does not match ${w}x${h}`);
  }
  const out = new Uint8ClampedArray(w * h * 4);
  const [mr, mg, mb, ma] = MASK_RGBA;
  const alpha = ma / 255;
  for (let i = 0; i < w * h; i++) {
    const g = gray[i];
    let r = g, gg = g, b = g;
    if (mask && mask[i]) {
      r = g * (1 - alpha) + mr * alpha;
      gg = g * (1 - alpha) + mg * alpha;
      b = g * (1 - alpha) + mb * alpha;
    }
    const o = i * 4;
    out[o] = r;
    out[o + 1] = gg;
    out[o + 2] = b;
    out[o + 3] = 255;
  }
  return out;
}
