// Wire format: masks are bit-packed row-major, most significant bit first,
// ceil(w*h/8) bytes, base64-encoded. Images are raw 8-bit grayscale bytes.

export function b64ToBytes(b64: string): Uint8Array {
  if (typeof atob === 'function') {
    const bin = atob(b64);
    const out = new Uint8Array(bin.length);
    for (let i = 0; i < bin.length; i++) out[i] = bin.charCodeAt(i);
    return out;
  }
  // node (tests): Buffer exists but isn't in the DOM lib types
  const buf = (globalThis as Record<string, any>).Buffer;
  return new Uint8Array(buf.from(b64, 'base64'));
}

/** Unpack a base64 bit-packed mask into a flat 0/1 array of length w*h. */
export function unpackMask(b64: string, w: number, h: number): Uint8Array {
  const packed = b64ToBytes(b64);
  const need = Math.ceil((w * h) / 8);
  if (packed.length !== need) {
    throw new Error(`mask is ${packed.length} bytes, expected ${need} for ${w}x${h}`);
  }
  const bits = new Uint8Array(w * h);
  for (let i = 0; i < w * h; i++) {
    bits[i] = (packed[i >> 3] >> (7 - (i & 7))) & 1;
  }
  return bits;
}

/** Inverse of unpackMask; used by the fixture tests. */
export function packMask(bits: Uint8Array): Uint8Array {
  const packed = new Uint8Array(Math.ceil(bits.length / 8));
  for (let i = 0; i < bits.length; i++) {
    if (bits[i]) packed[i >> 3] |= 1 << (7 - (i & 7));
  }
  return packed;
}

export function countForeground(bits: Uint8Array): number {
  let n = 0;
  for (let i = 0; i < bits.length; i++) n += bits[i];
  return n;
}
