import { ApiClient, Point, PredictionResponse, SampleMeta } from './api.js';
import { b64ToBytes, unpackMask } from './mask.js';

export interface UiState {
  samples: SampleMeta[];
  selectedId: string | null;
  concept: string | null;
  sessionId: string | null;
  imageW: number;
  imageH: number;
  gray: Uint8Array | null;
  mask: Uint8Array | null; // unpacked 0/1, w*h
  maskB64: string | null; // as received, for bit-exact comparisons
  uVl: number | null;
  markers: Point[]; // clicks the user placed (not the initial prompt)
  busy: boolean;
  toast: string | null;
}

function freshState(): UiState {
  return {
    samples: [],
    selectedId: null,
    concept: null,
    sessionId: null,
    imageW: 0,
    imageH: 0,
    gray: null,
    mask: null,
    maskB64: null,
    uVl: null,
    markers: [],
    busy: false,
    toast: null,
  };
}

/**
 * Framework-free state machine behind the page. All transitions funnel
 * through here; the DOM layer only renders `state` and forwards events.
 * One in-flight request per session: while `busy`, clicks are dropped.
 */
export class AppController {
  state: UiState = freshState();
  onChange: (s: UiState) => void = () => {};

  constructor(private api: ApiClient) {}

  /** The verbatim request log, for replay tests and debugging. */
  get requestLog() {
    return this.api.log;
  }

  private emit() {
    this.onChange(this.state);
  }

  private applyPrediction(res: PredictionResponse) {
    this.state.sessionId = res.session_id;
    this.state.maskB64 = res.mask_b64;
    this.state.mask = unpackMask(res.mask_b64, res.w, res.h);
    this.state.uVl = res.u_vl;
  }

  private fail(e: unknown) {
    this.state.toast = e instanceof Error ? e.message : String(e);
  }

  async loadSamples(): Promise<void> {
    try {
      this.state.samples = await this.api.samples();
    } catch (e) {
      this.fail(e);
    }
    this.emit();
  }

  async selectSample(id: string): Promise<void> {
    const meta = this.state.samples.find((s) => s.id === id);
    if (!meta) {
      this.state.toast = `unknown sample ${id}`;
      this.emit();
      return;
    }
    this.state.busy = true;
    this.emit();
    try {
      const img = await this.api.sampleImage(id);
      this.state.selectedId = id;
      this.state.concept = meta.concept;
      this.state.imageW = img.w;
      this.state.imageH = img.h;
      this.state.gray = b64ToBytes(img.gray_b64);
      this.state.sessionId = null;
      this.state.mask = null;
      this.state.maskB64 = null;
      this.state.uVl = null;
      this.state.markers = [];
      const res = await this.api.predict(id);
      this.applyPrediction(res);
    } catch (e) {
      this.fail(e);
    }
    this.state.busy = false;
    this.emit();
  }

  /** Place one corrective click; ignored while a request is in flight. */
  async clickAt(x: number, y: number, negative: boolean): Promise<void> {
    if (this.state.busy || !this.state.sessionId) return;
    const point: Point = { x, y, polarity: negative ? 'negative' : 'positive' };
    this.state.busy = true;
    this.state.toast = null;
    this.emit();
    try {
      const res = await this.api.refine(this.state.sessionId, [point]);
      this.applyPrediction(res);
      this.state.markers = [...this.state.markers, point];
    } catch (e) {
      this.fail(e); // markers and mask stay as they were
    }
    this.state.busy = false;
    this.emit();
  }

  async reset(): Promise<void> {
    if (this.state.busy || !this.state.sessionId) return;
    this.state.busy = true;
    this.emit();
    try {
      const res = await this.api.reset(this.state.sessionId);
      this.applyPrediction(res);
      this.state.markers = [];
    } catch (e) {
      this.fail(e);
    }
    this.state.busy = false;
    this.emit();
  }
}
