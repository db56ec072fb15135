import { beforeEach, describe, expect, it } from 'vitest';
import { ApiClient, Point } from '../src/api';
import { AppController } from '../src/controller';

// In-memory stand-in for the refine service. It validates every request
// against the documented wire format and records violations instead of
// throwing, because the controller swallows errors into toasts — a schema
// bug must fail the test, not hide in one.
class FakeServer {
  readonly w = 8;
  readonly h = 8;
  violations: string[] = [];
  refineCalls = 0;
  failNext: number | null = null;
  gate: Promise<void> | null = null;
  private sessions = new Map<string, Point[]>();
  private nextId = 1;

  private maskFor(points: Point[]): string {
    const bytes = new Uint8Array(Math.ceil((this.w * this.h) / 8));
    bytes[0] = points.length; // any deterministic function of the points
    return Buffer.from(bytes).toString('base64');
  }

  private respond(points: Point[], sid: string) {
    return {
      session_id: sid,
      mask_b64: this.maskFor(points),
      u_vl: 0.5 + 0.01 * points.length,
      fg_pixels: points.length,
      w: this.w,
      h: this.h,
      points,
    };
  }

  private checkPoints(points: unknown, where: string): points is Point[] {
    if (!Array.isArray(points)) {
      this.violations.push(`${where}: points is not an array`);
      return false;
    }
    for (const p of points) {
      if (
        typeof p !== 'object' || p === null ||
        !Number.isInteger(p.x) || p.x < 0 || p.x >= this.w ||
        !Number.isInteger(p.y) || p.y < 0 || p.y >= this.h ||
        (p.polarity !== 'positive' && p.polarity !== 'negative')
      ) {
        this.violations.push(`${where}: bad point ${JSON.stringify(p)}`);
        return false;
      }
    }
    return true;
  }

  fetch = (async (input: string | URL, init?: RequestInit) => {
    const path = String(input);
    const method = init?.method ?? 'GET';
    const json = (status: number, obj: unknown) =>
      new Response(JSON.stringify(obj), {
        status,
        headers: { 'Content-Type': 'application/json' },
      });

    if (this.failNext !== null) {
      const status = this.failNext;
      this.failNext = null;
      return json(status, { error: 'injected_failure' });
    }

    if (method === 'GET' && path === '/api/samples') {
      return json(200, {
        samples: [
          { id: 's1', concept: 'circle', modality: 'xr', attribute: 'plain', prevalence_group: 'head' },
        ],
      });
    }
    if (method === 'GET' && path === '/api/sample/s1/image') {
      const gray = Buffer.alloc(this.w * this.h, 128).toString('base64');
      return json(200, { w: this.w, h: this.h, gray_b64: gray });
    }
    if (method === 'POST' && path === '/api/predict') {
      const body = JSON.parse(String(init?.body));
      if (body.sample_id !== 's1') this.violations.push(`predict: sample_id ${body.sample_id}`);
      for (const k of Object.keys(body)) {
        if (k !== 'sample_id' && k !== 'points') this.violations.push(`predict: stray key ${k}`);
      }
      let points: Point[] = [{ x: this.w >> 1, y: this.h >> 1, polarity: 'positive' }];
      if ('points' in body && this.checkPoints(body.points, 'predict')) points = body.points;
      const sid = `sess-${this.nextId++}`;
      this.sessions.set(sid, points);
      return json(200, this.respond(points, sid));
    }
    const refine = path.match(/^\/api\/session\/([^/]+)\/refine$/);
    if (method === 'POST' && refine) {
      if (this.gate) await this.gate;
      this.refineCalls += 1;
      const points = this.sessions.get(refine[1]);
      if (!points) return json(404, { error: 'unknown_session' });
      const body = JSON.parse(String(init?.body));
      for (const k of Object.keys(body)) {
        if (k !== 'points') this.violations.push(`refine: stray key ${k}`);
      }
      if (this.checkPoints(body.points, 'refine')) points.push(...body.points);
      return json(200, this.respond(points, refine[1]));
    }
    const reset = path.match(/^\/api\/session\/([^/]+)\/reset$/);
    if (method === 'POST' && reset) {
      const points = this.sessions.get(reset[1]);
      if (!points) return json(404, { error: 'unknown_session' });
      points.length = 1; // back to the initial prompt
      return json(200, this.respond(points, reset[1]));
    }
    this.violations.push(`unroutable request ${method} ${path}`);
    return json(404, { error: 'not_found' });
  }) as typeof fetch;
}

describe('AppController', () => {
  let server: FakeServer;
  let ctl: AppController;

  beforeEach(async () => {
    server = new FakeServer();
    ctl = new AppController(new ApiClient('', server.fetch));
    await ctl.loadSamples();
  });

  it('loads samples and runs an initial prediction on select', async () => {
    expect(ctl.state.samples.map((s) => s.id)).toEqual(['s1']);
    await ctl.selectSample('s1');
    expect(server.violations).toEqual([]);
    expect(ctl.state.sessionId).toBe('sess-1');
    expect(ctl.state.gray?.length).toBe(64);
    expect(ctl.state.mask?.length).toBe(64);
    expect(ctl.state.uVl).toBeCloseTo(0.51, 10);
    expect(ctl.state.markers).toEqual([]);
    expect(ctl.state.busy).toBe(false);
    expect(ctl.state.toast).toBeNull();
  });

  it('sends exactly one point per click and appends a marker on success', async () => {
    await ctl.selectSample('s1');
    const before = ctl.state.maskB64;
    await ctl.clickAt(2, 3, false);
    expect(server.violations).toEqual([]);
    expect(ctl.state.markers).toEqual([{ x: 2, y: 3, polarity: 'positive' }]);
    expect(ctl.state.maskB64).not.toBe(before);
    expect(ctl.state.uVl).toBeCloseTo(0.52, 10);
    const last = ctl.requestLog[ctl.requestLog.length - 1];
    expect(last).toEqual({
      method: 'POST',
      path: '/api/session/sess-1/refine',
      body: { points: [{ x: 2, y: 3, polarity: 'positive' }] },
    });
  });

  it('translates shift/right clicks into negative points', async () => {
    await ctl.selectSample('s1');
    await ctl.clickAt(1, 1, true);
    expect(server.violations).toEqual([]);
    expect(ctl.state.markers).toEqual([{ x: 1, y: 1, polarity: 'negative' }]);
  });

  it('drops clicks while a request is in flight', async () => {
    await ctl.selectSample('s1');
    let release!: () => void;
    server.gate = new Promise((r) => (release = r));
    const first = ctl.clickAt(2, 2, false);
    expect(ctl.state.busy).toBe(true);
    await ctl.clickAt(5, 5, false); // swallowed by the busy guard
    release();
    server.gate = null;
    await first;
    expect(server.refineCalls).toBe(1);
    expect(ctl.state.markers).toEqual([{ x: 2, y: 2, polarity: 'positive' }]);
    expect(server.violations).toEqual([]);
  });

  it('ignores clicks before a session exists', async () => {
    const logged = ctl.requestLog.length;
    await ctl.clickAt(0, 0, false);
    expect(ctl.requestLog.length).toBe(logged);
  });

  it('shows a toast and keeps state on API errors', async () => {
    await ctl.selectSample('s1');
    const mask = ctl.state.maskB64;
    server.failNext = 503;
    await ctl.clickAt(2, 3, false);
    expect(ctl.state.toast).toMatch(/503/);
    expect(ctl.state.markers).toEqual([]);
    expect(ctl.state.maskB64).toBe(mask);
    expect(ctl.state.busy).toBe(false);
  });

  it('reset returns to the initial mask and clears markers', async () => {
    await ctl.selectSample('s1');
    const initial = ctl.state.maskB64;
    await ctl.clickAt(2, 3, false);
    await ctl.clickAt(4, 4, true);
    expect(ctl.state.maskB64).not.toBe(initial);
    await ctl.reset();
    expect(server.violations).toEqual([]);
    expect(ctl.state.markers).toEqual([]);
    expect(ctl.state.maskB64).toBe(initial);
    expect(ctl.state.uVl).toBeCloseTo(0.51, 10);
  });

  it('selecting a sample again starts a fresh session', async () => {
    await ctl.selectSample('s1');
    await ctl.clickAt(2, 3, false);
    await ctl.selectSample('s1');
    expect(ctl.state.sessionId).toBe('sess-2');
    expect(ctl.state.markers).toEqual([]);
    expect(server.violations).toEqual([]);
  });
});
