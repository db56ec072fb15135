// DOM wiring: render UiState onto the page and forward events to the
// controller. Primary click places a positive point, shift/right-click a
// negative one.

import { ApiClient } from './api.js';
import { AppController } from './controller.js';
import { canvasToImageCoords, formatUvl } from './coords.js';
import { composeOverlay } from './overlay.js';

const SCALE = 6;

const api = new ApiClient('');
const app = new AppController(api);

const sampleSel = document.getElementById('sample') as HTMLSelectElement;
const canvas = document.getElementById('view') as HTMLCanvasElement;
const uvlEl = document.getElementById('uvl') as HTMLElement;
const conceptEl = document.getElementById('concept') as HTMLElement;
const fgEl = document.getElementById('fg') as HTMLElement;
const toastEl = document.getElementById('toast') as HTMLElement;
const resetBtn = document.getElementById('reset') as HTMLButtonElement;

function render() {
  const s = app.state;
  if (sampleSel.options.length !== s.samples.length) {
    sampleSel.innerHTML = '';
    for (const m of s.samples) {
      const opt = document.createElement('option');
      opt.value = m.id;
      opt.textContent = `${m.id} (${m.concept}, ${m.modality}, ${m.prevalence_group})`;
      sampleSel.appendChild(opt);
    }
  }
  conceptEl.textContent = s.concept ?? '—';
  uvlEl.textContent = s.uVl === null ? '—' : formatUvl(s.uVl);
  fgEl.textContent = s.mask ? String(s.mask.reduce((a, b) => a + b, 0)) : '—';
  toastEl.textContent = s.toast ?? '';
  toastEl.style.display = s.toast ? 'block' : 'none';
  canvas.style.cursor = s.busy ? 'wait' : 'crosshair';
  resetBtn.disabled = s.busy || !s.sessionId;

  if (s.gray && s.imageW && s.imageH) {
    canvas.width = s.imageW * SCALE;
    canvas.height = s.imageH * SCALE;
    const ctx = canvas.getContext('2d')!;
    try {
      const rgba = composeOverlay(s.gray, s.mask, s.imageW, s.imageH);
      const base = new ImageData(new Uint8ClampedArray(rgba), s.imageW, s.imageH);
      // draw 1:1 then scale up with crisp pixels
      const off = document.createElement('canvas');
      off.width = s.imageW;
      off.height = s.imageH;
      off.getContext('2d')!.putImageData(base, 0, 0);
      ctx.imageSmoothingEnabled = false;
      ctx.drawImage(off, 0, 0, canvas.width, canvas.height);
    } catch (e) {
      toastEl.textContent = `render failed: ${e}`;
      toastEl.style.display = 'block';
      return;
    }
    for (const p of s.markers) {
      ctx.beginPath();
      ctx.arc((p.x + 0.5) * SCALE, (p.y + 0.5) * SCALE, SCALE * 0.45, 0, Math.PI * 2);
      ctx.fillStyle = p.polarity === 'positive' ? 'rgba(52,199,89,0.95)' : 'rgba(255,59,48,0.95)';
      ctx.fill();
      ctx.strokeStyle = '#fff';
      ctx.stroke();
    }
  }
}

app.onChange = render;

sampleSel.addEventListener('change', () => void app.selectSample(sampleSel.value));
resetBtn.addEventListener('click', () => void app.reset());
canvas.addEventListener('contextmenu', (e) => e.preventDefault());
canvas.addEventListener('mousedown', (e) => {
  const rect = canvas.getBoundingClientRect();
  const { x, y } = canvasToImageCoords(
    e.clientX - rect.left,
    e.clientY - rect.top,
    SCALE,
    app.state.imageW,
    app.state.imageH,
  );
  const negative = e.button === 2 || e.shiftKey;
  void app.clickAt(x, y, negative);
});

void app.loadSamples().then(() => {
  if (app.state.samples.length) void app.selectSample(app.state.samples[0].id);
});
