// Built with: wasm-pack build crates/web --target web --out-dir www/pkg
import init, { Demo } from "./pkg/spikesplat_web.js";

const $ = (id) => document.getElementById(id);
let demo = null;
let pixel = [16, 16];

function draw(id, rgba) {
  const c = $(id);
  c.width = demo.width();
  c.height = demo.height();
  const img = new ImageData(new Uint8ClampedArray(rgba), c.width, c.height);
  c.getContext("2d").putImageData(img, 0, 0);
}

function drawReconstruction() {
  const k = +$("frame").value;
  const w = Math.min(+$("window").value, 2 * Math.min(k, demo.frames() - 1 - k) + 1);
  $("frameinfo").textContent = `frame ${k}, window ${w}`;
  draw("spikes", demo.spike_frame(k));
  draw("tfp", demo.tfp(k, w));
  draw("tfi", demo.tfi(k));
}

function drawRender() {
  const s = +$("pose").value;
  $("poseinfo").textContent = `s = ${s.toFixed(2)}`;
  draw("render", demo.render_at(s));
}

function drawTrain() {
  const [y, x] = pixel;
  const bits = demo.pixel_train(y, x);
  const c = $("train");
  const g = c.getContext("2d");
  g.clearRect(0, 0, c.width, c.height);
  const dx = c.width / bits.length;
  g.fillStyle = "#ddd";
  g.fillRect(20 * dx, 0, 97 * dx, c.height);
  g.fillStyle = "#000";
  bits.forEach((b, k) => { if (b) g.fillRect(k * dx, 8, Math.max(1, dx - 1), c.height - 16); });
  const n = bits.reduce((a, b) => a + b, 0);
  g.fillText(`(${y}, ${x}): ${n} spikes`, 4, 8);
}

function redraw() {
  drawReconstruction();
  drawRender();
  drawTrain();
  $("status").textContent = `${demo.total_spikes()} spikes in ${demo.frames()} frames`;
}

function regenerate() {
  try {
    demo = new Demo(+$("seed").value, +$("threshold").value);
    redraw();
  } catch (e) {
    $("status").textContent = `error: ${e}`;
  }
}

await init();
regenerate();
$("regen").onclick = regenerate;
$("frame").oninput = drawReconstruction;
$("window").oninput = drawReconstruction;
$("pose").oninput = drawRender;
for (const id of ["spikes", "tfp", "tfi", "render"]) {
  $(id).onclick = (ev) => {
    const r = ev.target.getBoundingClientRect();
    pixel = [
      Math.floor(((ev.clientY - r.top) / r.height) * demo.height()),
      Math.floor(((ev.clientX - r.left) / r.width) * demo.width()),
    ];
    drawTrain();
  };
}
