import init, { Faces, LineSearch, emotions } from "./pkg/prefrank_wasm.js";

const DOF = 35;
const SEED = 0n;
const $ = (id) => document.getElementById(id);

function draw(canvas, faces, actuators) {
  const side = faces.side();
  const rgba = faces.render_rgba(Float64Array.from(actuators));
  const ctx = canvas.getContext("2d");
  ctx.putImageData(new ImageData(new Uint8ClampedArray(rgba), side, side), 0, 0);
}

function fillSelect(sel, names, chosen) {
  for (const n of names) sel.add(new Option(n, n, false, n === chosen));
}

function plot(canvas, snap) {
  const ctx = canvas.getContext("2d");
  const { width: w, height: h } = canvas;
  const pad = 30;
  const ys = [...snap.truth, ...snap.mean.map((m, i) => m + 2 * snap.std[i]), ...snap.mean.map((m, i) => m - 2 * snap.std[i])];
  const lo = Math.min(0, ...ys);
  const hi = Math.max(1, ...ys);
  const X = (t) => pad + t * (w - 2 * pad);
  const Y = (v) => h - pad - ((v - lo) / (hi - lo)) * (h - 2 * pad);
  ctx.clearRect(0, 0, w, h);
  ctx.strokeStyle = "#999";
  ctx.strokeRect(pad, pad, w - 2 * pad, h - 2 * pad);
  ctx.fillStyle = "#555";
  ctx.font = "11px sans-serif";
  ctx.fillText(hi.toFixed(2), 2, pad + 4);
  ctx.fillText(lo.toFixed(2), 2, h - pad);
  ctx.fillText("t", w - pad + 8, h - pad + 4);

  if (snap.mean.length) {
    ctx.fillStyle = "rgba(74,123,208,0.18)";
    ctx.beginPath();
    snap.grid.forEach((t, i) => ctx.lineTo(X(t), Y(snap.mean[i] + 2 * snap.std[i])));
    [...snap.grid].reverse().forEach((t, j) => {
      const i = snap.grid.length - 1 - j;
      ctx.lineTo(X(t), Y(snap.mean[i] - 2 * snap.std[i]));
    });
    ctx.fill();
    line(ctx, snap.grid.map(X), snap.mean.map(Y), "#4a7bd0", []);
    const eiMax = Math.max(...snap.ei, 1e-12);
    line(ctx, snap.grid.map(X), snap.ei.map((e) => h - pad - (e / eiMax) * 0.25 * (h - 2 * pad)), "#d08a1a", []);
  }
  line(ctx, snap.grid.map(X), snap.truth.map(Y), "#333", [4, 4]);
  ctx.fillStyle = "#c0392b";
  snap.xs.forEach((t, i) => {
    ctx.beginPath();
    ctx.arc(X(t), Y(snap.ys[i]), 3.5, 0, 2 * Math.PI);
    ctx.fill();
  });
}

function line(ctx, xs, ys, color, dash) {
  ctx.strokeStyle = color;
  ctx.setLineDash(dash);
  ctx.beginPath();
  xs.forEach((x, i) => ctx.lineTo(x, ys[i]));
  ctx.stroke();
  ctx.setLineDash([]);
}

async function main() {
  await init();
  const faces = new Faces(DOF, SEED);
  const names = emotions();
  let actuators = new Array(DOF).fill(0.5);

  const sliders = [];
  for (let i = 0; i < DOF; i++) {
    const label = document.createElement("label");
    label.textContent = `a${i}`;
    const input = document.createElement("input");
    Object.assign(input, { type: "range", min: 0, max: 1, step: 0.01, value: 0.5 });
    input.addEventListener("input", () => {
      actuators[i] = Number(input.value);
      refresh();
    });
    label.appendChild(input);
    $("sliders").appendChild(label);
    sliders.push(input);
  }

  function refresh() {
    draw($("face"), faces, actuators);
    const values = faces.intensities(Float64Array.from(actuators));
    $("bars").innerHTML = "";
    names.forEach((n, i) => {
      const row = document.createElement("div");
      row.className = "bar";
      row.innerHTML = `<span>${n}</span><div style="width:${(values[i] * 160).toFixed(0)}px"></div><span>${values[i].toFixed(3)}</span>`;
      $("bars").appendChild(row);
    });
  }

  function setAll(v) {
    actuators = Array.from(v);
    sliders.forEach((s, i) => (s.value = actuators[i]));
    refresh();
  }

  fillSelect($("target"), names, "happiness");
  $("neutral").onclick = () => setAll(new Array(DOF).fill(0.5));
  $("random").onclick = () => setAll(Array.from({ length: DOF }, () => Math.random()));
  $("optimum").onclick = () => setAll(faces.optimum($("target").value));
  refresh();

  fillSelect($("bo-target"), names, "happiness");
  fillSelect($("bo-other"), names, "anger");
  let search;
  const redraw = () => {
    const snap = JSON.parse(search.snapshot());
    plot($("plot"), snap);
    if (snap.best_t !== null) {
      draw($("bo-face"), faces, search.actuators_at(snap.best_t));
      const best = Math.max(...snap.ys);
      $("bo-info").textContent = `${snap.xs.length} evaluations, best ${best.toFixed(3)} at t = ${snap.best_t.toFixed(3)}, lengthscale ${snap.lengthscale.toFixed(3)}`;
    } else {
      $("bo-face").getContext("2d").clearRect(0, 0, 224, 224);
      $("bo-info").textContent = "no evaluations yet";
    }
  };
  const restart = () => {
    search?.free();
    search = new LineSearch(DOF, SEED, $("bo-target").value, $("bo-other").value);
    redraw();
  };
  $("bo-target").onchange = restart;
  $("bo-other").onchange = restart;
  $("bo-reset").onclick = () => {
    search.reset();
    redraw();
  };
  $("bo-step").onclick = () => {
    search.step();
    redraw();
  };
  restart();
  $("status").textContent = "";
}

main().catch((e) => {
  $("status").textContent = `Failed to start: ${e}`;
});
