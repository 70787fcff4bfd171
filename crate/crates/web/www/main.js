import init, { synthetic_preview, shift_distances, rank_table } from "./pkg/harood_web.js";

const $ = (id) => document.getElementById(id);
const num = (id) => Number($(id).value);
const COLORS = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf", "#8c564b", "#e377c2"];

function controls() {
  return {
    domains: num("domains"),
    classes: num("classes"),
    amplitude_spread: num("spread"),
    phase_step: num("phase"),
    noise_std: num("noise"),
    samples: num("samples"),
  };
}

function fail(target, err) {
  target.innerHTML = `<p class="error">${String(err)}</p>`;
}

function drawTraces() {
  const canvas = $("traces");
  const ctx = canvas.getContext("2d");
  ctx.clearRect(0, 0, canvas.width, canvas.height);
  let preview;
  try {
    preview = JSON.parse(synthetic_preview(JSON.stringify(controls())));
  } catch (err) {
    ctx.fillStyle = "#b00";
    ctx.fillText(String(err), 10, 20);
    return;
  }
  const k = Math.min(num("shown"), preview.traces[0].length - 1);
  const all = preview.traces.flatMap((d) => d[k]);
  const peak = Math.max(1e-9, ...all.map(Math.abs));
  const mid = canvas.height / 2;
  preview.traces.forEach((domain, d) => {
    const trace = domain[k];
    ctx.strokeStyle = COLORS[d % COLORS.length];
    ctx.beginPath();
    trace.forEach((v, t) => {
      const x = (t / (trace.length - 1)) * canvas.width;
      const y = mid - (v / peak) * (mid - 10);
      t === 0 ? ctx.moveTo(x, y) : ctx.lineTo(x, y);
    });
    ctx.stroke();
    ctx.fillStyle = ctx.strokeStyle;
    ctx.fillText(`domain ${d} (×${preview.amplitudes[d].toFixed(2)})`, 10, 15 + 14 * d);
  });
}

function measure() {
  const out = $("distance-out");
  try {
    const req = { ...controls(), bins: num("bins"), summed: $("summed").checked, sample_cap: 1000 };
    const report = JSON.parse(shift_distances(JSON.stringify(req)));
    const rows = report.pairs
      .map((p) => `<tr><td>${p.a}–${p.b}</td><td>${p.mmd.toFixed(4)}</td><td>${p.w1.toFixed(4)}</td><td>${p.emd.toFixed(4)}</td></tr>`)
      .join("");
    const a = report.average;
    out.innerHTML = `<table><tr><th>pair</th><th>MMD²</th><th>W1</th><th>EMD</th></tr>${rows}
      <tr><th>average</th><th>${a.mmd.toFixed(4)}</th><th>${a.w1.toFixed(4)}</th><th>${a.emd.toFixed(4)}</th></tr></table>`;
  } catch (err) {
    fail(out, err);
  }
}

function rank() {
  const out = $("rank-out");
  try {
    const lines = $("rank-in").value.trim().split("\n").map((l) => l.trim().split(/\s+/));
    const methods = lines.map((l) => l[0]);
    const accuracy = lines.map((l) => l.slice(1).map(Number));
    const tasks = accuracy[0].map((_, t) => `task ${t}`);
    const table = JSON.parse(rank_table(JSON.stringify({ methods, tasks, accuracy })));
    const head = table.tasks.map((t) => `<th>${t}</th>`).join("");
    const rows = table.order
      .map((name) => {
        const m = table.methods.indexOf(name);
        const cells = table.ranks[m].map((r) => `<td>${r}</td>`).join("");
        return `<tr><td>${name}</td>${cells}<td>${table.rank_sums[m]}</td></tr>`;
      })
      .join("");
    out.innerHTML = `<table><tr><th>method</th>${head}<th>rank sum</th></tr>${rows}</table>`;
  } catch (err) {
    fail(out, err);
  }
}

await init();
for (const id of ["domains", "classes", "spread", "phase", "noise", "shown", "samples"]) {
  $(id).addEventListener("input", drawTraces);
}
$("measure").addEventListener("click", measure);
$("rank").addEventListener("click", rank);
drawTraces();
measure();
rank();
