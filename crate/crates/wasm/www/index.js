import init, { contractionTrace, metric, demo } from "./pkg/univharm_wasm.js";

const $ = (id) => document.getElementById(id);

function show(id, fn) {
  const out = $(id);
  out.classList.remove("error");
  try {
    out.textContent = fn();
  } catch (e) {
    out.classList.add("error");
    out.textContent = String(e);
  }
}

function traceTable(json) {
  const rows = JSON.parse(json).levels.map((r) => `${r.level}\t${r.P ?? "-"}\t${r.bound ?? "-"}`);
  return ["level\tP\tbound", ...rows].join("\n");
}

await init();
$("status").textContent = "Ready.";

$("trace-run").onclick = () =>
  show("trace-out", () => traceTable(contractionTrace(+$("trace-horizon").value, +$("trace-policy").value)));

$("metric-run").onclick = () =>
  show("metric-out", () => JSON.stringify(JSON.parse(metric("binary", $("metric-a").value, $("metric-b").value)), null, 2));

$("demo-run").onclick = () =>
  show("demo-out", () =>
    JSON.parse(demo(+$("demo-horizon").value, +$("demo-targets").value, $("demo-eps").value, +$("demo-seed").value)).text,
  );
