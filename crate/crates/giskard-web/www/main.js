import init, { simulate, quorum_intersection, run_scenario, scenarios } from "./pkg/giskard_web.js";

const $ = (id) => document.getElementById(id);
const esc = (s) => String(s).replace(/[&<>]/g, (c) => ({ "&": "&amp;", "<": "&lt;", ">": "&gt;" })[c]);

function table(head, rows) {
  const th = head.map((h) => `<th>${esc(h)}</th>`).join("");
  const tr = rows.map((r) => "<tr>" + r.map((c) => `<td>${esc(c)}</td>`).join("") + "</tr>").join("");
  return `<table><tr>${th}</tr>${tr}</table>`;
}

function summary(s) {
  const nodes = table(
    ["node", "view", "prepared", "committed"],
    s.nodes.map((n) => [n.node + (n.byzantine ? " (faulty)" : ""), n.view, n.prepared, n.committed]),
  );
  const sent = Object.entries(s.sent).map(([k, v]) => `${k} ${v}`).join(", ");
  const v = Object.entries(s.violations);
  const verdict = v.length === 0
    ? `<p class="ok">no safety violations</p>`
    : `<p class="bad">violations: ${esc(v.map(([k, n]) => `${k} x${n}`).join(", "))}</p><pre>${esc(s.witnesses.join("\n"))}</pre>`;
  const abnormal = s.view_entries.filter((e) => e.mode === "abnormal").length;
  return `${nodes}<p>${s.records} trace records. sent: ${esc(sent)}. dropped: ${s.dropped}. abnormal view entries: ${abnormal}</p>${verdict}`;
}

function fail(el, e) {
  el.innerHTML = `<p class="bad">${esc(e)}</p>`;
}

await init();

$("sim").addEventListener("submit", (ev) => {
  ev.preventDefault();
  const f = new FormData(ev.target);
  const params = {
    k: +f.get("k"),
    blocks_per_view: +f.get("blocks_per_view"),
    views: +f.get("views"),
    timeout: +f.get("timeout"),
    drop: +f.get("drop"),
    jitter: +f.get("jitter"),
    seed: +f.get("seed"),
    byzantine: f.get("strategy") ? [{ node: 1, strategy: f.get("strategy") }] : [],
  };
  try {
    $("sim-out").innerHTML = summary(JSON.parse(simulate(JSON.stringify(params))));
  } catch (e) {
    fail($("sim-out"), e);
  }
});

$("quorum").addEventListener("submit", (ev) => {
  ev.preventDefault();
  const f = new FormData(ev.target);
  try {
    const o = JSON.parse(quorum_intersection(+f.get("k"), +f.get("threshold")));
    const cls = o.holds ? "ok" : "bad";
    $("quorum-out").innerHTML =
      `<p class="${cls}">${o.pairs} pairs of ${o.threshold}-of-${o.k} quorums; smallest overlap ${o.min_intersection}, ` +
      `need ${o.required}: ${o.holds ? "holds" : "fails"}</p>`;
  } catch (e) {
    fail($("quorum-out"), e);
  }
});

for (const name of JSON.parse(scenarios())) {
  $("scenario-name").add(new Option(name, name));
}

$("scenario").addEventListener("submit", (ev) => {
  ev.preventDefault();
  try {
    const o = JSON.parse(run_scenario($("scenario-name").value));
    const checks = table(["assertion", "result"], o.expectations.map((e) => [e.description, e.passed ? "ok" : "FAIL: " + e.detail]));
    const neg = o.negative_control
      ? `<p>negative control, expects ${esc(o.expected_violations.join(" or "))}: ${o.expectation_met ? "observed" : "NOT observed"}</p>`
      : "";
    $("scenario-out").innerHTML =
      `<p class="${o.passed ? "ok" : "bad"}">${esc(o.name)}: ${o.passed ? "pass" : "fail"}</p>` +
      `<pre>${esc(o.description)}</pre>${neg}${checks}${summary(o.summary)}`;
  } catch (e) {
    fail($("scenario-out"), e);
  }
});
