import init, { planPrompts, scoreAnswer, profileDataset } from "./pkg/astute_web.js";

const $ = (id) => document.getElementById(id);

function pre(text) {
  const el = document.createElement("pre");
  el.textContent = text;
  return el;
}

function heading(text) {
  const el = document.createElement("h3");
  el.textContent = text;
  return el;
}

function show(target, build) {
  const out = $(target);
  out.replaceChildren();
  try {
    build(out);
  } catch (err) {
    const p = document.createElement("p");
    p.className = "error";
    p.textContent = String(err);
    out.append(p);
  }
}

function renderPlan() {
  show("plan-out", (out) => {
    const plan = JSON.parse(planPrompts(
      $("q").value, $("passages").value, $("internal").value,
      Number($("t").value), Number($("m").value), $("reversed").checked));
    const calls = document.createElement("p");
    calls.textContent = `${plan.api_calls} model calls`;
    out.append(calls, heading("Generation"), pre(plan.generation));
    plan.consolidation.forEach((p, i) => out.append(heading(`Consolidation ${i + 1}`), pre(p)));
    out.append(heading("Finalization"), pre(plan.finalization));
  });
}

function renderScore() {
  show("score-out", (out) => {
    const s = JSON.parse(scoreAnswer($("response").value, $("golds").value));
    const verdict = document.createElement("p");
    verdict.className = s.correct ? "ok" : "bad";
    verdict.textContent = s.correct ? "correct" : "incorrect";
    const detail = document.createElement("p");
    detail.textContent = s.extracted === null
      ? "No <ANSWER> tags found; the whole response was scored."
      : `Extracted answer: "${s.extracted}"`;
    out.append(verdict, detail);
  });
}

function renderProfile() {
  show("profile-out", (out) => {
    const p = JSON.parse(profileDataset($("jsonl").value));
    const table = document.createElement("table");
    table.innerHTML = "<tr><th>precision</th><th>instances</th><th>share</th><th></th></tr>";
    for (const bin of p.bins) {
      const row = table.insertRow();
      row.insertCell().textContent = bin.label;
      row.insertCell().textContent = bin.count;
      row.insertCell().textContent = bin.mass.toFixed(3);
      const bar = document.createElement("div");
      bar.className = "bar";
      bar.style.width = `${Math.round(bin.mass * 240)}px`;
      row.insertCell().append(bar);
    }
    const note = document.createElement("p");
    note.className = "muted";
    note.textContent = `${p.instances} instances` +
      (p.without_passages ? `, ${p.without_passages} without passages (not profiled)` : "");
    out.append(table, note);
  });
}

await init();
$("plan").addEventListener("click", renderPlan);
$("score").addEventListener("click", renderScore);
$("profile").addEventListener("click", renderProfile);
renderPlan();
