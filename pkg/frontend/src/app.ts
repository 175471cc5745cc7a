/** Browser entry point: wires the session client, scene model and
 * viewport to the page controls. Served same-origin behind the static
 * server's /api proxy so no CORS setup is needed. */

import { ApiError, Ard3dClient, type ProgressEvent } from "./api.js";
import { colorForStep, SceneModel } from "./scene.js";
import { VoxelView } from "./view.js";

const client = new Ard3dClient("/api");
const model = new SceneModel();

const $ = <T extends HTMLElement>(id: string): T => {
  const el = document.getElementById(id);
  if (!el) throw new Error(`missing element #${id}`);
  return el as T;
};

const statusEl = $("status");
const logEl = $("log");
const barEl = $("bar");
const barWrap = $("bar-wrap");
const objectsEl = $("objects");
const textEl = $<HTMLInputElement>("text");
const sendBtn = $<HTMLButtonElement>("send");
const undoBtn = $<HTMLButtonElement>("undo");
const newBtn = $<HTMLButtonElement>("new-session");
const modeSel = $<HTMLSelectElement>("mode");
const seedEl = $<HTMLInputElement>("seed");
const stepsEl = $<HTMLInputElement>("steps");

let view: VoxelView | null = null;
try {
  view = new VoxelView($("viewport"));
} catch (e) {
  log(`3D viewport unavailable (${e}); falling back to text only`);
}

let sid: string | null = null;
let streamAbort: AbortController | null = null;

function log(msg: string): void {
  const line = document.createElement("div");
  line.textContent = `${new Date().toLocaleTimeString()}  ${msg}`;
  logEl.prepend(line);
  while (logEl.childElementCount > 200) logEl.lastElementChild?.remove();
}

function setStatus(msg: string): void {
  statusEl.textContent = msg;
}

function redrawObjects(): void {
  objectsEl.replaceChildren();
  for (const o of model.objects) {
    const row = document.createElement("div");
    row.className = "obj";
    const swatch = document.createElement("span");
    swatch.className = "swatch";
    const [r, g, b] = o.color;
    swatch.style.background = `rgb(${r * 255}, ${g * 255}, ${b * 255})`;
    row.append(swatch, `${o.step}: ${o.instruction}${o.refined ? " *" : ""}`);
    objectsEl.append(row);
  }
  undoBtn.disabled = model.objects.length === 0;
}

async function refreshScene(): Promise<void> {
  if (!sid) return;
  model.applySnapshot(await client.scene(sid));
  view?.setGroups(model.colorGroups(), model.sceneDims[0]);
  view?.setPreview(null, [0, 0, 0]);
  redrawObjects();
}

function onEvent(ev: ProgressEvent): void {
  const change = model.applyEvent(ev);
  if (change === "progress" && model.progress) {
    const p = model.progress;
    barWrap.style.visibility = "visible";
    barEl.style.width = p.of > 0 ? `${(100 * (p.k + 1)) / p.of}%` : "0%";
    setStatus(`step ${p.step}: ${p.substep} denoise ${p.k + 1}/${p.of}`);
    if (p.preview) view?.setPreview(p.preview, colorForStep(p.step));
  } else if (change === "scene") {
    barWrap.style.visibility = "hidden";
    setStatus("idle");
    void refreshScene();
  } else if (change === "status") {
    barWrap.style.visibility = "hidden";
    setStatus(`error: ${model.lastError}`);
    log(`generation failed: ${model.lastError}`);
  }
}

async function followEvents(): Promise<void> {
  if (!sid) return;
  streamAbort?.abort();
  const abort = new AbortController();
  streamAbort = abort;
  try {
    for await (const ev of client.events(sid, 0, abort.signal)) {
      if (abort.signal.aborted) break;
      onEvent(ev);
    }
  } catch (e) {
    if (!abort.signal.aborted) log(`event stream dropped: ${e}`);
  }
}

async function newSession(): Promise<void> {
  streamAbort?.abort();
  try {
    const info = await client.createSession({
      mode: modeSel.value as "ard" | "ardplus",
      seed: parseInt(seedEl.value || "0", 10),
      steps: parseInt(stepsEl.value || "50", 10),
    });
    sid = info.session;
    setStatus(`session ${info.session} (${info.mode}, ${info.sampler_steps} steps)`);
    log(`new session ${info.session}`);
    await refreshScene();
    void followEvents();
  } catch (e) {
    setStatus(`session failed: ${e instanceof ApiError ? e.message : e}`);
  }
}

async function send(): Promise<void> {
  if (!sid) return;
  const text = textEl.value.trim();
  if (!text) return;
  sendBtn.disabled = true;
  try {
    const res = await client.addInstruction(sid, text);
    log(`placed step ${res.step} in ${res.timings.total_s}s`);
    textEl.value = "";
    await refreshScene();
  } catch (e) {
    if (e instanceof ApiError && e.body.unknown) {
      log(`unknown words: ${(e.body.unknown as string[]).join(", ")}`);
      setStatus("instruction rejected: unknown words");
    } else {
      log(`instruction failed: ${e instanceof Error ? e.message : e}`);
      setStatus("instruction failed");
    }
  } finally {
    sendBtn.disabled = false;
  }
}

async function undo(): Promise<void> {
  if (!sid) return;
  undoBtn.disabled = true;
  try {
    model.applySnapshot(await client.undo(sid));
    view?.setGroups(model.colorGroups(), model.sceneDims[0]);
    redrawObjects();
    log("undid last step");
  } catch (e) {
    log(`undo failed: ${e instanceof Error ? e.message : e}`);
  } finally {
    undoBtn.disabled = model.objects.length === 0;
  }
}

sendBtn.addEventListener("click", () => void send());
textEl.addEventListener("keydown", (e) => {
  if (e.key === "Enter") void send();
});
undoBtn.addEventListener("click", () => void undo());
newBtn.addEventListener("click", () => void newSession());

void newSession();
