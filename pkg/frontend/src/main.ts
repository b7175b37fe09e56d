import { PlaygroundClient, ApiError } from "./api.js";
import { assignColors, spanKey } from "./colors.js";
import { comparePromptResponses } from "./diff.js";
import { drawDetections, hitTest } from "./overlay.js";
import {
  SessionState,
  addTunedMode,
  applyError,
  applyResponse,
  beginRequest,
  initialState,
} from "./state.js";
import type { InferRequest, InferResponse } from "./types.js";

const client = new PlaygroundClient("");
let state: SessionState = initialState();
let pinned: InferResponse | null = null;
let highlight: [number, number] | null = null;

const el = {
  file: document.getElementById("image-file") as HTMLInputElement,
  prompt: document.getElementById("prompt-input") as HTMLTextAreaElement,
  mode: document.getElementById("mode-select") as HTMLSelectElement,
  run: document.getElementById("run-button") as HTMLButtonElement,
  canvas: document.getElementById("overlay") as HTMLCanvasElement,
  legend: document.getElementById("legend") as HTMLDivElement,
  status: document.getElementById("status") as HTMLDivElement,
  empty: document.getElementById("empty-state") as HTMLDivElement,
  pin: document.getElementById("pin-button") as HTMLButtonElement,
  diff: document.getElementById("diff-panel") as HTMLDivElement,
  tuneDataset: document.getElementById("tune-dataset") as HTMLInputElement,
  tuneShots: document.getElementById("tune-shots") as HTMLInputElement,
  tuneSteps: document.getElementById("tune-steps") as HTMLInputElement,
  tuneLaunch: document.getElementById("tune-launch") as HTMLButtonElement,
  tuneStatus: document.getElementById("tune-status") as HTMLDivElement,
};

const SCALE = 5; // 64 model pixels -> 320 display pixels

function setStatus(text: string, isError = false): void {
  el.status.textContent = text;
  el.status.className = isError ? "error" : "";
}

function render(): void {
  const ctx = el.canvas.getContext("2d")!;
  ctx.clearRect(0, 0, el.canvas.width, el.canvas.height);
  if (state.image) {
    const img = new Image();
    img.onload = () => {
      ctx.imageSmoothingEnabled = false;
      ctx.drawImage(img, 0, 0, el.canvas.width, el.canvas.height);
      paintDetections(ctx);
    };
    img.src = "data:image/png;base64," + state.image;
  } else {
    paintDetections(ctx);
  }
}

function paintDetections(ctx: CanvasRenderingContext2D): void {
  const response = state.current;
  el.legend.innerHTML = "";
  if (!response) {
    el.empty.textContent = "no response yet";
    return;
  }
  if (response.detections.length === 0) {
    el.empty.textContent = "no detections for this prompt";
  } else {
    el.empty.textContent = "";
  }
  const colors = assignColors(response.prompt.phrases);
  drawDetections(ctx, response.detections, colors, { scale: SCALE, highlightSpan: highlight });
  for (const phrase of response.prompt.phrases) {
    const chip = document.createElement("span");
    chip.className = "chip";
    chip.textContent = phrase.text;
    chip.style.borderColor = colors.get(spanKey(phrase.char_span)) ?? "#fff";
    chip.onmouseenter = () => {
      highlight = phrase.char_span;
      render();
    };
    chip.onmouseleave = () => {
      highlight = null;
      render();
    };
    el.legend.appendChild(chip);
  }
  renderDiff();
}

function renderDiff(): void {
  el.diff.innerHTML = "";
  if (!pinned || !state.current) return;
  const deltas = comparePromptResponses(pinned, state.current);
  const list = document.createElement("ul");
  for (const d of deltas) {
    const row = document.createElement("li");
    row.textContent = `${d.cls}: ${d.before.toFixed(2)} -> ${d.after.toFixed(2)} (${d.kind})`;
    row.className = d.kind;
    list.appendChild(row);
  }
  el.diff.appendChild(list);
}

function currentRequest(): InferRequest | null {
  if (!state.image) return null;
  const value = el.prompt.value.trim();
  if (el.mode.value.startsWith("tuned:")) {
    return { image: state.image, prompt_embedding_id: el.mode.value.slice(6) };
  }
  if (!value) return null;
  if (el.mode.value === "classes") {
    const classes = value
      .split(/[,\n]/)
      .map((s) => s.trim())
      .filter(Boolean);
    return classes.length ? { image: state.image, classes } : null;
  }
  return { image: state.image, text: value };
}

async function runInference(): Promise<void> {
  const request = currentRequest();
  if (!request) {
    setStatus("need an image and a prompt");
    return;
  }
  const [next, seq] = beginRequest(state);
  state = next;
  setStatus(`inferring (#${seq})...`);
  const started = performance.now();
  try {
    const response = await client.infer(request);
    state = applyResponse(state, seq, response);
    if (state.appliedSeq === seq) {
      setStatus(`#${seq} done in ${(performance.now() - started).toFixed(0)} ms`);
      render();
    }
  } catch (err) {
    state = applyError(state, seq, err instanceof ApiError ? JSON.stringify(err.body) : String(err));
    if (state.error) setStatus(state.error, true);
  }
}

let debounce: ReturnType<typeof setTimeout> | null = null;

function scheduleInference(): void {
  if (debounce) clearTimeout(debounce);
  debounce = setTimeout(() => void runInference(), 300);
}

el.file.addEventListener("change", () => {
  const file = el.file.files?.[0];
  if (!file) return;
  const reader = new FileReader();
  reader.onload = () => {
    const dataUrl = reader.result as string;
    state = { ...state, image: dataUrl.slice(dataUrl.indexOf(",") + 1) };
    scheduleInference();
  };
  reader.readAsDataURL(file);
});

el.prompt.addEventListener("input", scheduleInference);
el.mode.addEventListener("change", scheduleInference);
el.run.addEventListener("click", () => void runInference());

el.pin.addEventListener("click", () => {
  pinned = state.current;
  renderDiff();
});

el.canvas.addEventListener("mousemove", (event) => {
  if (!state.current) return;
  const rect = el.canvas.getBoundingClientRect();
  const det = hitTest(state.current.detections, event.clientX - rect.left, event.clientY - rect.top, SCALE);
  highlight = det ? det.char_span : null;
  render();
});

el.tuneLaunch.addEventListener("click", async () => {
  try {
    el.tuneStatus.textContent = "launching...";
    const { job_id } = await client.launchPromptTune({
      dataset: el.tuneDataset.value.trim(),
      shots: el.tuneShots.value ? Number(el.tuneShots.value) : undefined,
      steps: el.tuneSteps.value ? Number(el.tuneSteps.value) : 150,
    });
    el.tuneStatus.textContent = `job ${job_id} running...`;
    const status = await client.pollJob(job_id);
    if (status.status === "done") {
      el.tuneStatus.textContent = `job ${job_id} done (AP ${status.result?.metrics?.ap?.toFixed?.(3) ?? "n/a"})`;
      state = addTunedMode(state, job_id, `tuned:${el.tuneDataset.value.trim()}#${job_id.slice(0, 4)}`);
      const option = document.createElement("option");
      option.value = `tuned:${job_id}`;
      option.textContent = state.tunedModes[state.tunedModes.length - 1].label;
      el.mode.appendChild(option);
    } else {
      el.tuneStatus.textContent = `job failed: ${status.error}`;
    }
  } catch (err) {
    el.tuneStatus.textContent = `prompt-tune error: ${String(err)}`;
  }
});

void client
  .modelInfo()
  .then((info) => setStatus(`model loaded: ${info.parameter_count} parameters`))
  .catch(() => setStatus("service unreachable", true));
