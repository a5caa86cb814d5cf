/** DOM rendering: findings badges, report panel with correction diff,
 * transcript bubbles and quick-action buttons. Framework-free. */

import { changedSpanCount, diffWords } from "./diff.js";
import { QUICK_ACTIONS, SessionController } from "./state.js";
import type { Intent, UiSessionView } from "./types.js";

export interface UiRefs {
  root: HTMLElement;
  reportPanel: HTMLElement;
  badges: HTMLElement;
  transcript: HTMLElement;
  input: HTMLInputElement;
  sendButton: HTMLButtonElement;
  notice: HTMLElement;
}

export function buildLayout(root: HTMLElement): UiRefs {
  root.innerHTML = `
    <div class="panel report-panel" data-testid="report"></div>
    <div class="badges" data-testid="badges"></div>
    <div class="notice" data-testid="notice" hidden></div>
    <div class="transcript" data-testid="transcript"></div>
    <div class="composer">
      <input type="text" data-testid="input" placeholder="Ask about the report..." />
      <button data-testid="send">Send</button>
    </div>
    <div class="quick-actions" data-testid="quick-actions"></div>
  `;
  return {
    root,
    reportPanel: root.querySelector(".report-panel") as HTMLElement,
    badges: root.querySelector(".badges") as HTMLElement,
    transcript: root.querySelector(".transcript") as HTMLElement,
    input: root.querySelector("input") as HTMLInputElement,
    sendButton: root.querySelector("button") as HTMLButtonElement,
    notice: root.querySelector(".notice") as HTMLElement,
  };
}

export function renderReport(panel: HTMLElement, view: UiSessionView): void {
  panel.textContent = "";
  if (view.previousReport === null || view.previousReport === view.report) {
    const span = document.createElement("span");
    span.textContent = view.report;
    panel.appendChild(span);
    return;
  }
  for (const piece of diffWords(view.previousReport, view.report)) {
    if (piece.kind === "removed") continue; // the panel shows the new text
    const span = document.createElement("span");
    span.textContent = piece.text + " ";
    if (piece.kind === "added") span.className = "diff-added";
    panel.appendChild(span);
  }
}

export function renderBadges(
  container: HTMLElement,
  view: UiSessionView,
  onToggle?: (label: string, currentlyPositive: boolean) => void,
): void {
  container.textContent = "";
  for (const [label, status] of Object.entries(view.findings)) {
    const badge = document.createElement("button");
    badge.className = `badge badge-${status}`;
    badge.dataset.label = label;
    badge.textContent = label;
    badge.title = status === "pos" ? `${label}: present` : `${label}: absent`;
    if (onToggle) {
      badge.addEventListener("click", () => onToggle(label, status === "pos"));
    }
    container.appendChild(badge);
  }
}

export function renderTranscript(container: HTMLElement, view: UiSessionView): void {
  container.textContent = "";
  for (const entry of view.transcript) {
    const bubble = document.createElement("div");
    bubble.className = `bubble bubble-${entry.role}`;
    bubble.textContent = entry.text;
    container.appendChild(bubble);
  }
  if (view.pending) {
    const bubble = document.createElement("div");
    bubble.className = "bubble bubble-assistant bubble-pending";
    bubble.dataset.pending = "true";
    container.appendChild(bubble);
  }
}

export function renderNotice(el: HTMLElement, view: UiSessionView): void {
  const messages: string[] = [];
  if (view.truncated) messages.push("older turns were dropped to fit the context window");
  if (view.error) messages.push(view.error);
  el.hidden = messages.length === 0;
  el.textContent = messages.join(" | ");
}

export function renderAll(refs: UiRefs, view: UiSessionView): void {
  renderReport(refs.reportPanel, view);
  renderBadges(refs.badges, view);
  renderTranscript(refs.transcript, view);
  renderNotice(refs.notice, view);
  refs.sendButton.disabled = view.pending;
}

/** Wire a controller to the layout; returns the send helper used by tests. */
export function attach(refs: UiRefs, controller: SessionController) {
  controller.subscribe((view) => renderAll(refs, view));

  const send = async (text: string, intent?: Intent) => {
    if (!text.trim()) return;
    refs.input.value = "";
    const pendingBubble = () =>
      refs.transcript.querySelector("[data-pending]") as HTMLElement | null;
    await controller.sendTurn(text, intent, (chunk) => {
      const bubble = pendingBubble();
      if (bubble) bubble.textContent = (bubble.textContent ?? "") + chunk;
    });
  };

  refs.sendButton.addEventListener("click", () => void send(refs.input.value));
  refs.input.addEventListener("keydown", (ev) => {
    if ((ev as KeyboardEvent).key === "Enter") void send(refs.input.value);
  });

  const actions = refs.root.querySelector("[data-testid=quick-actions]") as HTMLElement;
  const mkButton = (label: string, handler: () => void) => {
    const b = document.createElement("button");
    b.textContent = label;
    b.addEventListener("click", handler);
    actions.appendChild(b);
    return b;
  };
  mkButton("Easy language", () => void send(QUICK_ACTIONS.easyLanguage));
  mkButton("Summarize", () => void send(QUICK_ACTIONS.summarize));

  const onBadgeToggle = (label: string, currentlyPositive: boolean) => {
    const text = currentlyPositive
      ? QUICK_ACTIONS.correctionRemove(label)
      : QUICK_ACTIONS.correctionAdd(label);
    void send(text, "correction");
  };
  controller.subscribe((view) => renderBadges(refs.badges, view, onBadgeToggle));

  return { send, onBadgeToggle };
}

export { changedSpanCount, diffWords };
