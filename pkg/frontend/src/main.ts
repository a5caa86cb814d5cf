/** Browser entry point: pick an image, open a session, chat. */

import { ServiceClient } from "./api.js";
import { SessionController } from "./state.js";
import { attach, buildLayout, renderAll } from "./ui.js";

const SESSION_KEY = "radassist-session-id";

function baseUrl(): string {
  const fromQuery = new URLSearchParams(window.location.search).get("api");
  return fromQuery ?? (window as { RADASSIST_API?: string }).RADASSIST_API ?? "";
}

export async function boot(root: HTMLElement): Promise<void> {
  const client = new ServiceClient(baseUrl());
  const controller = new SessionController(client);

  const picker = document.createElement("input");
  picker.type = "file";
  picker.accept = "image/png,image/jpeg";
  root.appendChild(picker);

  const stage = document.createElement("div");
  root.appendChild(stage);
  const refs = buildLayout(stage);
  attach(refs, controller);

  picker.addEventListener("change", async () => {
    const file = picker.files?.[0];
    if (!file) return;
    try {
      const view = await controller.startSession(file, file.name);
      window.localStorage.setItem(SESSION_KEY, view.sessionId);
      renderAll(refs, view);
    } catch (err) {
      refs.notice.hidden = false;
      refs.notice.textContent = err instanceof Error ? err.message : String(err);
    }
  });

  const stored = window.localStorage.getItem(SESSION_KEY);
  if (stored) {
    try {
      renderAll(refs, await controller.resumeSession(stored));
    } catch {
      window.localStorage.removeItem(SESSION_KEY);
    }
  }
}

if (typeof document !== "undefined" && document.getElementById("app")) {
  void boot(document.getElementById("app") as HTMLElement);
}
