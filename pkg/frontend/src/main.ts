import { ApiClient } from "./api.js";
import { ChatController, renderChat } from "./chat.js";
import { attachLabelKeys } from "./keyboard.js";
import { LabelController, renderLabel } from "./label.js";

const POLL_INTERVAL_MS = 2000;
const SEGMENTS = ["walkin", "loyal"];

declare global {
  interface Window {
    TALKTRACK_BASE_URL?: string;
  }
}

function annotatorId(): string {
  // The one piece of client-side persistence: a stable annotator id.
  const existing = localStorage.getItem("talktrack.annotator");
  if (existing) return existing;
  const fresh = `annotator-${Math.random().toString(36).slice(2, 10)}`;
  localStorage.setItem("talktrack.annotator", fresh);
  return fresh;
}

export function boot(root: HTMLElement): void {
  const api = new ApiClient(window.TALKTRACK_BASE_URL ?? "");
  const labelRoot = root.querySelector<HTMLElement>("#label-root")!;
  const chatRoot = root.querySelector<HTMLElement>("#chat-root")!;
  const tabs = root.querySelectorAll<HTMLButtonElement>("[data-tab]");

  const label = new LabelController(api, annotatorId());
  const chat = new ChatController(api);

  label.onChange(() => renderLabel(labelRoot, label));
  chat.onChange(() =>
    renderChat(
      chatRoot,
      chat,
      SEGMENTS,
      (segment) =>
        void chat.start(segment).then(() => {
          const session = chat.state.session;
          if (session) location.hash = `chat=${session.session_id}`;
        }),
      (text) => void chat.send(text),
    ),
  );

  attachLabelKeys(document, (choice) => void label.choose(choice));

  for (const tab of tabs) {
    tab.addEventListener("click", () => {
      for (const other of tabs) other.classList.toggle("active", other === tab);
      labelRoot.hidden = tab.dataset.tab !== "label";
      chatRoot.hidden = tab.dataset.tab !== "chat";
    });
  }

  // Poll while the queue is empty or unreachable (no push transport).
  setInterval(() => {
    if (label.state.phase === "empty" || label.state.phase === "error") {
      void label.fetchNext();
    }
  }, POLL_INTERVAL_MS);

  const restored = location.hash.match(/chat=([a-z0-9]+)/);
  if (restored) {
    void chat.restore(restored[1]);
  } else {
    renderChat(chatRoot, chat, SEGMENTS, (segment) => void chat.start(segment), () => {});
  }
  void label.fetchNext();
}

if (typeof document !== "undefined" && document.getElementById("app")) {
  boot(document.getElementById("app")!);
}
