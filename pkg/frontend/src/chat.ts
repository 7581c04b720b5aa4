import { ApiClient } from "./api.js";
import type { ChatSessionView } from "./types.js";

export interface ChatState {
  session: ChatSessionView | null;
  sending: boolean;
  notice: string;
}

/** Chat sandbox: the human plays the customer, the loaded policy replies.
 * The transcript is always what the server handed back; a page refresh
 * restores it via GET /api/chat/{id} (the session id lives in the URL
 * fragment, not in storage). */
export class ChatController {
  state: ChatState = { session: null, sending: false, notice: "" };
  private listeners: (() => void)[] = [];

  constructor(private api: ApiClient) {}

  onChange(listener: () => void): void {
    this.listeners.push(listener);
  }

  private update(partial: Partial<ChatState>): void {
    this.state = { ...this.state, ...partial };
    for (const listener of this.listeners) listener();
  }

  async start(segment: string): Promise<void> {
    try {
      const session = await this.api.chatStart(segment);
      this.update({ session, notice: "" });
    } catch (err) {
      this.update({ notice: describe(err) });
    }
  }

  async restore(sessionId: string): Promise<void> {
    try {
      const session = await this.api.chatSession(sessionId);
      this.update({ session, notice: "" });
    } catch {
      this.update({ session: null, notice: "Session not found; start a new one." });
    }
  }

  async send(textValue: string): Promise<void> {
    const { session, sending } = this.state;
    if (!session || session.done || sending || !textValue.trim()) {
      return;
    }
    this.update({ sending: true });
    try {
      await this.api.chatMessage(session.session_id, textValue);
      // Re-read the session so the transcript is the server's, not ours.
      const fresh = await this.api.chatSession(session.session_id);
      this.update({ session: fresh, sending: false, notice: "" });
    } catch (err) {
      this.update({ sending: false, notice: describe(err) });
    }
  }
}

function describe(err: unknown): string {
  return err instanceof Error ? err.message : String(err);
}

export function renderChat(
  root: HTMLElement,
  controller: ChatController,
  segments: string[],
  onStart: (segment: string) => void,
  onSend: (text: string) => void,
): void {
  const { session, sending, notice } = controller.state;
  root.replaceChildren();

  if (notice) {
    const banner = document.createElement("div");
    banner.className = "notice";
    banner.textContent = notice;
    root.appendChild(banner);
  }

  if (!session) {
    const picker = document.createElement("div");
    picker.className = "segment-picker";
    for (const segment of segments) {
      const button = document.createElement("button");
      button.className = "segment";
      button.dataset.segment = segment;
      button.textContent = `chat as ${segment}`;
      button.addEventListener("click", () => onStart(segment));
      picker.appendChild(button);
    }
    root.appendChild(picker);
    return;
  }

  const budget = document.createElement("div");
  budget.className = "budget";
  budget.textContent = `turn ${session.turn} of ${session.max_turns} (${
    session.max_turns - session.turn
  } remaining)`;
  root.appendChild(budget);

  const transcript = document.createElement("div");
  transcript.className = "transcript";
  for (const exchange of session.transcript) {
    const user = document.createElement("div");
    user.className = "line user";
    user.textContent = `you: ${exchange.user}`;
    transcript.appendChild(user);
    const agent = document.createElement("div");
    agent.className = "line agent";
    agent.textContent = `agent: ${exchange.agent}`;
    transcript.appendChild(agent);
  }
  root.appendChild(transcript);

  if (session.done) {
    const banner = document.createElement("div");
    banner.className = "done-banner";
    banner.textContent = "Conversation finished.";
    root.appendChild(banner);
  }

  const form = document.createElement("form");
  form.className = "composer";
  const input = document.createElement("input");
  input.type = "text";
  input.className = "message";
  input.placeholder = session.done ? "session finished" : "say something as the customer";
  input.disabled = session.done || sending;
  const send = document.createElement("button");
  send.type = "submit";
  send.textContent = "send";
  send.disabled = session.done || sending;
  form.appendChild(input);
  form.appendChild(send);
  form.addEventListener("submit", (event) => {
    event.preventDefault();
    const value = input.value;
    input.value = "";
    onSend(value);
  });
  root.appendChild(form);
}
