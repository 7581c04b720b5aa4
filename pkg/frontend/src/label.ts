import { ApiClient, ApiError } from "./api.js";
import type { Choice, LabelTask } from "./types.js";

export type LabelPhase = "loading" | "task" | "submitting" | "empty" | "error";

export interface LabelState {
  phase: LabelPhase;
  task: LabelTask | null;
  notice: string;
  labeled: number;
}

/** Preference-labeling flow.
 *
 * One submit per choice, never more: while a submit is in flight the
 * controller ignores further choices, and a conflict response skips the
 * task with a notice instead of retrying. Network failures keep the task
 * on screen behind a retry banner; the unacknowledged choice is dropped,
 * not re-sent.
 */
export class LabelController {
  state: LabelState = { phase: "loading", task: null, notice: "", labeled: 0 };
  private listeners: (() => void)[] = [];

  constructor(
    private api: ApiClient,
    private annotator: string,
  ) {}

  onChange(listener: () => void): void {
    this.listeners.push(listener);
  }

  private update(partial: Partial<LabelState>): void {
    this.state = { ...this.state, ...partial };
    for (const listener of this.listeners) listener();
  }

  async fetchNext(): Promise<void> {
    this.update({ phase: "loading", task: null });
    try {
      const task = await this.api.nextTask(this.annotator);
      if (task === null) {
        this.update({ phase: "empty", task: null });
      } else {
        // The previous notice (e.g. a conflict skip) stays visible until
        // the next successful submit clears it.
        this.update({ phase: "task", task });
      }
    } catch (err) {
      this.update({ phase: "error", notice: describe(err) });
    }
  }

  async choose(choice: Choice): Promise<void> {
    if (this.state.phase !== "task" || this.state.task === null) {
      return; // no task on screen or a submit already in flight
    }
    const task = this.state.task;
    this.update({ phase: "submitting" });
    try {
      await this.api.submitLabel(task.task_id, this.annotator, choice);
      this.update({ labeled: this.state.labeled + 1, notice: "" });
      await this.fetchNext();
    } catch (err) {
      if (err instanceof ApiError && err.isConflict) {
        this.update({ notice: "Task was labeled by someone else; skipped." });
        await this.fetchNext();
      } else {
        // Network or server failure: keep the task, show a retry banner,
        // and do not re-send the choice.
        this.update({ phase: "task", notice: `Submit failed (${describe(err)}). Choose again to retry.` });
      }
    }
  }
}

function describe(err: unknown): string {
  return err instanceof Error ? err.message : String(err);
}

export function renderLabel(root: HTMLElement, controller: LabelController): void {
  const { phase, task, notice, labeled } = controller.state;
  root.replaceChildren();

  const status = el("div", "status");
  status.textContent = `labeled: ${labeled}`;
  root.appendChild(status);

  if (notice) {
    const banner = el("div", "notice");
    banner.textContent = notice;
    root.appendChild(banner);
  }

  if (phase === "loading" || phase === "submitting") {
    root.appendChild(text("div", "state", "Loading..."));
    return;
  }
  if (phase === "empty") {
    root.appendChild(text("div", "state empty", "Queue empty - waiting for tasks."));
    return;
  }
  if (phase === "error") {
    root.appendChild(text("div", "state error", "Cannot reach the service; retrying."));
    return;
  }
  if (task === null) return;

  const history = el("div", "history");
  if (task.state.history.length === 0) {
    history.appendChild(text("div", "line meta", "(conversation start)"));
  }
  for (const [speaker, line] of task.state.history) {
    history.appendChild(text("div", `line ${speaker}`, `${speaker}: ${line}`));
  }
  root.appendChild(history);
  root.appendChild(
    text(
      "div",
      "meta",
      `segment ${task.state.segment} - turn ${task.state.turn} of ${task.state.max_turns}`,
    ),
  );

  const cards = el("div", "cards");
  for (const [key, candidate] of [
    ["A", task.candidate_a],
    ["B", task.candidate_b],
  ] as const) {
    const card = el("button", "card");
    card.dataset.choice = key;
    card.setAttribute("aria-label", `choose ${key}`);
    card.appendChild(text("div", "key", key));
    card.appendChild(text("div", "utterance", candidate.text));
    card.addEventListener("click", () => void controller.choose(key));
    cards.appendChild(card);
  }
  root.appendChild(cards);
  root.appendChild(text("div", "hint", "press A or B to choose"));
}

function el(tag: string, className: string): HTMLElement {
  const node = document.createElement(tag);
  node.className = className;
  return node;
}

function text(tag: string, className: string, content: string): HTMLElement {
  const node = el(tag, className);
  node.textContent = content;
  return node;
}
