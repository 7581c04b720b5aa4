/** Secondary acceptance: the real UI controllers against the real service.
 *
 * Criterion: choosing A in the UI yields exactly one stored record with
 * choice=A, duplicate clicks included; a chat session run to the turn
 * budget renders only catalog utterances, honors the warm-up compliance
 * rule, and ends with the input disabled.
 */

import { readFileSync } from "node:fs";
import { beforeEach, describe, expect, it } from "vitest";
import { ApiClient } from "../src/api.js";
import { ChatController, renderChat } from "../src/chat.js";
import { LabelController, renderLabel } from "../src/label.js";

const BASE = process.env.TALKTRACK_E2E ?? "unavailable";
const STORE = process.env.TALKTRACK_E2E_STORE ?? "";
const live = BASE.startsWith("http");

// Bundled toyshop catalog, by utterance text and intent.
const CATALOG_TEXTS: Record<string, string> = {
  "Hi there! Welcome to the toyshop. What brings you in today?": "greet",
  "Tell me a bit about who you're shopping for.": "probe",
  "Our wooden block set is a bestseller and built to last.": "pitch",
  "The deluxe robot kit is our premium pick this season.": "pitch",
  "Shall I set one aside for you at the register?": "close",
  "Happy to help with anything else you'd like to know.": "fallback",
};

function storedRecords(): { choice: string; annotator: string }[] {
  try {
    return readFileSync(STORE, "utf-8")
      .split("\n")
      .filter((line) => line.trim())
      .map((line) => JSON.parse(line));
  } catch {
    return [];
  }
}

describe.skipIf(!live)("label round-trip against the live service", () => {
  beforeEach(() => {
    document.body.innerHTML = '<div id="root"></div>';
  });

  it("choosing A stores exactly one record; duplicate clicks add nothing", async () => {
    const annotator = `e2e-${Date.now()}`;
    const api = new ApiClient(BASE);
    const controller = new LabelController(api, annotator);
    const root = document.getElementById("root")!;
    controller.onChange(() => renderLabel(root, controller));

    await controller.fetchNext();
    expect(controller.state.task).not.toBeNull();
    const taskId = controller.state.task!.task_id;
    const before = storedRecords().length;

    const clicks = [controller.choose("A"), controller.choose("A"), controller.choose("A")];
    await Promise.all(clicks);

    const mine = storedRecords().filter((r) => r.annotator === annotator);
    expect(mine).toHaveLength(1);
    expect(mine[0].choice).toBe("A");
    expect(storedRecords().length).toBe(before + 1);

    // A direct duplicate submit for the same task is acknowledged
    // idempotently and stores nothing new.
    const ack = await api.submitLabel(taskId, annotator, "A");
    expect(ack.duplicate).toBe(true);
    expect(storedRecords().filter((r) => r.annotator === annotator)).toHaveLength(1);
  });
});

describe.skipIf(!live)("chat sandbox against the live service", () => {
  beforeEach(() => {
    document.body.innerHTML = '<div id="root"></div>';
  });

  it("full session renders catalog replies, honors warm-up rule, disables input at done", async () => {
    const api = new ApiClient(BASE);
    const controller = new ChatController(api);
    const root = document.getElementById("root")!;
    const rerender = () =>
      renderChat(root, controller, ["walkin", "loyal"], () => {}, () => {});
    controller.onChange(rerender);

    await controller.start("walkin");
    const maxTurns = controller.state.session!.max_turns;
    for (let i = 0; !controller.state.session!.done; i++) {
      expect(i).toBeLessThan(maxTurns);
      await controller.send(`customer message ${i}`);
    }
    rerender();

    const replies = [...root.querySelectorAll(".transcript .line.agent")].map((node) =>
      node.textContent!.replace(/^agent: /, ""),
    );
    expect(replies.length).toBeGreaterThan(0);
    expect(replies.length).toBeLessThanOrEqual(maxTurns);
    for (const reply of replies) {
      expect(CATALOG_TEXTS).toHaveProperty(reply);
    }
    // Turn-0 compliance: pitching or closing before any rapport is blocked.
    expect(["greet", "probe", "fallback"]).toContain(CATALOG_TEXTS[replies[0]]);

    const input = root.querySelector<HTMLInputElement>("input.message")!;
    expect(input.disabled).toBe(true);
    expect(root.textContent).toContain("Conversation finished.");
    await controller.send("after the end");
    expect(controller.state.session!.transcript).toHaveLength(replies.length);
  });
});
