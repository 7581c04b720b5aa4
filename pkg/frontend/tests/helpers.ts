import { vi } from "vitest";
import type { ChatSessionView, LabelTask } from "../src/types.js";

export function makeTask(id = "task-000001"): LabelTask {
  return {
    task_id: id,
    state: {
      history: [
        ["agent", "Hi there! Welcome to the toyshop."],
        ["user", "hi, just browsing really"],
      ],
      turn: 1,
      max_turns: 5,
      segment: "walkin",
    },
    candidate_a: { id: "probe", text: "Tell me a bit about who you're shopping for." },
    candidate_b: { id: "close", text: "Shall I set one aside for you at the register?" },
    created_ts: 0,
    status: "open",
  };
}

export function makeSession(overrides: Partial<ChatSessionView> = {}): ChatSessionView {
  return {
    session_id: "abc123",
    segment: "walkin",
    turn: 0,
    max_turns: 5,
    done: false,
    transcript: [],
    ...overrides,
  };
}

export function jsonResponse(payload: unknown, status = 200): Response {
  return new Response(JSON.stringify(payload), {
    status,
    headers: { "Content-Type": "application/json" },
  });
}

export function emptyResponse(): Response {
  return new Response(null, { status: 204 });
}

/** fetch stub that dispatches on "METHOD path" keys. */
export function fetchStub(routes: Record<string, (body?: unknown) => Response>) {
  return vi.fn(async (input: RequestInfo | URL, init?: RequestInit) => {
    const url = String(input);
    const path = url.replace(/^https?:\/\/[^/]+/, "").split("?")[0];
    const key = `${init?.method ?? "GET"} ${path}`;
    const handler = routes[key];
    if (!handler) {
      throw new Error(`no stub for ${key}`);
    }
    const body = init?.body ? JSON.parse(String(init.body)) : undefined;
    return handler(body);
  });
}
