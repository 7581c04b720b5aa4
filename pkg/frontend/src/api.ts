import type {
  ChatReply,
  ChatSessionView,
  Choice,
  LabelAck,
  LabelTask,
  Metrics,
} from "./types.js";

export class ApiError extends Error {
  constructor(
    public status: number,
    public code: string,
    message: string,
  ) {
    super(message);
  }

  get isConflict(): boolean {
    return this.status === 409;
  }
}

type FetchLike = typeof fetch;

/** Thin typed client over the service API; the server is the source of
 * truth, so every method returns exactly what the server said. */
export class ApiClient {
  constructor(
    private baseUrl: string = "",
    private fetchImpl: FetchLike = fetch.bind(globalThis),
  ) {}

  private async request<T>(path: string, init?: RequestInit): Promise<T | null> {
    let res: Response;
    try {
      res = await this.fetchImpl(this.baseUrl + path, init);
    } catch (err) {
      throw new ApiError(0, "network", `network failure: ${String(err)}`);
    }
    if (res.status === 204) {
      return null;
    }
    const body = await res.json().catch(() => ({}));
    if (!res.ok) {
      throw new ApiError(res.status, body.code ?? "error", body.error ?? res.statusText);
    }
    return body as T;
  }

  private post<T>(path: string, payload: unknown): Promise<T | null> {
    return this.request<T>(path, {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify(payload),
    });
  }

  async nextTask(annotator: string): Promise<LabelTask | null> {
    return this.request<LabelTask>(
      `/api/tasks/next?annotator=${encodeURIComponent(annotator)}`,
    );
  }

  async submitLabel(taskId: string, annotator: string, choice: Choice): Promise<LabelAck> {
    const ack = await this.post<LabelAck>(
      `/api/tasks/${encodeURIComponent(taskId)}/label`,
      { annotator, choice },
    );
    return ack as LabelAck;
  }

  async chatStart(segment: string): Promise<ChatSessionView> {
    return (await this.post<ChatSessionView>("/api/chat", { segment })) as ChatSessionView;
  }

  async chatSession(sessionId: string): Promise<ChatSessionView> {
    return (await this.request<ChatSessionView>(
      `/api/chat/${encodeURIComponent(sessionId)}`,
    )) as ChatSessionView;
  }

  async chatMessage(sessionId: string, text: string): Promise<ChatReply> {
    return (await this.post<ChatReply>(
      `/api/chat/${encodeURIComponent(sessionId)}/message`,
      { text },
    )) as ChatReply;
  }

  async metrics(): Promise<Metrics> {
    return (await this.request<Metrics>("/api/metrics")) as Metrics;
  }
}
