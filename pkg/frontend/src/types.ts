/** Wire types mirroring the feedback service's JSON API. */

export interface CandidateView {
  id: string;
  text: string;
}

export interface TaskStateView {
  history: [string, string][];
  turn: number;
  max_turns: number;
  segment: string;
}

export interface LabelTask {
  task_id: string;
  state: TaskStateView;
  candidate_a: CandidateView;
  candidate_b: CandidateView;
  created_ts: number;
  status: "open" | "labeled";
}

export interface LabelAck {
  task_id: string;
  status: string;
  duplicate: boolean;
}

export type Choice = "A" | "B";

export interface ChatSessionView {
  session_id: string;
  segment: string;
  turn: number;
  max_turns: number;
  done: boolean;
  transcript: { user: string; agent: string }[];
}

export interface ChatReply {
  reply: string;
  action_id: string;
  turn: number;
  remaining_turns: number;
  done: boolean;
}

export interface Metrics {
  labels: number;
  open_tasks: number;
  tasks: number;
  sessions: number;
  messages: number;
}
