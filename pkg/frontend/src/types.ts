/** JSON shapes of the server's canonical session serialization. */

export type SessionState =
  | "new"
  | "configured"
  | "outlined"
  | "drafting"
  | "complete";

export type SectionStatus = "pending" | "retrieved" | "drafted" | "accepted";

export type EventKind =
  | "priors_submitted"
  | "config_edited"
  | "outline_generated"
  | "outline_edited"
  | "section_retrieved"
  | "section_drafted"
  | "section_edited"
  | "corrective_prompt"
  | "refinement"
  | "section_accepted";

export type ExperienceKind = "direct_edit" | "corrective_prompt" | "refinement";

export interface AgentConfig {
  persona: string;
  style: string;
  structure_expectations: string[];
  target_domain: string;
  created_at: number;
  revision: number;
}

export interface OutlineSection {
  id: string;
  heading: string;
  intent_notes: string;
  status: SectionStatus;
}

export interface Outline {
  title: string;
  sections: OutlineSection[];
  revision: number;
}

export interface SectionDraft {
  section_id: string;
  text: string;
  provenance: string[];
  version: number;
}

export interface SessionEvent {
  event_id: string;
  at: number;
  kind: EventKind;
  detail: Record<string, unknown>;
}

export interface Session {
  session_id: string;
  state: SessionState;
  config: AgentConfig | null;
  outline: Outline | null;
  drafts: Record<string, SectionDraft>;
  event_log: SessionEvent[];
  clock_seconds: number;
}

export interface ApiErrorBody {
  code: string;
  message: string;
  detail: unknown;
}

export type OutlineCommand =
  | { op: "add"; heading: string; intent_notes?: string; position?: number }
  | { op: "remove"; section_id: string }
  | { op: "reorder"; section_id: string; position: number }
  | { op: "retitle"; section_id: string; heading: string; intent_notes?: string };

/** Section-level user actions; direct edits ship the full revised text and
 * the server computes the diff (one source of truth for capture). */
export type SectionAction =
  | { kind: "direct_edit"; revised_text: string }
  | { kind: "corrective_prompt"; instruction: string }
  | { kind: "refinement"; original_phrase: string; revised_phrase: string }
  | { kind: "accept" };

export interface ExperienceRecordView {
  record_id: string;
  kind: ExperienceKind;
  context_descriptor: string;
  payload: Record<string, unknown>;
  captured_at: number;
  session_id: string;
  score?: number;
}

export interface KbSearchResult {
  chunk_id: string;
  source_doc: string;
  text: string;
  score: number;
  rank: number;
}

export interface RetrievalProvenance {
  private: { chunk_id: string; score: number; rank: number }[];
  web: { title: string; snippet: string; url: string; rank: number }[];
  experience: [string, number][];
  degraded_search: boolean;
}
