/** Session view store.
 *
 * Holds the last server-confirmed session plus transient UI state.  Every
 * dispatched action maps to exactly one API call; optimistic text updates
 * roll back to the last confirmed view when the call fails.  A
 * session_busy rejection sets `retryPrompt` so the UI can offer a retry
 * instead of silently dropping the action.
 */

import { ApiClient, ApiError } from "./api.js";
import type { OutlineCommand, SectionAction, Session } from "./types.js";

export type UiAction =
  | { type: "submit_priors"; brief: string }
  | { type: "edit_config_fields"; fields: Record<string, unknown> }
  | { type: "edit_config_instruction"; instruction: string }
  | { type: "generate_outline" }
  | { type: "edit_outline"; command: OutlineCommand }
  | { type: "retrieve_section"; sectionId: string }
  | { type: "generate_section"; sectionId: string }
  | { type: "section_action"; sectionId: string; action: SectionAction };

export type Listener = (store: SessionStore) => void;

export class SessionStore {
  readonly client: ApiClient;
  session: Session | null = null;
  pending = false;
  lastError: ApiError | null = null;
  retryPrompt: UiAction | null = null;

  private listeners: Listener[] = [];
  private pollTimer: ReturnType<typeof setInterval> | null = null;

  constructor(client: ApiClient) {
    this.client = client;
  }

  subscribe(listener: Listener): () => void {
    this.listeners.push(listener);
    return () => {
      this.listeners = this.listeners.filter((l) => l !== listener);
    };
  }

  private emit(): void {
    for (const listener of this.listeners) {
      listener(this);
    }
  }

  async open(sessionId: string): Promise<void> {
    this.session = await this.client.getSession(sessionId);
    this.emit();
  }

  async create(): Promise<void> {
    this.session = await this.client.createSession();
    this.emit();
  }

  async refresh(): Promise<void> {
    if (!this.session) return;
    this.session = await this.client.getSession(this.session.session_id);
    this.emit();
  }

  /** Rendered state always derives from the last successful response;
   * optimistic edits touch only a cloned view. */
  private optimistic(action: UiAction): Session | null {
    if (!this.session) return null;
    if (action.type !== "section_action") return this.session;
    const draft = this.session.drafts[action.sectionId];
    if (!draft) return this.session;
    const clone: Session = JSON.parse(JSON.stringify(this.session));
    const view = clone.drafts[action.sectionId];
    if (action.action.kind === "direct_edit") {
      view.text = action.action.revised_text;
    } else if (action.action.kind === "refinement") {
      view.text = view.text
        .split(action.action.original_phrase)
        .join(action.action.revised_phrase);
    }
    return clone;
  }

  async dispatch(action: UiAction): Promise<Session> {
    if (!this.session) {
      throw new Error("no session open");
    }
    const sessionId = this.session.session_id;
    const confirmed = this.session;
    const preview = this.optimistic(action);
    if (preview !== confirmed) {
      this.session = preview;
    }
    this.pending = true;
    this.lastError = null;
    this.emit();
    try {
      const updated = await this.call(sessionId, action);
      this.session = updated;
      this.retryPrompt = null;
      return updated;
    } catch (error) {
      this.session = confirmed; // roll back the optimistic view
      if (error instanceof ApiError) {
        this.lastError = error;
        if (error.code === "session_busy") {
          this.retryPrompt = action;
        }
      }
      throw error;
    } finally {
      this.pending = false;
      this.emit();
    }
  }

  /** The single action -> API-call mapping. */
  private call(sessionId: string, action: UiAction): Promise<Session> {
    switch (action.type) {
      case "submit_priors":
        return this.client.submitPriors(sessionId, action.brief);
      case "edit_config_fields":
        return this.client.patchConfigFields(sessionId, action.fields);
      case "edit_config_instruction":
        return this.client.patchConfigInstruction(sessionId, action.instruction);
      case "generate_outline":
        return this.client.generateOutline(sessionId);
      case "edit_outline":
        return this.client.editOutline(sessionId, action.command);
      case "retrieve_section":
        return this.client.retrieveSection(sessionId, action.sectionId);
      case "generate_section":
        return this.client.generateSection(sessionId, action.sectionId);
      case "section_action":
        return this.client.submitAction(
          sessionId,
          action.sectionId,
          action.action
        );
    }
  }

  async retryPending(): Promise<Session | null> {
    const action = this.retryPrompt;
    if (!action) return null;
    this.retryPrompt = null;
    return this.dispatch(action);
  }

  /** 2s polling keeps the view fresh while long generation calls run. */
  startPolling(intervalMs = 2000): void {
    if (this.pollTimer !== null) return;
    this.pollTimer = setInterval(() => {
      if (!this.pending) {
        void this.refresh().catch(() => undefined);
      }
    }, intervalMs);
  }

  stopPolling(): void {
    if (this.pollTimer !== null) {
      clearInterval(this.pollTimer);
      this.pollTimer = null;
    }
  }
}
