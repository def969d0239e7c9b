/** Application shell: wires the store to the screens.
 *
 * Layout: session rail | main column (config / outline / section
 * workspace) | side column (evidence panel, experience browser).  All
 * state transitions flow through SessionStore.dispatch, so the
 * one-action == one-call invariant holds everywhere.
 */

import { ApiClient, ApiError } from "./api.js";
import { renderConfigPanel } from "./components/configPanel.js";
import { renderEvidencePanel } from "./components/evidencePanel.js";
import { renderExperienceBrowser } from "./components/experienceBrowser.js";
import { renderOutlineEditor } from "./components/outlineEditor.js";
import { renderSectionWorkspace } from "./components/sectionWorkspace.js";
import { renderSessionList } from "./components/sessionList.js";
import { clear, el } from "./dom.js";
import { SessionStore, UiAction } from "./state.js";

export class App {
  readonly client: ApiClient;
  readonly store: SessionStore;
  selectedSection: string | null = null;

  private readonly rail: HTMLElement;
  private readonly main: HTMLElement;
  private readonly side: HTMLElement;
  private readonly status: HTMLElement;

  constructor(root: HTMLElement, client: ApiClient) {
    this.client = client;
    this.store = new SessionStore(client);
    this.rail = el("nav", { class: "rail" });
    this.main = el("main", { class: "main" });
    this.side = el("aside", { class: "side" });
    this.status = el("footer", { class: "status" });
    root.append(this.rail, this.main, this.side, this.status);
    this.store.subscribe(() => this.render());
  }

  async start(): Promise<void> {
    await this.renderRail();
    this.render();
  }

  private async renderRail(): Promise<void> {
    await renderSessionList(this.rail, {
      client: this.client,
      onOpen: (sessionId) => {
        this.selectedSection = null;
        void this.store.open(sessionId);
      },
      onCreate: () => {
        this.selectedSection = null;
        void this.store.create().then(() => this.renderRail());
      }
    });
  }

  private dispatch(action: UiAction): void {
    void this.store.dispatch(action).catch((error: unknown) => {
      if (error instanceof ApiError) {
        this.renderStatus(error);
      }
    });
  }

  private renderStatus(error: ApiError | null): void {
    clear(this.status);
    if (this.store.pending) {
      this.status.append(el("span", { class: "busy" }, "working..."));
    }
    if (error) {
      const message =
        error.code === "session_busy"
          ? "The session is busy with another change."
          : `${error.code}: ${error.message}`;
      this.status.append(el("span", { class: "error" }, message));
      if (this.store.retryPrompt) {
        this.status.append(
          el("button", {
            class: "retry",
            onclick: () => void this.store.retryPending()
          }, "retry")
        );
      }
    }
  }

  render(): void {
    clear(this.main);
    clear(this.side);
    this.renderStatus(this.store.lastError);
    const session = this.store.session;
    if (!session) {
      this.main.append(el("p", {}, "Open or create a session."));
      return;
    }

    this.main.append(
      el("p", { class: "session-state", "data-state": session.state },
        `Session ${session.session_id.slice(0, 12)} - ${session.state}`)
    );

    if (session.state === "new") {
      const briefArea = el("textarea", {
        class: "brief",
        placeholder: "Describe the task: role, tone, structure..."
      }) as HTMLTextAreaElement;
      this.main.append(
        briefArea,
        el("button", {
          class: "submit-brief",
          onclick: () => {
            const brief = briefArea.value.trim();
            if (brief) this.dispatch({ type: "submit_priors", brief });
          }
        }, "configure agent")
      );
      return;
    }

    if (session.config) {
      const configHost = el("section", { class: "config-panel" });
      this.main.append(configHost);
      renderConfigPanel(configHost, {
        config: session.config,
        onFieldEdit: (fields) =>
          this.dispatch({ type: "edit_config_fields", fields }),
        onInstruction: (instruction) =>
          this.dispatch({ type: "edit_config_instruction", instruction })
      });
    }

    if (session.state === "configured") {
      this.main.append(
        el("button", {
          class: "generate-outline",
          onclick: () => this.dispatch({ type: "generate_outline" })
        }, "generate outline")
      );
      return;
    }

    if (session.outline) {
      const outlineHost = el("section", { class: "outline-editor" });
      this.main.append(outlineHost);
      renderOutlineEditor(outlineHost, {
        outline: session.outline,
        onCommand: (command) => this.dispatch({ type: "edit_outline", command }),
        onSelect: (sectionId) => {
          this.selectedSection = sectionId;
          this.render();
        }
      });
    }

    if (this.selectedSection && session.outline) {
      const workspaceHost = el("section", { class: "section-workspace" });
      this.main.append(workspaceHost);
      const sectionId = this.selectedSection;
      renderSectionWorkspace(workspaceHost, {
        outline: session.outline,
        sectionId,
        draft: session.drafts[sectionId] ?? null,
        onAction: (action) =>
          this.dispatch({ type: "section_action", sectionId, action }),
        onRetrieve: () => this.dispatch({ type: "retrieve_section", sectionId }),
        onGenerate: () => this.dispatch({ type: "generate_section", sectionId })
      });
      const evidenceHost = el("section", { class: "evidence-panel" });
      this.side.append(evidenceHost);
      renderEvidencePanel(evidenceHost, session, sectionId);
    }

    const browserHost = el("section", { class: "experience-browser" });
    this.side.append(browserHost);
    renderExperienceBrowser(browserHost, this.client);
  }
}
