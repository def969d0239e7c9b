/** Section workspace: draft view, inline edit mode, corrective-prompt box,
 * phrase-refinement from the current text selection, and accept.
 *
 * Each control emits one SectionAction; the server owns all capture
 * semantics (diffing, records), the workspace only ships full texts and
 * verbatim phrase spans.
 */

import { clear, el } from "../dom.js";
import type { Outline, SectionAction, SectionDraft } from "../types.js";

export interface SectionWorkspaceProps {
  outline: Outline;
  sectionId: string;
  draft: SectionDraft | null;
  onAction: (action: SectionAction) => void;
  onRetrieve: () => void;
  onGenerate: () => void;
}

export function renderSectionWorkspace(
  container: HTMLElement,
  props: SectionWorkspaceProps
): void {
  clear(container);
  const section = props.outline.sections.find((s) => s.id === props.sectionId);
  if (!section) {
    container.append(el("p", {}, "Section not found."));
    return;
  }

  container.append(
    el(
      "h2",
      {},
      section.heading,
      " ",
      el("span", { class: `chip chip-${section.status}` }, section.status)
    )
  );
  if (section.intent_notes) {
    container.append(el("p", { class: "intent" }, section.intent_notes));
  }

  if (section.status === "pending") {
    container.append(
      el("button", { class: "retrieve", onclick: () => props.onRetrieve() },
        "retrieve evidence")
    );
    return;
  }
  if (section.status === "retrieved") {
    container.append(
      el("button", { class: "generate", onclick: () => props.onGenerate() },
        "generate draft")
    );
    return;
  }

  const draft = props.draft;
  if (!draft) {
    container.append(el("p", {}, "No draft available."));
    return;
  }

  const draftView = el(
    "div",
    { class: "draft-view", "data-version": String(draft.version) },
    draft.text
  );
  container.append(draftView);

  if (section.status === "accepted") {
    return; // terminal: read-only
  }

  // Inline edit mode: textarea prefilled with the draft; save submits the
  // full revised text (server computes the word-level diff).
  const editArea = el("textarea", { class: "edit-area" }) as HTMLTextAreaElement;
  editArea.value = draft.text;
  const editBlock = el(
    "div",
    { class: "edit-block", hidden: true },
    editArea,
    el("button", {
      class: "save-edit",
      onclick: () =>
        props.onAction({ kind: "direct_edit", revised_text: editArea.value })
    }, "save edit")
  );
  const editToggle = el("button", {
    class: "toggle-edit",
    onclick: () => {
      editBlock.hidden = !editBlock.hidden;
      editArea.value = draft.text;
    }
  }, "edit inline");

  const instructionInput = el("input", {
    class: "corrective-input",
    type: "text",
    placeholder: "Corrective instruction, e.g. 'make this more objective'"
  }) as HTMLInputElement;
  const correctiveBlock = el(
    "div",
    { class: "corrective-block" },
    instructionInput,
    el("button", {
      class: "send-corrective",
      onclick: () => {
        const instruction = instructionInput.value.trim();
        if (instruction) {
          props.onAction({ kind: "corrective_prompt", instruction });
          instructionInput.value = "";
        }
      }
    }, "send instruction")
  );

  // Refinement: the original span comes verbatim from the displayed draft,
  // either via text selection or typed exactly.
  const originalInput = el("input", {
    class: "refine-original",
    type: "text",
    placeholder: "Phrase from the draft"
  }) as HTMLInputElement;
  const replacementInput = el("input", {
    class: "refine-replacement",
    type: "text",
    placeholder: "Replacement"
  }) as HTMLInputElement;
  draftView.addEventListener("mouseup", () => {
    const selection = document.getSelection()?.toString() ?? "";
    if (selection && draft.text.includes(selection)) {
      originalInput.value = selection;
    }
  });
  const refineBlock = el(
    "div",
    { class: "refine-block" },
    originalInput,
    replacementInput,
    el("button", {
      class: "send-refinement",
      onclick: () => {
        const original = originalInput.value;
        const replacement = replacementInput.value;
        if (original && draft.text.includes(original) && replacement) {
          props.onAction({
            kind: "refinement",
            original_phrase: original,
            revised_phrase: replacement
          });
          originalInput.value = "";
          replacementInput.value = "";
        }
      }
    }, "refine phrase")
  );

  const acceptButton = el("button", {
    class: "accept-section",
    onclick: () => props.onAction({ kind: "accept" })
  }, "accept section");

  container.append(
    el("div", { class: "actions" }, editToggle, acceptButton),
    editBlock,
    correctiveBlock,
    refineBlock
  );
}
