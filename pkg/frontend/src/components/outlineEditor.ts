/** Outline editor: drag to reorder, inline retitle, add and remove.
 *
 * Every completed gesture emits exactly one outline command through
 * `onCommand`; the caller dispatches it as one PATCH and re-renders from
 * the response.
 */

import { clear, el } from "../dom.js";
import type { Outline, OutlineCommand, OutlineSection } from "../types.js";

export interface OutlineEditorProps {
  outline: Outline;
  onCommand: (command: OutlineCommand) => void;
  onSelect: (sectionId: string) => void;
}

function statusChip(section: OutlineSection): HTMLElement {
  return el(
    "span",
    { class: `chip chip-${section.status}`, "data-status": section.status },
    section.status
  );
}

export function renderOutlineEditor(
  container: HTMLElement,
  props: OutlineEditorProps
): void {
  clear(container);
  const { outline, onCommand, onSelect } = props;
  let dragged: string | null = null;

  const list = el("ol", { class: "outline-list" });
  outline.sections.forEach((section, index) => {
    const retitleInput = el("input", {
      class: "retitle-input",
      value: section.heading,
      type: "text"
    }) as HTMLInputElement;
    retitleInput.value = section.heading;
    retitleInput.addEventListener("change", () => {
      const heading = retitleInput.value.trim();
      if (heading && heading !== section.heading) {
        onCommand({ op: "retitle", section_id: section.id, heading });
      }
    });

    const item = el(
      "li",
      {
        class: "outline-item",
        draggable: true,
        "data-section-id": section.id,
        "data-index": String(index)
      },
      el("span", { class: "drag-handle" }, "::"),
      retitleInput,
      statusChip(section),
      el("button", {
        class: "open-section",
        onclick: () => onSelect(section.id)
      }, "open"),
      el("button", {
        class: "remove-section",
        onclick: () => onCommand({ op: "remove", section_id: section.id })
      }, "remove")
    );
    item.addEventListener("dragstart", () => {
      dragged = section.id;
    });
    item.addEventListener("dragover", (event) => event.preventDefault());
    item.addEventListener("drop", (event) => {
      event.preventDefault();
      if (dragged && dragged !== section.id) {
        onCommand({ op: "reorder", section_id: dragged, position: index });
      }
      dragged = null;
    });
    list.append(item);
  });

  const addInput = el("input", {
    class: "add-heading",
    type: "text",
    placeholder: "New section heading"
  }) as HTMLInputElement;
  const addButton = el("button", {
    class: "add-section",
    onclick: () => {
      const heading = addInput.value.trim();
      if (heading) {
        onCommand({ op: "add", heading });
        addInput.value = "";
      }
    }
  }, "add section");

  container.append(
    el("h2", {}, outline.title),
    list,
    el("div", { class: "outline-add" }, addInput, addButton)
  );
}
