/** Experience browser: filter by kind, search by context descriptor. */

import { ApiClient } from "../api.js";
import { clear, el } from "../dom.js";
import type { ExperienceRecordView } from "../types.js";

function summarize(record: ExperienceRecordView): string {
  const payload = record.payload as Record<string, string>;
  switch (record.kind) {
    case "direct_edit":
      return `edit: "${(payload.original ?? "").slice(0, 40)}" -> "${(
        payload.revised ?? ""
      ).slice(0, 40)}"`;
    case "corrective_prompt":
      return `instruction: ${payload.instruction ?? ""}`;
    case "refinement":
      return `refine: "${payload.original_phrase}" -> "${payload.revised_phrase}"`;
  }
}

export function renderExperienceBrowser(
  container: HTMLElement,
  client: ApiClient
): { search: () => Promise<void> } {
  clear(container);
  const queryInput = el("input", {
    class: "experience-query",
    type: "text",
    placeholder: "Search by context"
  }) as HTMLInputElement;
  const kindSelect = el("select", { class: "experience-kind" }) as HTMLSelectElement;
  for (const kind of ["", "direct_edit", "corrective_prompt", "refinement"]) {
    kindSelect.append(el("option", { value: kind }, kind || "all kinds"));
  }
  const results = el("ul", { class: "experience-results" });

  async function search(): Promise<void> {
    const { records } = await client.browseExperience(
      queryInput.value.trim(),
      kindSelect.value
    );
    clear(results);
    for (const record of records) {
      results.append(
        el(
          "li",
          { class: `experience-item kind-${record.kind}`, "data-kind": record.kind },
          el("span", { class: "chip" }, record.kind),
          ` ${summarize(record)} `,
          el("small", {}, record.context_descriptor)
        )
      );
    }
  }

  container.append(
    el("h2", {}, "Experience"),
    el(
      "div",
      { class: "experience-controls" },
      queryInput,
      kindSelect,
      el("button", { class: "experience-search", onclick: () => void search() },
        "search")
    ),
    results
  );
  return { search };
}
