/** Evidence panel: retrieval provenance for one section, read straight
 * from the session's last section_retrieved event. */

import { clear, el } from "../dom.js";
import type { RetrievalProvenance, Session } from "../types.js";

export function provenanceForSection(
  session: Session,
  sectionId: string
): RetrievalProvenance | null {
  for (let i = session.event_log.length - 1; i >= 0; i--) {
    const event = session.event_log[i];
    if (
      event.kind === "section_retrieved" &&
      event.detail.section_id === sectionId
    ) {
      return event.detail as unknown as RetrievalProvenance;
    }
  }
  return null;
}

export function renderEvidencePanel(
  container: HTMLElement,
  session: Session,
  sectionId: string
): void {
  clear(container);
  const provenance = provenanceForSection(session, sectionId);
  if (!provenance) {
    container.append(el("p", {}, "No retrieval yet for this section."));
    return;
  }
  container.append(el("h3", {}, "Evidence"));
  if (provenance.degraded_search) {
    container.append(
      el("p", { class: "degraded" }, "Web search was unavailable for this retrieval.")
    );
  }
  container.append(
    el(
      "ul",
      { class: "private-evidence" },
      ...provenance.private.map((row) =>
        el(
          "li",
          { class: "chip chip-chunk", "data-chunk-id": row.chunk_id },
          `chunk ${row.chunk_id.slice(0, 8)} (${row.score.toFixed(3)})`
        )
      )
    ),
    el(
      "ul",
      { class: "web-evidence" },
      ...provenance.web.map((row) =>
        el(
          "li",
          { class: "chip chip-web" },
          el("a", { href: row.url }, row.title || row.url)
        )
      )
    ),
    el(
      "ul",
      { class: "experience-evidence" },
      ...provenance.experience.map(([recordId, score]) =>
        el(
          "li",
          { class: "chip chip-experience", "data-record-id": recordId },
          `experience ${recordId.slice(0, 8)} (${score.toFixed(3)})`
        )
      )
    )
  );
}
