/** Client-side mirror of the server's session event grammar.
 *
 * Used by tests (and debugging tooling) to validate that any session log
 * produced through the UI is a legal path through the state machine; the
 * UI itself never derives state locally from it.
 */

import type {
  EventKind,
  SectionStatus,
  SessionEvent,
  SessionState
} from "./types.js";

export const EVENT_GRAMMAR: Record<SessionState, readonly EventKind[]> = {
  new: ["priors_submitted"],
  configured: ["config_edited", "outline_generated"],
  outlined: ["config_edited", "outline_edited", "section_retrieved"],
  drafting: [
    "config_edited",
    "outline_edited",
    "section_retrieved",
    "section_drafted",
    "section_edited",
    "corrective_prompt",
    "refinement",
    "section_accepted"
  ],
  complete: []
};

const SECTION_TRANSITIONS: readonly [SectionStatus, SectionStatus][] = [
  ["pending", "retrieved"],
  ["retrieved", "drafted"],
  ["drafted", "drafted"],
  ["drafted", "retrieved"],
  ["drafted", "accepted"]
];

interface OutlineSectionShape {
  id: string;
  status: SectionStatus;
}

interface FoldState {
  state: SessionState;
  sections: Map<string, SectionStatus>;
  lastAt: number;
}

function legalSectionMove(from: SectionStatus, to: SectionStatus): boolean {
  return SECTION_TRANSITIONS.some(([f, t]) => f === from && t === to);
}

function applySectionStatus(
  fold: FoldState,
  sectionId: string,
  to: SectionStatus,
  index: number,
  violations: string[]
): void {
  const from = fold.sections.get(sectionId);
  if (from === undefined) {
    violations.push(`event ${index}: unknown section ${sectionId}`);
    return;
  }
  if (!legalSectionMove(from, to)) {
    violations.push(
      `event ${index}: section ${sectionId} illegal move ${from} -> ${to}`
    );
    return;
  }
  fold.sections.set(sectionId, to);
}

/** Replays a session event log and returns every grammar violation found;
 * an empty array means the log is a legal path. */
export function validateEventLog(events: SessionEvent[]): string[] {
  const violations: string[] = [];
  const fold: FoldState = { state: "new", sections: new Map(), lastAt: -Infinity };

  events.forEach((event, index) => {
    if (!EVENT_GRAMMAR[fold.state].includes(event.kind)) {
      violations.push(
        `event ${index}: ${event.kind} not legal in state ${fold.state}`
      );
      return;
    }
    if (event.at < fold.lastAt) {
      violations.push(`event ${index}: timestamp decreases`);
    }
    fold.lastAt = event.at;
    const detail = event.detail as Record<string, unknown>;

    switch (event.kind) {
      case "priors_submitted":
        fold.state = "configured";
        break;
      case "config_edited":
        break;
      case "outline_generated":
      case "outline_edited": {
        const outline = detail.outline as { sections: OutlineSectionShape[] };
        fold.sections = new Map(
          outline.sections.map((s) => [s.id, s.status])
        );
        if (event.kind === "outline_generated") {
          fold.state = "outlined";
        } else if (
          fold.sections.size > 0 &&
          [...fold.sections.values()].every((s) => s === "accepted")
        ) {
          fold.state = "complete";
        }
        break;
      }
      case "section_retrieved":
        applySectionStatus(
          fold,
          detail.section_id as string,
          "retrieved",
          index,
          violations
        );
        if (fold.state === "outlined") {
          fold.state = "drafting";
        }
        break;
      case "section_drafted":
      case "section_edited":
      case "corrective_prompt":
      case "refinement":
        applySectionStatus(
          fold,
          detail.section_id as string,
          "drafted",
          index,
          violations
        );
        break;
      case "section_accepted": {
        applySectionStatus(
          fold,
          detail.section_id as string,
          "accepted",
          index,
          violations
        );
        if ([...fold.sections.values()].every((s) => s === "accepted")) {
          fold.state = "complete";
        }
        break;
      }
    }
  });
  return violations;
}
