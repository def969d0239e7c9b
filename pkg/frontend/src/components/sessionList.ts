/** Session list and creation. */

import { ApiClient } from "../api.js";
import { clear, el } from "../dom.js";

export interface SessionListProps {
  client: ApiClient;
  onOpen: (sessionId: string) => void;
  onCreate: () => void;
}

export async function renderSessionList(
  container: HTMLElement,
  props: SessionListProps
): Promise<void> {
  clear(container);
  const { sessions } = await props.client.listSessions();
  container.append(
    el("h2", {}, "Sessions"),
    el(
      "ul",
      { class: "session-list" },
      ...sessions.map((sessionId) =>
        el(
          "li",
          {},
          el("button", {
            class: "open-session",
            "data-session-id": sessionId,
            onclick: () => props.onOpen(sessionId)
          }, sessionId.slice(0, 12))
        )
      )
    ),
    el("button", { class: "new-session", onclick: () => props.onCreate() },
      "new session")
  );
}
