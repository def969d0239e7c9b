/** Config review and refinement: direct field edits or a free-text
 * instruction, each one PATCH. */

import { clear, el } from "../dom.js";
import type { AgentConfig } from "../types.js";

export interface ConfigPanelProps {
  config: AgentConfig;
  onFieldEdit: (fields: Record<string, unknown>) => void;
  onInstruction: (instruction: string) => void;
}

export function renderConfigPanel(
  container: HTMLElement,
  props: ConfigPanelProps
): void {
  clear(container);
  const { config } = props;

  const personaInput = el("input", { class: "persona", type: "text" }) as HTMLInputElement;
  personaInput.value = config.persona;
  const styleInput = el("input", { class: "style", type: "text" }) as HTMLInputElement;
  styleInput.value = config.style;

  container.append(
    el("h2", {}, `Agent configuration (rev ${config.revision})`),
    el("label", {}, "Persona ", personaInput),
    el("label", {}, "Style ", styleInput),
    el("p", { class: "domain" }, `Domain: ${config.target_domain}`),
    el(
      "ul",
      { class: "structure" },
      ...config.structure_expectations.map((item) => el("li", {}, item))
    ),
    el("button", {
      class: "save-config",
      onclick: () => {
        const fields: Record<string, unknown> = {};
        if (personaInput.value !== config.persona) {
          fields.persona = personaInput.value;
        }
        if (styleInput.value !== config.style) {
          fields.style = styleInput.value;
        }
        if (Object.keys(fields).length > 0) {
          props.onFieldEdit(fields);
        }
      }
    }, "save fields")
  );

  const instructionInput = el("input", {
    class: "config-instruction",
    type: "text",
    placeholder: "e.g. 'more casual tone'"
  }) as HTMLInputElement;
  container.append(
    el(
      "div",
      { class: "config-instruction-block" },
      instructionInput,
      el("button", {
        class: "send-config-instruction",
        onclick: () => {
          const instruction = instructionInput.value.trim();
          if (instruction) {
            props.onInstruction(instruction);
            instructionInput.value = "";
          }
        }
      }, "apply instruction")
    )
  );
}
