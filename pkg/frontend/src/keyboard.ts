import type { Choice } from "./types.js";

/** A/B label the visible task from the keyboard; keystrokes inside text
 * inputs are left alone. Returns a detach function. */
export function attachLabelKeys(
  target: EventTarget,
  onChoice: (choice: Choice) => void,
): () => void {
  const handler = (event: Event) => {
    const key = (event as KeyboardEvent).key;
    const source = event.target;
    if (
      source instanceof HTMLInputElement ||
      source instanceof HTMLTextAreaElement
    ) {
      return;
    }
    if (key === "a" || key === "A") {
      event.preventDefault();
      onChoice("A");
    } else if (key === "b" || key === "B") {
      event.preventDefault();
      onChoice("B");
    }
  };
  target.addEventListener("keydown", handler);
  return () => target.removeEventListener("keydown", handler);
}
