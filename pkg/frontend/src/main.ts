/** Entry point: pick (or read from the URL hash) a session id, then mount the
 * review board against the service the page was served from. */

import { ApiClient } from "./api.js";
import { SessionStore } from "./state.js";
import { renderBoard } from "./ui.js";

async function boot(): Promise<void> {
  const root = document.getElementById("app");
  if (!root) {
    throw new Error("missing #app element");
  }
  const api = new ApiClient("");
  const sessionId = window.location.hash.replace(/^#/, "");
  if (!sessionId) {
    const sessions = await api.listSessions();
    root.textContent = "";
    const title = document.createElement("h2");
    title.textContent = "pick a session";
    root.append(title);
    const list = document.createElement("ul");
    for (const id of sessions) {
      const item = document.createElement("li");
      const link = document.createElement("a");
      link.href = `#${id}`;
      link.textContent = id;
      link.addEventListener("click", () => setTimeout(boot));
      item.append(link);
      list.append(item);
    }
    if (sessions.length === 0) {
      const hint = document.createElement("p");
      hint.textContent =
        "no sessions yet; create one with POST /sessions or the CLI, then reload";
      root.append(hint);
    }
    root.append(list);
    return;
  }

  const store = new SessionStore(api, sessionId);
  store.subscribe(() => renderBoard(root, store));
  renderBoard(root, store);
  await store.load();
}

window.addEventListener("hashchange", () => void boot());
void boot();
