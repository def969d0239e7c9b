import { ApiClient } from "./api.js";
import { App } from "./app.js";

const baseUrl =
  new URLSearchParams(window.location.search).get("api") ??
  "http://127.0.0.1:8701";

const root = document.getElementById("app");
if (!root) {
  throw new Error("missing #app container");
}
const app = new App(root, new ApiClient(baseUrl));
void app.start();
app.store.startPolling();
