import { boot } from "./app.js";

boot().catch((err) => {
  document.body.textContent = `failed to start: ${err}`;
  console.error(err);
});
