import { startApp } from "./app.js";

startApp().catch((err) => {
  const banner = document.getElementById("banner");
  if (banner !== null) {
    banner.textContent = `viewer failed to start: ${err instanceof Error ? err.message : err}`;
    banner.style.display = "";
  }
});
