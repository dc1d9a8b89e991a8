import { SessionClient } from "./client.js";

function param(name: string, fallback: string): string {
  return new URLSearchParams(location.search).get(name) ?? fallback;
}

const canvas = document.getElementById("view") as HTMLCanvasElement;
const hud = document.getElementById("hud") as HTMLElement;

const client = new SessionClient({
  seed: parseInt(param("seed", "7"), 10),
  tickMs: parseInt(param("tick", "80"), 10),
  debug: param("debug", "") !== "",
  canvas,
  hud,
});
client.bindDom();
client.connect();
