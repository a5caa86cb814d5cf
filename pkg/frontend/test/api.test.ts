import { describe, expect, it } from "vitest";

import { ApiError, ServiceClient } from "../src/api.js";
import { makeStubServer } from "./stubServer.js";

function client() {
  const server = makeStubServer();
  return { server, api: new ServiceClient("http://stub.local", server.fetch) };
}

describe("ServiceClient", () => {
  it("creates a session from an image upload", async () => {
    const { api } = client();
    const created = await api.createSession(new Blob([new Uint8Array(64)]), "x.png");
    expect(created.session_id).toMatch(/^stub-/);
    expect(created.report).toContain("edema");
    expect(Object.keys(created.findings)).toHaveLength(14);
  });

  it("raises ApiError with server detail on failure", async () => {
    const { api } = client();
    await expect(api.createSession(new Blob([]))).rejects.toThrowError(ApiError);
    await expect(api.getSession("missing")).rejects.toMatchObject({ status: 404 });
  });

  it("sends a plain message and returns the reply", async () => {
    const { api } = client();
    const { session_id } = await api.createSession(new Blob([new Uint8Array(4)]));
    const resp = await api.sendMessage(session_id, "Is there any Edema?");
    expect(resp.reply).toBe("stub reply to: Is there any Edema?");
    expect(resp.truncated).toBe(false);
    expect(resp.report).toBeUndefined();
  });

  it("carries the correction intent and returns the updated report", async () => {
    const { api, server } = client();
    const { session_id } = await api.createSession(new Blob([new Uint8Array(4)]));
    const resp = await api.sendMessage(session_id, "There is no Edema", "correction");
    expect(resp.report).toBe("No edema is seen. No pneumonia is seen.");
    const sent = server.requests.find((r) => r.url.includes("/messages"));
    expect(sent?.body).toMatchObject({ intent: "correction" });
  });

  it("streams tokens whose concatenation equals the reply", async () => {
    const { api } = client();
    const { session_id } = await api.createSession(new Blob([new Uint8Array(4)]));
    const chunks: string[] = [];
    const resp = await api.sendMessage(session_id, "hello there", undefined, (c) =>
      chunks.push(c),
    );
    expect(chunks.length).toBeGreaterThan(1);
    expect(chunks.join("")).toBe(resp.reply);
  });

  it("fetches the full transcript", async () => {
    const { api } = client();
    const { session_id } = await api.createSession(new Blob([new Uint8Array(4)]));
    await api.sendMessage(session_id, "q1");
    const transcript = await api.getSession(session_id);
    expect(transcript.history.map((h) => h.role)).toEqual(["assistant", "user", "assistant"]);
  });
});
