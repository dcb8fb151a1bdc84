/** Thin fetch client for the compositing service. */

import { PredictBody, PredictResponse, ModelInfo } from "./types.js";

export async function predict(
  base: string, body: PredictBody, signal?: AbortSignal,
): Promise<PredictResponse> {
  const res = await fetch(`${base}/predict`, {
    method: "POST",
    headers: { "content-type": "application/json" },
    body: JSON.stringify(body),
    signal,
  });
  if (!res.ok) {
    let detail = `${res.status}`;
    try {
      const err = await res.json();
      if (err && err.detail) detail = `${res.status}: ${err.detail}`;
    } catch {
      // non-JSON error body, status alone will do
    }
    throw new Error(`predict failed (${detail})`);
  }
  return (await res.json()) as PredictResponse;
}

export async function modelInfo(base: string): Promise<ModelInfo> {
  const res = await fetch(`${base}/model-info`);
  if (!res.ok) throw new Error(`model info failed (${res.status})`);
  return (await res.json()) as ModelInfo;
}
