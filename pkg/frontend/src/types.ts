/** Wire types for the inference service. */

export interface Placement {
  tx: number;
  ty: number;
  scale: number;
}

export interface PredictBody {
  fg_png: string;
  bg_png: string;
  p0?: number[];
  placement?: Placement;
  stages?: number;
  previews?: boolean;
  interp?: number;
}

export interface PredictResponse {
  states: number[][];
  homographies: number[][];
  interp_homographies?: number[][];
  previews?: string[];
  model: Record<string, unknown>;
}

export interface ModelInfo {
  kind: string;
  config_hash: string;
  n_stages: number;
  resolution: number[];
}
