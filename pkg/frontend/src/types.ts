// JSON shapes of the phrasebox HTTP service (see docs/http_api.md in the repo root).

export interface PhraseSpan {
  text: string;
  char_span: [number, number];
}

export interface Detection {
  box: [number, number, number, number];
  class: string;
  score: number;
  phrase_index: number;
  anchor_index: number;
  char_span: [number, number];
}

export interface InferResponse {
  image_size: number;
  prompt: {
    text: string;
    phrases: PhraseSpan[];
  };
  detections: Detection[];
}

export interface InferOptions {
  score_thresh?: number;
  nms_iou?: number;
  max_detections?: number;
  chunk_size?: number;
}

export interface InferRequest {
  image: string; // base64 PNG
  classes?: string[];
  text?: string;
  prompt_embedding_id?: string;
  options?: InferOptions;
}

export interface ModelInfo {
  config: Record<string, unknown>;
  checkpoint_path: string;
  seed: number;
  parameter_count: number;
}

export interface JobStatus {
  job_id: string;
  status: "queued" | "running" | "done" | "error";
  error?: string;
  result?: { artifact: string; metrics: Record<string, number> };
}
