// Wire types mirroring the review service payloads. Identifiers pass through
// untouched: the server is the source of truth.

export type Verdict = 'background_only' | 'contains_foreground' | 'skip';

export interface CandidateCard {
  sample_id: string;
  class_name: string;
  score: number;
  rank: number;
  image_url: string;
}

export interface BatchResponse {
  items: CandidateCard[];
  done: boolean;
}

export interface Progress {
  decided: number;
  positives: number;
  rate: number;
  remaining: number;
  collected: number;
  target: number;
  estimated_remaining_reviews: number;
  done: boolean;
}

export interface Decision {
  sample_id: string;
  class_name: string;
  verdict: Verdict;
  annotator_id: string;
  timestamp: number;
}

export interface DecisionAck {
  ok: boolean;
  duplicate: boolean;
}
