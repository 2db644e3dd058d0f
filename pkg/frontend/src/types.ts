// Payload shapes returned by the admin service. The console keeps no state
// that is not reconstructible from these.

export interface StudyDoc {
  study_id: string;
  name: string;
  pack: string;
  protocol_id: string;
  protocol_version: string;
  timezone_default: string;
  staff_addresses: string[];
  status: string;
  created_at: string;
}

export interface ParticipantDoc {
  participant_id: string;
  study_id: string;
  current_state: string;
  state_entered_at: string;
  registered_at: string;
  contact_address: string;
  timezone: string;
  status: string;
  context: Record<string, unknown>;
}

export interface AuditRecordDoc {
  seq: number;
  participant_id: string | null;
  timestamp: string;
  kind: string;
  detail: Record<string, unknown>;
}

export interface MetricsDoc {
  successful_fasts: number;
  days_enrolled: number;
  success_rate: number;
  unrecognized_messages: number;
  total_incoming: number;
  error_rate: number;
  counters: Record<string, number>;
  escalations: number;
}

export interface GraphDoc {
  dot: string;
  states: string[];
  initial_state: string;
}

export interface TransitionResponse {
  result: string;
  from_state: string;
  to_state: string;
  participant: ParticipantDoc;
}

export interface ChatResponse {
  delivered: boolean;
  participant_id: string | null;
  replies: string[];
}
