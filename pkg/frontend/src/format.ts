export function escapeHtml(text: string): string {
  return text
    .replace(/&/g, "&amp;")
    .replace(/</g, "&lt;")
    .replace(/>/g, "&gt;")
    .replace(/"/g, "&quot;");
}

export function percent(fraction: number): string {
  return `${(fraction * 100).toFixed(1)}%`;
}

export function shortTime(iso: string): string {
  return iso.replace("T", " ").replace("Z", "").slice(0, 19);
}

export function auditSummary(kind: string, detail: Record<string, unknown>): string {
  switch (kind) {
    case "message_in":
      return `received: ${String(detail.body ?? "")}`;
    case "message_out":
      return `sent: ${String(detail.body ?? "")}`;
    case "transition":
      if (detail.event === "register") return `registered in ${String(detail.to)}`;
      return `${String(detail.from)} → ${String(detail.to)} on ${String(detail.trigger)}`;
    case "rejection":
      return `rejected (${String(detail.category)}): ${String(detail.reason)}`;
    case "manual":
      if (detail.action === "withdraw") return `withdrawn by ${String(detail.actor)}`;
      return `manual move to ${String(detail.target)} by ${String(detail.actor)}: ` +
        `${String(detail.reason)}`;
    case "notification":
      return `staff notified (${String(detail.category)}): ${String(detail.reason)}`;
    case "snapshot_marker":
      return `snapshot #${String(detail.sequence)}`;
    default:
      return kind;
  }
}
