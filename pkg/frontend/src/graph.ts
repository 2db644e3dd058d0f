// Parse the service's DOT export into a model and render it as SVG with the
// participant's current state highlighted. Layout is a simple BFS layering:
// good enough for protocol graphs of a dozen states.

export interface GraphNode {
  name: string;
  shape: string; // circle | doublecircle | octagon
}

export interface GraphEdge {
  from: string;
  to: string;
  label: string;
}

export interface GraphModel {
  name: string;
  nodes: GraphNode[];
  edges: GraphEdge[];
  initial: string | null;
}

const NODE_RE = /^\s*"((?:[^"\\]|\\.)*)" \[shape=(\w+)\];$/;
const EDGE_RE = /^\s*"((?:[^"\\]|\\.)*)" -> "((?:[^"\\]|\\.)*)"(?: \[label="((?:[^"\\]|\\.)*)"\])?;$/;
const NAME_RE = /^digraph "((?:[^"\\]|\\.)*)" \{$/;

function unescape(text: string): string {
  return text.replace(/\\"/g, '"').replace(/\\\\/g, "\\");
}

export function parseDot(dot: string): GraphModel {
  const model: GraphModel = { name: "", nodes: [], edges: [], initial: null };
  for (const line of dot.split("\n")) {
    const header = NAME_RE.exec(line.trim());
    if (header) {
      model.name = unescape(header[1]);
      continue;
    }
    const node = NODE_RE.exec(line);
    if (node) {
      if (unescape(node[1]) !== "__start") {
        model.nodes.push({ name: unescape(node[1]), shape: node[2] });
      }
      continue;
    }
    const edge = EDGE_RE.exec(line);
    if (edge) {
      const from = unescape(edge[1]);
      const to = unescape(edge[2]);
      if (from === "__start") {
        model.initial = to;
      } else {
        model.edges.push({ from, to, label: unescape(edge[3] ?? "") });
      }
    }
  }
  return model;
}

export interface PlacedNode extends GraphNode {
  x: number;
  y: number;
}

export function layoutGraph(model: GraphModel): PlacedNode[] {
  const ranks = new Map<string, number>();
  const queue: string[] = [];
  if (model.initial) {
    ranks.set(model.initial, 0);
    queue.push(model.initial);
  }
  while (queue.length) {
    const current = queue.shift()!;
    for (const edge of model.edges) {
      if (edge.from === current && !ranks.has(edge.to)) {
        ranks.set(edge.to, (ranks.get(current) ?? 0) + 1);
        queue.push(edge.to);
      }
    }
  }
  let orphanRank = 0;
  for (const node of model.nodes) {
    if (!ranks.has(node.name)) {
      orphanRank = Math.max(orphanRank, ...[...ranks.values()], 0) + 1;
      ranks.set(node.name, orphanRank);
    }
  }
  const columns = new Map<number, string[]>();
  for (const node of model.nodes) {
    const rank = ranks.get(node.name) ?? 0;
    const column = columns.get(rank) ?? [];
    column.push(node.name);
    columns.set(rank, column);
  }
  const placed: PlacedNode[] = [];
  for (const node of model.nodes) {
    const rank = ranks.get(node.name) ?? 0;
    const column = columns.get(rank)!;
    const row = column.indexOf(node.name);
    placed.push({ ...node, x: 130 + rank * 190, y: 90 + row * 120 });
  }
  return placed;
}

function escapeXml(text: string): string {
  return text
    .replace(/&/g, "&amp;")
    .replace(/</g, "&lt;")
    .replace(/>/g, "&gt;")
    .replace(/"/g, "&quot;");
}

export function renderGraphSvg(model: GraphModel, currentState: string | null): string {
  const placed = layoutGraph(model);
  const byName = new Map(placed.map((n) => [n.name, n]));
  const width = Math.max(...placed.map((n) => n.x), 200) + 140;
  const height = Math.max(...placed.map((n) => n.y), 120) + 90;
  const parts: string[] = [];
  parts.push(
    `<svg class="graph" viewBox="0 0 ${width} ${height}" xmlns="http://www.w3.org/2000/svg">`,
    `<defs><marker id="arrow" viewBox="0 0 10 10" refX="9" refY="5" ` +
      `markerWidth="7" markerHeight="7" orient="auto-start-reverse">` +
      `<path d="M 0 0 L 10 5 L 0 10 z" fill="#5f6b7a"/></marker></defs>`,
  );
  for (const edge of model.edges) {
    const from = byName.get(edge.from);
    const to = byName.get(edge.to);
    if (!from || !to) continue;
    if (edge.from === edge.to) {
      const x = from.x;
      const y = from.y - 38;
      parts.push(
        `<path d="M ${x - 14} ${y} C ${x - 34} ${y - 44}, ${x + 34} ${y - 44}, ` +
          `${x + 14} ${y}" fill="none" stroke="#5f6b7a" marker-end="url(#arrow)"/>`,
        `<text x="${x}" y="${y - 40}" class="edge-label">${escapeXml(edge.label)}</text>`,
      );
      continue;
    }
    const dx = to.x - from.x;
    const dy = to.y - from.y;
    const distance = Math.hypot(dx, dy) || 1;
    const startX = from.x + (dx / distance) * 40;
    const startY = from.y + (dy / distance) * 40;
    const endX = to.x - (dx / distance) * 44;
    const endY = to.y - (dy / distance) * 44;
    const midX = (startX + endX) / 2;
    const midY = (startY + endY) / 2 - 12;
    parts.push(
      `<path d="M ${startX} ${startY} Q ${midX} ${midY}, ${endX} ${endY}" ` +
        `fill="none" stroke="#5f6b7a" marker-end="url(#arrow)"/>`,
      `<text x="${midX}" y="${midY - 4}" class="edge-label">${escapeXml(edge.label)}</text>`,
    );
  }
  if (model.initial && byName.has(model.initial)) {
    const node = byName.get(model.initial)!;
    parts.push(
      `<circle cx="${node.x - 90}" cy="${node.y}" r="5" fill="#5f6b7a"/>`,
      `<line x1="${node.x - 85}" y1="${node.y}" x2="${node.x - 44}" y2="${node.y}" ` +
        `stroke="#5f6b7a" marker-end="url(#arrow)"/>`,
    );
  }
  for (const node of placed) {
    const current = node.name === currentState;
    const classes = ["node", `shape-${node.shape}`, current ? "current" : ""].join(" ").trim();
    parts.push(`<g class="${classes}" data-state="${escapeXml(node.name)}">`);
    if (node.shape === "octagon") {
      const r = 40;
      const points = Array.from({ length: 8 }, (_, i) => {
        const angle = (Math.PI / 8) * (2 * i + 1);
        return `${node.x + r * Math.cos(angle)},${node.y + r * Math.sin(angle)}`;
      }).join(" ");
      parts.push(`<polygon points="${points}"/>`);
    } else {
      parts.push(`<circle cx="${node.x}" cy="${node.y}" r="40"/>`);
      if (node.shape === "doublecircle") {
        parts.push(`<circle cx="${node.x}" cy="${node.y}" r="34" fill="none"/>`);
      }
    }
    parts.push(
      `<text x="${node.x}" y="${node.y + 4}" class="node-label">` +
        `${escapeXml(node.name)}</text>`,
      `</g>`,
    );
  }
  parts.push("</svg>");
  return parts.join("\n");
}
