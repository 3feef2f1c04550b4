"""Per-episode trajectory dumps and SVG trajectory plots."""

from __future__ import annotations

import json
import xml.etree.ElementTree as ET
from pathlib import Path

import numpy as np

TRACE_VERSION = 1


def _num(x):
    return None if x is None else float(x)


def trace_dict(traj, episode, env, metrics=None):
    """JSON-ready record of one executed episode, including the house graph for plotting."""
    return {
        "trace_version": TRACE_VERSION,
        "episode_id": episode.episode_id,
        "house_id": env.house_id,
        "instruction": env.config.vocab().decode(episode.instruction),
        "start_node": episode.start_node,
        "goal_nodes": list(episode.goal_nodes),
        "expert_path": list(episode.expert_path),
        "graph": {
            "coords": env.coords.tolist(),
            "room_labels": env.room_labels.tolist(),
            "edges": [[u, v] for u, v, _ in env.edges],
        },
        "trajectory": {
            "nodes": list(traj.nodes),
            "final_node": traj.final_node,
            "selected_object": traj.selected_object,
            "length": float(traj.length),
            "forced_stop": traj.forced_stop,
            "decisions": [
                {
                    "node": d.node,
                    "chosen": d.chosen,
                    "stop_prob": float(d.stop_prob),
                    "sigma": _num(d.sigma),
                    "route": d.route,
                    "index": d.index,
                    "scores": d.scores,
                    "map": d.snapshot,
                }
                for d in traj.decisions
            ],
        },
        "metrics": metrics,
    }


def write_trace(path, traj, episode, env, metrics=None):
    doc = trace_dict(traj, episode, env, metrics)
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True))
    return path


def load_trace(path):
    doc = json.loads(Path(path).read_text())
    if not doc or "trajectory" not in doc or not doc["trajectory"].get("nodes"):
        raise ValueError(f"{path}: empty or malformed trace")
    return doc


# -- SVG ---------------------------------------------------------------------------

ROOM_COLORS = ("#e8d5b7", "#b8d8e8", "#d4e8b8", "#e8b8c8", "#c8b8e8", "#e8e0b8",
               "#b8e8d8", "#e8c8a8", "#a8c8e8", "#d8d8d8", "#c8e8a8", "#e8a8a8")


def render_svg(doc, width=480, margin=30):
    """Top-down view of the house: floors side by side, expert path and predicted walk overlaid."""
    nodes = doc["trajectory"]["nodes"]
    if not nodes:
        raise ValueError("trace has no trajectory")
    coords = np.asarray(doc["graph"]["coords"], dtype=float)
    floors = sorted(set(coords[:, 2].round(6).tolist()))
    lo, hi = coords[:, :2].min(axis=0), coords[:, :2].max(axis=0)
    span = float(max(hi - lo)) or 1.0
    panel = width - 2 * margin
    scale = panel / span

    def xy(u):
        x, y, z = coords[u]
        f = floors.index(round(float(z), 6))
        return (margin + f * (panel + margin) + (x - lo[0]) * scale, margin + (hi[1] - y) * scale)

    total_w = len(floors) * (panel + margin) + margin
    svg = ET.Element("svg", xmlns="http://www.w3.org/2000/svg", width=str(total_w), height=str(width),
                     viewBox=f"0 0 {total_w} {width}")
    ET.SubElement(svg, "title").text = f"{doc['episode_id']} ({doc['house_id']})"

    def polyline(path, **style):
        # a one-node walk still gets an element so every plot has both layers
        pts = " ".join(f"{x:.2f},{y:.2f}" for x, y in (xy(u) for u in path))
        ET.SubElement(svg, "polyline", points=pts, fill="none", **style)

    g = ET.SubElement(svg, "g", id="graph")
    for u, v in doc["graph"]["edges"]:
        (x1, y1), (x2, y2) = xy(u), xy(v)
        ET.SubElement(g, "line", x1=f"{x1:.2f}", y1=f"{y1:.2f}", x2=f"{x2:.2f}", y2=f"{y2:.2f}",
                      stroke="#bbbbbb", **{"stroke-width": "1"})
    rooms = doc["graph"].get("room_labels", [0] * len(coords))
    for u in range(len(coords)):
        x, y = xy(u)
        ET.SubElement(g, "circle", cx=f"{x:.2f}", cy=f"{y:.2f}", r="5",
                      fill=ROOM_COLORS[rooms[u] % len(ROOM_COLORS)], stroke="#666666")

    polyline(doc["expert_path"], stroke="#2a9d3a", id="expert", **{"stroke-width": "4", "stroke-opacity": "0.6"})
    polyline(nodes, stroke="#d0432b", id="predicted", **{"stroke-width": "2", "stroke-dasharray": "5,3"})

    for u in doc["goal_nodes"]:
        x, y = xy(u)
        ET.SubElement(svg, "rect", x=f"{x - 7:.2f}", y=f"{y - 7:.2f}", width="14", height="14",
                      fill="none", stroke="#2a9d3a", **{"stroke-width": "2", "class": "goal"})
    sx, sy = xy(doc["start_node"])
    ET.SubElement(svg, "circle", cx=f"{sx:.2f}", cy=f"{sy:.2f}", r="8", fill="none", stroke="#1f4fbf",
                  **{"stroke-width": "3", "class": "start"})
    fx, fy = xy(doc["trajectory"]["final_node"])
    ET.SubElement(svg, "path", d=f"M{fx - 6:.2f},{fy - 6:.2f} L{fx + 6:.2f},{fy + 6:.2f} M{fx - 6:.2f},{fy + 6:.2f} L{fx + 6:.2f},{fy - 6:.2f}",
                  stroke="#d0432b", **{"stroke-width": "3", "class": "final"})
    ET.SubElement(svg, "text", x=str(margin), y=str(width - 8), **{"font-size": "11", "font-family": "monospace"}).text = (
        " ".join(doc.get("instruction", []))
    )
    return ET.tostring(svg, encoding="unicode")


def plot_trace(trace_path, out_path):
    Path(out_path).write_text(render_svg(load_trace(trace_path)))
    return out_path
