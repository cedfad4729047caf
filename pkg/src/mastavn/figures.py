"""Figure data: top-down trajectory SVGs and attention-weight CSV dumps."""

from __future__ import annotations

import csv
import json
from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

from . import env as E
from .model import ModelConfig, TOKENS_PER_AGENT, forward

CELL = 32
AGENT_COLOURS = ("#d62728", "#1f77b4", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")


class TraceError(ValueError):
    pass


def read_trace(path, episode: int = 0) -> tuple[dict, list[dict]]:
    """Header and step lines of the ``episode``-th episode in a JSON-lines trace."""
    episodes: list[tuple[dict, list[dict]]] = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise TraceError(f"{path}:{lineno}: not JSON ({exc.msg})") from exc
            kind = rec.get("type")
            if kind == "episode":
                episodes.append((rec, []))
            elif kind == "step":
                if not episodes:
                    raise TraceError(f"{path}:{lineno}: step before any episode header")
                episodes[-1][1].append(rec)
            else:
                raise TraceError(f"{path}:{lineno}: unknown record type {kind!r}")
    if episode >= len(episodes):
        raise TraceError(f"{path}: has {len(episodes)} episodes, asked for index {episode}")
    header, steps = episodes[episode]
    for key in ("scene", "start"):
        if key not in header:
            raise TraceError(f"{path}: episode header lacks {key!r}")
    return header, steps


def _centre(cell) -> tuple[float, float]:
    r, c = cell
    return c * CELL + CELL / 2, r * CELL + CELL / 2


def trajectory_svg(header: dict, steps: list[dict]) -> str:
    scene = E.Scene.from_dict(header["scene"])
    h, w = scene.height, scene.width
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{w * CELL}" height="{h * CELL}" '
        f'viewBox="0 0 {w * CELL} {h * CELL}">',
        f'<rect class="floor" x="0" y="0" width="{w * CELL}" height="{h * CELL}" fill="#ffffff" stroke="#000"/>',
    ]
    for r, c in np.argwhere(scene.blocked):
        out.append(f'<rect class="wall" x="{c * CELL}" y="{r * CELL}" width="{CELL}" height="{CELL}" fill="#555"/>')
    sx, sy = _centre(scene.source)
    out.append(f'<circle class="source" cx="{sx}" cy="{sy}" r="{CELL * 0.35}" fill="#ffcc00" stroke="#000"/>')
    n = len(header["start"])
    if steps:
        for j in range(n):
            cells = [header["start"][j][0]] + [s["poses"][j][0] for s in steps]
            pts = " ".join(f"{x:g},{y:g}" for x, y in map(_centre, cells))
            colour = AGENT_COLOURS[j % len(AGENT_COLOURS)]
            out.append(
                f'<polyline class="agent-path" data-agent="{j}" points="{pts}" fill="none" '
                f'stroke="{colour}" stroke-width="3" stroke-opacity="0.8"/>'
            )
            bx, by = _centre(cells[0])
            out.append(f'<rect class="start" data-agent="{j}" x="{bx - 6}" y="{by - 6}" width="12" height="12" fill="{colour}"/>')
            ex, ey = _centre(cells[-1])
            out.append(f'<circle class="stop" data-agent="{j}" cx="{ex}" cy="{ey}" r="6" fill="none" stroke="{colour}" stroke-width="3"/>')
    title = escape(f"{scene.scene_id} sound={header.get('sound')} steps={len(steps)}")
    out.append(f"<title>{title}</title>")
    out.append("</svg>")
    return "\n".join(out)


def emit_trajectory_plot(trace_path, out_path, episode: int = 0) -> Path:
    header, steps = read_trace(trace_path, episode)
    out_path = Path(out_path)
    out_path.write_text(trajectory_svg(header, steps))
    return out_path


ATTN_FIELDS = ("sample", "stage", "layer", "head", "query", "key", "weight", "masked")


def attention_rows(params, cfg: ModelConfig, visual, audio):
    """Yield one dict per (sample, attention stage, head, query, key)."""
    capture: list[dict] = []
    forward(visual, audio, params, cfg, capture=capture)
    b = np.asarray(visual).reshape(-1, cfg.n_agents, E.VIEW, E.VIEW, 2).shape[0]
    for entry in capture:
        stage = entry["stage"]
        weights = entry["weights"]
        mask = entry["mask"]
        layer = int(next(part for part in stage.split(".") if part.isdigit()))
        m, heads, lq, lk = weights.shape
        groups = m // b  # encoder stacks fold agents into the batch axis
        for i in range(m):
            for h in range(heads):
                for q in range(lq):
                    for k in range(lk):
                        yield {
                            "sample": i // groups if groups else i,
                            "stage": stage if groups == 1 else f"{stage}[agent{i % groups}]",
                            "layer": layer,
                            "head": h,
                            "query": q,
                            "key": k,
                            "weight": repr(float(weights[i, h, q, k])),
                            "masked": int(mask is not None and not mask[q, k]),
                        }


def emit_attention_dump(params, cfg: ModelConfig, visual, audio, out_path) -> Path:
    out_path = Path(out_path)
    with open(out_path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=ATTN_FIELDS)
        w.writeheader()
        for row in attention_rows(params, cfg, visual, audio):
            w.writerow(row)
    return out_path


def observation_batch(scenes, cfg: ModelConfig, n: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Reset-time observations for ``n`` episodes drawn deterministically from ``seed``."""
    rng = np.random.default_rng(seed)
    sounds = E.split_sounds("heard")
    vis, aud = [], []
    for _ in range(n):
        scene = scenes[rng.integers(len(scenes))]
        _, obs = E.reset(scene, cfg.n_agents, sounds[rng.integers(len(sounds))], int(rng.integers(2**31)))
        vis.append([o.visual for o in obs])
        aud.append([o.audio for o in obs])
    return np.array(vis), np.array(aud)


def token_labels(cfg: ModelConfig) -> list[str]:
    out = []
    for a in range(cfg.n_agents):
        out += [f"a{a}.vis{t}" for t in range(TOKENS_PER_AGENT - 2)] + [f"a{a}.left", f"a{a}.right"]
    return out
