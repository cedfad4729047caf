import csv
import json
import re

import numpy as np
import pytest

from mastavn import env as E
from mastavn import figures as F
from mastavn import metrics as M
from mastavn.model import ModelConfig, forward, init_params

CFG = ModelConfig(n_agents=2, d_model=8, n_heads=2, n_encoder_layers=1, n_decoder_layers=1, mlp_ratio=2)
SCENE = E.generate_scene(2, 7, 7, 0.2)


def write_trace(path, max_steps=6, n_agents=2):
    _, recs = M.evaluate(M.RandomPolicy(), [SCENE], "heard", 1, seed=4, n_agents=n_agents, max_steps=max_steps,
                         keep_traces=True)
    path.write_text("\n".join(recs[0].trace) + "\n")
    return recs[0]


def polylines(svg):
    return re.findall(r'<polyline class="agent-path" data-agent="(\d)" points="([^"]*)"', svg)


def test_two_agent_trace_gives_two_polylines(tmp_path):
    rec = write_trace(tmp_path / "t.jsonl")
    svg = F.emit_trajectory_plot(tmp_path / "t.jsonl", tmp_path / "t.svg").read_text()
    lines = polylines(svg)
    assert [a for a, _ in lines] == ["0", "1"]
    assert lines[0][1] != lines[1][1]
    for _, pts in lines:
        assert len(pts.split()) == rec.steps[0] + 1
    assert svg.count('class="wall"') == int(SCENE.blocked.sum())
    assert 'class="source"' in svg and svg.count('class="start"') == 2 and svg.count('class="stop"') == 2


def test_empty_trajectory_is_scene_only(tmp_path):
    rec = write_trace(tmp_path / "t.jsonl")
    header = rec.trace[0]
    (tmp_path / "e.jsonl").write_text(header + "\n")
    svg = F.emit_trajectory_plot(tmp_path / "e.jsonl", tmp_path / "e.svg").read_text()
    assert polylines(svg) == [] and 'class="source"' in svg and svg.startswith("<svg")


@pytest.mark.parametrize(
    "text, match",
    [("not json\n", "not JSON"), ('{"type": "step"}\n', "before any episode"), ('{"type": "x"}\n', "unknown"),
     ("", "0 episodes"), ('{"type": "episode"}\n', "lacks")],
)
def test_malformed_traces(tmp_path, text, match):
    (tmp_path / "bad.jsonl").write_text(text)
    with pytest.raises(F.TraceError, match=match):
        F.read_trace(tmp_path / "bad.jsonl")


def dump(tmp_path, seed=0):
    params = init_params(CFG, seed)
    vis, aud = F.observation_batch([SCENE], CFG, 2, seed=1)
    path = F.emit_attention_dump(params, CFG, vis, aud, tmp_path / "a.csv")
    with open(path) as fh:
        return params, vis, aud, list(csv.DictReader(fh))


def test_attention_rows_sum_to_one_and_masked_are_zero(tmp_path):
    _, _, _, rows = dump(tmp_path)
    sums = {}
    for r in rows:
        key = (r["sample"], r["stage"], r["head"], r["query"])
        sums[key] = sums.get(key, 0.0) + float(r["weight"])
        if r["masked"] == "1":
            assert float(r["weight"]) == 0.0
    assert all(abs(s - 1.0) <= 1e-9 for s in sums.values())
    assert any(r["masked"] == "1" for r in rows)
    assert {r["stage"].split("[")[0] for r in rows} >= {"enc.vis.0.attn", "enc.aud.0.attn", "dec.0.self", "dec.0.cross"}


def test_attention_dump_matches_fresh_forward(tmp_path):
    params, vis, aud, rows = dump(tmp_path)
    cap = []
    forward(vis, aud, params, CFG, capture=cap)
    cross = next(c["weights"] for c in cap if c["stage"] == "dec.0.cross")
    for r in rows:
        if r["stage"] == "dec.0.cross":
            want = cross[int(r["sample"]), int(r["head"]), int(r["query"]), int(r["key"])]
            assert abs(float(r["weight"]) - want) <= 1e-12


def test_token_labels():
    labels = F.token_labels(CFG)
    assert len(labels) == CFG.seq_len and labels[9] == "a0.left" and labels[11] == "a1.vis0"
