import itertools
import json

import numpy as np
import pytest

from mastavn import env as E
from mastavn import metrics as M
from mastavn.model import ModelConfig, init_params, save_model

import oracles

SCENES = [E.generate_scene(s, 6, 6, 0.1) for s in (1, 2)]


def record(success, l=4, p=4, n_star=5, n=5):
    if not success:
        return M.EpisodeRecord("s", 0, [], None, None, None, None, None, [n])
    return M.EpisodeRecord("s", 0, [], 0, p, n, l, n_star, [n])


def test_perfect_episode_scores_one():
    eps = [record(True)]
    assert (M.success_rate(eps), M.spl(eps), M.sna(eps)) == (1.0, 1.0, 1.0)


def test_failure_scores_zero():
    eps = [record(False)]
    assert (M.success_rate(eps), M.spl(eps), M.sna(eps)) == (0.0, 0.0, 0.0)


def test_double_length_path_halves_spl():
    assert M.spl([record(True, l=5, p=10)]) == pytest.approx(0.5)
    assert M.sna([record(True, n_star=6, n=12)]) == pytest.approx(0.5)


def test_empty_list_rejected():
    for fn in (M.success_rate, M.spl, M.sna):
        with pytest.raises(ValueError):
            fn([])


def test_exhaustive_grid_against_formula():
    grid = []
    for succ, l, p, ns, n in itertools.product((0, 1), range(1, 9), range(1, 9), range(1, 9), range(1, 9)):
        grid.append((succ, l, p, ns, n))
    recs = [record(bool(s), l, p, ns, n) for s, l, p, ns, n in grid]
    assert abs(M.spl(recs) - oracles.spl_oracle([(s, l, p) for s, l, p, _, _ in grid])) <= 1e-12
    assert abs(M.sna(recs) - oracles.spl_oracle([(s, ns, n) for s, _, _, ns, n in grid])) <= 1e-12
    assert M.success_rate(recs) == 0.5


def test_first_finisher_record_uses_winner():
    sc = E.generate_scene(0, 6, 6, 0.0)
    st, _ = E.reset(sc, 2, E.SOUNDS[0], 1, audio_noise=False)
    far = max((c for c in sc.free_cells if c != sc.source), key=lambda c: sc.geodesic[c])
    st.poses[1] = E.AgentPose(sc.source, 0)
    st.start_poses[1] = E.AgentPose(sc.source, 0)
    st.poses[0] = E.AgentPose(far, 0)
    st.prev_distance = [E.manhattan(far, sc.source), 0]
    E.step(st, [E.TURN_LEFT, E.STOP])
    rec = M._finish(st, 0, [])
    assert rec.winner == 1 and rec.path_length == 0 and rec.action_count == 1
    assert rec.min_actions == 1 and rec.shortest_path_length == 0
    assert M.spl([rec]) == 1.0 and M.sna([rec]) == 1.0


def test_random_evaluation_is_reproducible_and_bounded():
    a, recs = M.evaluate(M.RandomPolicy(), SCENES, "heard", 4, seed=3, n_agents=2, max_steps=60)
    b, _ = M.evaluate(M.RandomPolicy(), SCENES, "heard", 4, seed=3, n_agents=2, max_steps=60, batch=3)
    assert a == b and a.episodes == 8 and len(recs) == 8
    assert a.spl <= a.sr and a.sna <= a.sr


def test_policy_agent_count_must_match():
    cfg = ModelConfig(n_agents=2, d_model=8, n_heads=2, n_encoder_layers=1, n_decoder_layers=1)
    with pytest.raises(ValueError):
        M.evaluate(M.ModelPolicy(init_params(cfg), cfg), SCENES, "heard", 1, n_agents=3)


def test_traces_carry_header_and_steps():
    _, recs = M.evaluate(M.RandomPolicy(), SCENES[:1], "unheard", 1, seed=0, n_agents=2, max_steps=5,
                         keep_traces=True)
    lines = [json.loads(x) for x in recs[0].trace]
    assert lines[0]["type"] == "episode" and len(lines[0]["start"]) == 2
    assert [x["step"] for x in lines[1:]] == list(range(1, len(lines)))
    assert recs[0].sound_id in E.UNHEARD_SOUNDS


def test_independent_policy_needs_single_agent_model():
    cfg = ModelConfig(n_agents=2, d_model=8, n_heads=2)
    with pytest.raises(ValueError):
        M.IndependentPolicy(init_params(cfg), cfg)


def test_independent_policy_acts_per_agent():
    cfg = ModelConfig(n_agents=1, d_model=8, n_heads=2, n_encoder_layers=1, n_decoder_layers=1)
    pol = M.IndependentPolicy(init_params(cfg, 1), cfg)
    rng = np.random.default_rng(0)
    vis = rng.integers(0, 2, (3, 2, 9, 9, 2)).astype(float)
    aud = rng.random((3, 2, 2, 16))
    joint = pol.act(vis, aud, [rng] * 3)
    single = M.ModelPolicy(pol.params, cfg).act(vis[:, 1:], aud[:, 1:], [rng] * 3)
    assert joint.shape == (3, 2) and np.array_equal(joint[:, 1], single[:, 0])


def test_baselines_and_labels(tmp_path):
    rep, _ = M.run_baseline("random-one-agent", SCENES, "heard", 2, seed=0, max_steps=30)
    assert rep.method == "random-one-agent"
    with pytest.raises(ValueError):
        M.run_baseline("oracle", SCENES)
    with pytest.raises(FileNotFoundError):
        M.run_baseline("independent-two-agent", SCENES, checkpoint=tmp_path / "missing.json")
    cfg = ModelConfig(n_agents=2, d_model=8, n_heads=2, mlp_decoder=True)
    assert M.ablation_label(cfg) == "wo-de"
    save_model(tmp_path / "wode.json", init_params(cfg), cfg)
    with pytest.raises(ValueError):
        M.run_ablation("wo-en", tmp_path / "wode.json", SCENES)
    rep, _ = M.run_ablation("wo-de", tmp_path / "wode.json", SCENES, episodes_per_scene=1, max_steps=10)
    assert rep.method == "wo-de"


def test_report_csv(tmp_path):
    r = M.MetricsReport("mast", "heard", 0.5, 0.25, 0.125, 4, 0)
    M.write_report_csv(tmp_path / "r.csv", [r])
    M.write_report_csv(tmp_path / "r.csv", [r], append=True)
    lines = (tmp_path / "r.csv").read_text().splitlines()
    assert lines[0] == ",".join(M.REPORT_FIELDS) and len(lines) == 3
