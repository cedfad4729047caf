import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mastavn import env as E

import oracles

OPEN = E.generate_scene(1, 10, 10, 0.0)


def place(scene, cells, headings=None, n=None, seed=0):
    """Reset, then move agents onto the given poses."""
    n = n or len(cells)
    state, _ = E.reset(scene, n, E.SOUNDS[0], seed, audio_noise=False)
    for i, cell in enumerate(cells):
        state.poses[i] = E.AgentPose(tuple(cell), (headings or [0] * n)[i])
        state.prev_distance[i] = E.manhattan(cell, scene.source)
    return state


def neighbour_of_source(scene, heading):
    """A free cell from which ``heading`` points at the source."""
    dr, dc = E.STEPS[heading]
    return (scene.source[0] - dr, scene.source[1] - dc)


# --- scenes -----------------------------------------------------------------------------------


def test_generate_scene_is_deterministic():
    a, b = E.generate_scene(1, 10, 10, 0.2), E.generate_scene(1, 10, 10, 0.2)
    assert a.to_json() == b.to_json()
    assert a.blocked.tobytes() == b.blocked.tobytes()


def test_open_scene_geodesic_is_manhattan():
    for r, c in OPEN.free_cells:
        assert OPEN.geodesic[r, c] == E.manhattan((r, c), OPEN.source)


@pytest.mark.parametrize("seed", range(20))
def test_scene_connected_and_geodesic_lipschitz(seed):
    sc = E.generate_scene(seed, 10, 10, 0.3)
    g = sc.geodesic
    assert not sc.blocked[sc.source]
    for r, c in sc.free_cells:
        assert g[r, c] >= 0
        for dr, dc in E.STEPS:
            rr, cc = r + dr, c + dc
            if sc.is_free((rr, cc)):
                assert abs(g[r, c] - g[rr, cc]) <= 1
    assert np.all(g[sc.blocked] == E.UNREACHABLE)


@pytest.mark.parametrize("kw", [dict(height=4), dict(width=3), dict(wall_density=0.5), dict(wall_density=-0.1)])
def test_generate_scene_rejects_bad_parameters(kw):
    with pytest.raises(ValueError):
        E.generate_scene(0, **{"height": 10, "width": 10, "wall_density": 0.2, **kw})


def test_scene_json_round_trip():
    sc = E.generate_scene(3, 8, 9, 0.25)
    back = E.Scene.from_json(sc.to_json())
    assert np.array_equal(back.blocked, sc.blocked) and back.source == sc.source
    assert back.to_json() == sc.to_json()


# --- reset ------------------------------------------------------------------------------------


def test_reset_is_deterministic():
    a, _ = E.reset(OPEN, 2, E.SOUNDS[0], 5)
    b, _ = E.reset(OPEN, 2, E.SOUNDS[0], 5)
    assert [(p.cell, p.heading) for p in a.poses] == [(p.cell, p.heading) for p in b.poses]


def test_reset_places_distinct_agents_off_source():
    for seed in range(50):
        st_, _ = E.reset(OPEN, 2, E.SOUNDS[0], seed)
        cells = [p.cell for p in st_.poses]
        assert len(set(cells)) == 2 and OPEN.source not in cells
        assert st_.prev_distance == [E.manhattan(c, OPEN.source) for c in cells]


def test_reset_occupancy_close_to_uniform():
    counts = {}
    for seed in range(1000):
        st_, _ = E.reset(OPEN, 1, E.SOUNDS[0], seed)
        counts[st_.poses[0].cell] = counts.get(st_.poses[0].cell, 0) + 1
    expected = 1000 / (len(OPEN.free_cells) - 1)
    for cell in OPEN.free_cells:
        if cell == OPEN.source:
            assert cell not in counts
        else:
            assert expected / 5 <= counts.get(cell, 0) <= expected * 5


def test_reset_rejects_too_many_agents():
    tiny = E.Scene(np.ones((5, 5), bool), (2, 2), 0, "tiny")
    tiny.blocked[2, 2] = tiny.blocked[2, 3] = False
    with pytest.raises(ValueError):
        E.reset(tiny, 2, E.SOUNDS[0], 0)


# --- step / rewards ----------------------------------------------------------------------------


def test_stop_on_source_rewards_and_ends():
    st_ = place(OPEN, [OPEN.source])
    out = E.step(st_, [E.STOP])
    assert out.rewards[0] == pytest.approx(9.99)
    assert out.done and out.info["winner"] == 0 and out.info["success"]


def test_forward_into_wall_costs_time_only():
    st_ = place(OPEN, [(0, 0)], [0])
    out = E.step(st_, [E.FORWARD])
    assert st_.poses[0].cell == (0, 0)
    assert out.rewards[0] == pytest.approx(-0.01)


def test_forward_towards_source_pays_progress():
    h = 2
    cell = (OPEN.source[0] - 2, OPEN.source[1])
    st_ = place(OPEN, [cell], [h])
    out = E.step(st_, [E.FORWARD])
    assert out.rewards[0] == pytest.approx(0.24)
    assert out.info["distance_decreased"] == [True]


def test_moving_away_has_no_penalty_beyond_time():
    cell = neighbour_of_source(OPEN, 2)
    st_ = place(OPEN, [cell], [0])
    out = E.step(st_, [E.FORWARD])
    assert out.rewards[0] == pytest.approx(-0.01)


def test_simultaneous_stop_lower_index_wins():
    st_ = place(OPEN, [OPEN.source, OPEN.source], [0, 1])
    out = E.step(st_, [E.STOP, E.STOP])
    assert out.info["winner"] == 0
    assert out.rewards.tolist() == pytest.approx([9.99, -0.01])


def test_stop_off_source_does_not_end():
    st_ = place(OPEN, [(0, 0)])
    out = E.step(st_, [E.STOP])
    assert not out.done and out.rewards[0] == pytest.approx(-0.01)


def test_turns_change_heading():
    st_ = place(OPEN, [(0, 0)], [0])
    E.step(st_, [E.TURN_LEFT])
    assert st_.poses[0].heading == 3
    E.step(st_, [E.TURN_RIGHT])
    E.step(st_, [E.TURN_RIGHT])
    assert st_.poses[0].heading == 1


def test_step_limit_ends_episode_and_done_is_final():
    st_, _ = E.reset(OPEN, 1, E.SOUNDS[0], 0, max_steps=3)
    outs = [E.step(st_, [E.TURN_LEFT]) for _ in range(3)]
    assert [o.done for o in outs] == [False, False, True]
    with pytest.raises(E.EpisodeDone):
        E.step(st_, [E.TURN_LEFT])


def test_step_rejects_wrong_action_count_and_unknown_action():
    st_, _ = E.reset(OPEN, 2, E.SOUNDS[0], 0)
    with pytest.raises(ValueError):
        E.step(st_, [0])
    with pytest.raises(ValueError):
        E.step(st_, [0, 7])


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10**6), st.integers(1, 3))
def test_reward_accounting_property(seed, n):
    scene = E.generate_scene(seed % 50, 7, 7, 0.2)
    rng = np.random.default_rng(seed)
    st_, _ = E.reset(scene, n, E.SOUNDS[seed % 8], seed, max_steps=60)
    total, decreases, actions = 0.0, 0, 0
    while not st_.done:
        acts = rng.integers(0, 4, size=n)
        before = [E.manhattan(p.cell, scene.source) for p in st_.poses]
        out = E.step(st_, acts)
        after = [E.manhattan(p.cell, scene.source) for p in st_.poses]
        decreases += sum(a < b for a, b in zip(after, before))
        actions += n
        total += out.rewards.sum()
    expected = 10 * (st_.winner is not None) + 0.25 * decreases - 0.01 * actions
    assert total == pytest.approx(expected, abs=1e-9)


# --- vision -----------------------------------------------------------------------------------


def test_open_scene_interior_view():
    v = E.render_vision(OPEN, E.AgentPose((5, 5), 1))
    assert v.shape == (9, 9, 2)
    assert v[4, 4, 0] == 0.0
    assert v[3:6, 3:6, 1].sum() == 0


def test_corner_marks_out_of_bounds():
    v = E.render_vision(OPEN, E.AgentPose((0, 0), 0))
    assert np.all(v[:4, :, 1] == 1) and np.all(v[:, :4, 1] == 1)
    assert np.all(v[4:, 4:, 1] == 0)
    assert np.all(v[..., 0][v[..., 1] == 1] == 1)


def test_view_rotates_with_heading():
    sc = E.generate_scene(4, 10, 10, 0.3)
    cell = sc.free_cells[len(sc.free_cells) // 2]
    st_ = place(sc, [cell], [0])
    views = [E.render_vision(sc, st_.poses[0]).copy()]
    for _ in range(3):
        E.step(st_, [E.TURN_LEFT])
        views.append(E.render_vision(sc, st_.poses[0]).copy())
    for prev, cur in zip(views, views[1:]):
        # turning left swings the world to the right of the view: one clockwise quarter turn
        assert np.array_equal(cur, np.rot90(prev, k=-1, axes=(0, 1)))


def test_heading_points_up_in_view():
    # wall directly ahead shows up in the row above the centre whatever the heading
    for h in range(4):
        dr, dc = E.STEPS[h]
        blocked = np.zeros((7, 7), bool)
        blocked[3 + dr, 3 + dc] = True
        sc = E.Scene(blocked, (0, 0), 0, "t")
        v = E.render_vision(sc, E.AgentPose((3, 3), h))
        assert v[3, 4, 0] == 1 and v[..., 0][2:7, 2:7].sum() == 1


# --- audio ------------------------------------------------------------------------------------


def test_audio_on_source_is_symmetric_full_intensity():
    a = E.render_audio(OPEN, E.AgentPose(OPEN.source, 0), E.SOUNDS[0])
    assert np.allclose(a[0], E.SOUNDS[0].spectrum) and np.allclose(a[0], a[1])


def test_source_left_gives_ratio_three():
    # heading N with the source due west: bearing +90 degrees
    cell = (OPEN.source[0], OPEN.source[1] + 3)
    pose = E.AgentPose(cell, 0)
    assert E.bearing(OPEN, pose) == pytest.approx(math.pi / 2)
    a = E.render_audio(OPEN, pose, E.SOUNDS[1])
    nz = a[1] > 0
    assert np.allclose(a[0][nz] / a[1][nz], 3.0)


def test_intensity_halves_from_one_to_three_steps():
    s = E.SOUNDS[2]
    src = OPEN.source
    near = E.render_audio(OPEN, E.AgentPose((src[0] + 1, src[1]), 0), s)
    far = E.render_audio(OPEN, E.AgentPose((src[0] + 3, src[1]), 0), s)
    assert near.sum() == pytest.approx(0.5 * 2 * s.spectrum.sum())
    assert far.sum() == pytest.approx(0.25 * 2 * s.spectrum.sum())


def test_audio_intensity_decreases_with_distance():
    sc = E.generate_scene(6, 10, 10, 0.2)
    s = E.SOUNDS[3]
    level = {}
    for cell in sc.free_cells:
        level.setdefault(int(sc.geodesic[cell]), set()).add(round(E.render_audio(sc, E.AgentPose(cell, 0), s).sum(), 12))
    ds = sorted(level)
    for a, b in zip(ds, ds[1:]):
        assert max(level[b]) < min(level[a])


def test_audio_noise_is_seeded_and_nonnegative():
    a, _ = E.reset(OPEN, 1, E.SOUNDS[0], 9)
    b, _ = E.reset(OPEN, 1, E.SOUNDS[0], 9)
    oa, ob = E.observe(a)[0].audio, E.observe(b)[0].audio
    assert np.array_equal(oa, ob) and np.all(oa >= 0)


def test_unreachable_source_raises():
    blocked = np.zeros((5, 5), bool)
    blocked[:, 2] = True
    sc = E.Scene(blocked, (0, 0), 0, "split")
    with pytest.raises(E.UnreachableError):
        E.render_audio(sc, E.AgentPose((0, 4), 0), E.SOUNDS[0])


def test_sound_splits():
    heard = E.split_sounds("heard")
    unheard = E.split_sounds("unheard")
    assert {s.sound_id for s in heard}.isdisjoint({s.sound_id for s in unheard})
    assert len(E.split_sounds("both")) == E.N_SOUNDS
    with pytest.raises(ValueError):
        E.split_sounds("loud")


# --- shortest actions -------------------------------------------------------------------------


def test_shortest_actions_at_target_is_one():
    assert E.shortest_path_actions(OPEN, E.AgentPose(OPEN.source, 2)) == 1


def test_shortest_actions_turns_then_walks():
    cell = (OPEN.source[0] + 2, OPEN.source[1])
    # facing south, source to the north: two turns, two steps, stop
    assert E.shortest_path_actions(OPEN, E.AgentPose(cell, 2)) == 5


@pytest.mark.parametrize("seed", range(8))
def test_shortest_actions_matches_exhaustive_oracle(seed):
    sc = E.generate_scene(seed, 7, 7, 0.25)
    for cell in sc.free_cells:
        for h in range(4):
            assert E.shortest_path_actions(sc, E.AgentPose(cell, h)) == oracles.bfs_pose_actions(
                sc.blocked, cell, h, sc.source
            )


def test_trace_line_is_json():
    st_, _ = E.reset(OPEN, 2, E.SOUNDS[0], 1)
    out = E.step(st_, [0, 1])
    rec = json.loads(E.trace_line(1, st_, [0, 1], out))
    assert rec["type"] == "step" and rec["actions"] == ["Forward", "TurnLeft"] and len(rec["poses"]) == 2
