"""Multi-agent grid world with a single sounding target.

Cells are addressed ``(row, col)`` with rows growing southwards.  Headings are
integers ``0..3`` for N, E, S, W; turning left decrements the heading.
"""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass, field
from functools import cached_property
from typing import Sequence

import numpy as np

FORWARD, TURN_LEFT, TURN_RIGHT, STOP = 0, 1, 2, 3
ACTIONS = ("Forward", "TurnLeft", "TurnRight", "Stop")
N_ACTIONS = 4
HEADINGS = ("N", "E", "S", "W")
STEPS = np.array([(-1, 0), (0, 1), (1, 0), (0, -1)])

VIEW = 9
N_FREQ = 16
MAX_STEPS = 500
UNREACHABLE = -1

SUCCESS_REWARD = 10.0
PROGRESS_REWARD = 0.25
TIME_PENALTY = -0.01

N_SOUNDS = 8
HEARD_SOUNDS = (0, 1, 2, 3, 4, 5)
UNHEARD_SOUNDS = (6, 7)


class EpisodeDone(RuntimeError):
    pass


class UnreachableError(ValueError):
    pass


def bfs_distances(blocked: np.ndarray, start: tuple[int, int]) -> np.ndarray:
    """4-connected step counts from ``start``; blocked or cut-off cells get -1."""
    h, w = blocked.shape
    dist = np.full((h, w), UNREACHABLE, dtype=np.int64)
    if blocked[start]:
        return dist
    dist[start] = 0
    queue = deque([start])
    while queue:
        r, c = queue.popleft()
        nd = dist[r, c] + 1
        for dr, dc in STEPS:
            rr, cc = r + dr, c + dc
            if 0 <= rr < h and 0 <= cc < w and not blocked[rr, cc] and dist[rr, cc] == UNREACHABLE:
                dist[rr, cc] = nd
                queue.append((rr, cc))
    return dist


@dataclass(frozen=True, eq=False)
class Scene:
    blocked: np.ndarray
    source: tuple[int, int]
    seed: int
    scene_id: str

    @property
    def height(self) -> int:
        return self.blocked.shape[0]

    @property
    def width(self) -> int:
        return self.blocked.shape[1]

    @cached_property
    def geodesic(self) -> np.ndarray:
        return bfs_distances(self.blocked, self.source)

    @cached_property
    def free_cells(self) -> list[tuple[int, int]]:
        return [tuple(map(int, rc)) for rc in np.argwhere(~self.blocked)]

    @cached_property
    def source_direction(self) -> np.ndarray:
        """Per cell, the mean unit vector over every geodesic-optimal first step."""
        h, w = self.blocked.shape
        g = self.geodesic
        out = np.zeros((h, w, 2))
        for r, c in self.free_cells:
            if g[r, c] <= 0:
                continue
            acc = np.zeros(2)
            k = 0
            for dr, dc in STEPS:
                rr, cc = r + dr, c + dc
                if 0 <= rr < h and 0 <= cc < w and g[rr, cc] == g[r, c] - 1:
                    acc += (dr, dc)
                    k += 1
            out[r, c] = acc / k
        return out

    @cached_property
    def padded(self) -> tuple[np.ndarray, np.ndarray]:
        pad = VIEW // 2
        occ = np.pad(self.blocked.astype(np.float64), pad, constant_values=1.0)
        oob = np.pad(np.zeros(self.blocked.shape), pad, constant_values=1.0)
        return occ, oob

    def is_free(self, cell) -> bool:
        r, c = cell
        return 0 <= r < self.height and 0 <= c < self.width and not self.blocked[r, c]

    def to_dict(self) -> dict:
        return {
            "height": self.height,
            "width": self.width,
            "blocked": [list(map(int, rc)) for rc in np.argwhere(self.blocked)],
            "source": list(self.source),
            "seed": self.seed,
            "scene_id": self.scene_id,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "Scene":
        blocked = np.zeros((d["height"], d["width"]), dtype=bool)
        for r, c in d["blocked"]:
            blocked[r, c] = True
        seed = int(d["seed"])
        return cls(blocked, tuple(d["source"]), seed, d.get("scene_id", f"scene-{seed}"))

    @classmethod
    def from_json(cls, text: str) -> "Scene":
        return cls.from_dict(json.loads(text))


def generate_scene(seed: int, height: int = 10, width: int = 10, wall_density: float = 0.2) -> Scene:
    """Random occupancy grid whose free cells all connect to the source.

    Cells cut off from the source are filled in.  A draw is rejected when that
    would discard more than half of its free cells.
    """
    if height < 5 or width < 5:
        raise ValueError(f"scene must be at least 5x5, got {height}x{width}")
    if not 0.0 <= wall_density <= 0.4:
        raise ValueError(f"wall_density must lie in [0, 0.4], got {wall_density}")
    rng = np.random.default_rng(seed)
    for _ in range(100):
        blocked = rng.random((height, width)) < wall_density
        free = np.argwhere(~blocked)
        if len(free) < 2:
            continue
        source = tuple(int(v) for v in free[rng.integers(len(free))])
        dist = bfs_distances(blocked, source)
        reach = dist != UNREACHABLE
        if reach.sum() * 2 < len(free) or reach.sum() < 2:
            continue
        scene_id = f"s{seed}-{height}x{width}-{wall_density:g}"
        return Scene(~reach, source, seed, scene_id)
    raise ValueError(
        f"could not build a connected {height}x{width} scene at density {wall_density} after 100 tries"
    )


@dataclass(frozen=True)
class SoundProfile:
    sound_id: int
    spectrum: np.ndarray


def sound_bank(n: int = N_SOUNDS, n_freq: int = N_FREQ, seed: int = 7) -> list[SoundProfile]:
    """Fixed per-sound frequency signatures; ids 0-5 are heard, 6-7 unheard."""
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        w = rng.gamma(1.0, 1.0, size=n_freq) + 0.05
        out.append(SoundProfile(i, w / w.sum()))
    return out


SOUNDS = sound_bank()


def split_sounds(split: str) -> list[SoundProfile]:
    table = {"heard": HEARD_SOUNDS, "unheard": UNHEARD_SOUNDS, "both": HEARD_SOUNDS + UNHEARD_SOUNDS}
    if split not in table:
        raise ValueError(f"unknown sound split {split!r}; expected one of {sorted(table)}")
    ids = table[split]
    return [SOUNDS[i] for i in ids]


@dataclass
class AgentPose:
    cell: tuple[int, int]
    heading: int


@dataclass
class Observation:
    visual: np.ndarray  # (9, 9, 2)
    audio: np.ndarray  # (2, F)


@dataclass
class EnvState:
    scene: Scene
    sound: SoundProfile
    poses: list[AgentPose]
    rng: np.random.Generator
    steps: list[int]
    prev_distance: list[int]
    start_poses: list[AgentPose]
    path_lengths: list[int]
    done: bool = False
    winner: int | None = None
    max_steps: int = MAX_STEPS
    audio_noise: bool = True

    @property
    def n_agents(self) -> int:
        return len(self.poses)


@dataclass
class StepOutcome:
    observations: list[Observation]
    rewards: np.ndarray
    done: bool
    info: dict = field(default_factory=dict)


def manhattan(a, b) -> int:
    return abs(a[0] - b[0]) + abs(a[1] - b[1])


def render_vision(scene: Scene, pose: AgentPose) -> np.ndarray:
    """Egocentric 9x9x2 window (occupancy, out-of-bounds) with the heading at the top."""
    occ, oob = scene.padded
    r, c = pose.cell
    win = np.stack([occ[r : r + VIEW, c : c + VIEW], oob[r : r + VIEW, c : c + VIEW]], axis=-1)
    return np.ascontiguousarray(np.rot90(win, k=pose.heading, axes=(0, 1)))


def bearing(scene: Scene, pose: AgentPose) -> float:
    """Angle of the source direction relative to the heading; positive is to the left."""
    d = scene.source_direction[pose.cell]
    fwd = STEPS[pose.heading]
    left = STEPS[(pose.heading - 1) % 4]
    return float(np.arctan2(d @ left, d @ fwd))


def render_audio(
    scene: Scene,
    pose: AgentPose,
    sound: SoundProfile,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """Binaural 2xF feature: distance attenuation, bearing panning, per-bin noise."""
    g = scene.geodesic[pose.cell]
    if g == UNREACHABLE:
        raise UnreachableError(f"source unreachable from {pose.cell}")
    amp = 1.0 / (1.0 + g)
    pan = 0.5 * np.sin(bearing(scene, pose))
    feat = np.stack([amp * (1 + pan) * sound.spectrum, amp * (1 - pan) * sound.spectrum])
    if rng is not None:
        feat = feat + rng.normal(0.0, 0.01 * amp, size=feat.shape)
    return np.maximum(feat, 0.0)


def observe(state: EnvState) -> list[Observation]:
    rng = state.rng if state.audio_noise else None
    return [
        Observation(render_vision(state.scene, p), render_audio(state.scene, p, state.sound, rng))
        for p in state.poses
    ]


def reset(
    scene: Scene,
    n_agents: int,
    sound: SoundProfile,
    seed: int,
    max_steps: int = MAX_STEPS,
    audio_noise: bool = True,
) -> tuple[EnvState, list[Observation]]:
    if n_agents < 1:
        raise ValueError("n_agents must be at least 1")
    candidates = [c for c in scene.free_cells if c != scene.source]
    if len(candidates) < n_agents:
        raise ValueError(f"scene {scene.scene_id} has {len(candidates)} start cells for {n_agents} agents")
    rng = np.random.default_rng(seed)
    picks = rng.choice(len(candidates), size=n_agents, replace=False)
    headings = rng.integers(0, 4, size=n_agents)
    poses = [AgentPose(candidates[i], int(h)) for i, h in zip(picks, headings)]
    state = EnvState(
        scene=scene,
        sound=sound,
        poses=poses,
        rng=rng,
        steps=[0] * n_agents,
        prev_distance=[manhattan(p.cell, scene.source) for p in poses],
        start_poses=[AgentPose(p.cell, p.heading) for p in poses],
        path_lengths=[0] * n_agents,
        max_steps=max_steps,
        audio_noise=audio_noise,
    )
    return state, observe(state)


def step(state: EnvState, actions: Sequence[int]) -> StepOutcome:
    """Advance every agent simultaneously; mutates ``state``.

    A Stop on the source ends the episode; when several agents do so in the
    same step the lowest index wins and alone collects the success reward.
    """
    if state.done:
        raise EpisodeDone("step() called on a finished episode")
    if len(actions) != state.n_agents:
        raise ValueError(f"expected {state.n_agents} actions, got {len(actions)}")
    scene = state.scene
    rewards = np.full(state.n_agents, TIME_PENALTY)
    decreased = [False] * state.n_agents
    for i, a in enumerate(actions):
        a = int(a)
        pose = state.poses[i]
        if a == FORWARD:
            dr, dc = STEPS[pose.heading]
            nxt = (pose.cell[0] + int(dr), pose.cell[1] + int(dc))
            if scene.is_free(nxt):
                pose.cell = nxt
                state.path_lengths[i] += 1
        elif a == TURN_LEFT:
            pose.heading = (pose.heading - 1) % 4
        elif a == TURN_RIGHT:
            pose.heading = (pose.heading + 1) % 4
        elif a == STOP:
            if pose.cell == scene.source and state.winner is None:
                state.winner = i
                rewards[i] += SUCCESS_REWARD
        else:
            raise ValueError(f"unknown action {a}")
        dist = manhattan(pose.cell, scene.source)
        if dist < state.prev_distance[i]:
            rewards[i] += PROGRESS_REWARD
            decreased[i] = True
        state.prev_distance[i] = dist
        state.steps[i] += 1
    success = state.winner is not None
    state.done = success or max(state.steps) >= state.max_steps
    info = {
        "success": success,
        "winner": state.winner,
        "distance_decreased": decreased,
        "distances": list(state.prev_distance),
    }
    return StepOutcome(observe(state), rewards, state.done, info)


def shortest_path_actions(scene: Scene, pose: AgentPose, target: tuple[int, int] | None = None) -> int:
    """Fewest Forward/TurnLeft/TurnRight actions to reach ``target``, plus the final Stop."""
    target = scene.source if target is None else tuple(target)
    start = (pose.cell, pose.heading)
    seen = {start: 0}
    queue = deque([start])
    while queue:
        (cell, h) = state = queue.popleft()
        n = seen[state]
        if cell == target:
            return n + 1
        dr, dc = STEPS[h]
        fwd = (cell[0] + int(dr), cell[1] + int(dc))
        for nxt in ((fwd if scene.is_free(fwd) else cell, h), (cell, (h - 1) % 4), (cell, (h + 1) % 4)):
            if nxt not in seen:
                seen[nxt] = n + 1
                queue.append(nxt)
    raise UnreachableError(f"{target} is unreachable from {pose.cell}")


def trace_line(step_index: int, state: EnvState, actions, outcome: StepOutcome) -> str:
    return json.dumps(
        {
            "type": "step",
            "step": step_index,
            "poses": [[list(p.cell), HEADINGS[p.heading]] for p in state.poses],
            "actions": [ACTIONS[int(a)] for a in actions],
            "rewards": [float(r) for r in outcome.rewards],
            "distances": outcome.info["distances"],
            "done": outcome.done,
            "winner": outcome.info["winner"],
        }
    )
