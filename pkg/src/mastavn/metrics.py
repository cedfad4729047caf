"""SR / SPL / SNA with first-finisher semantics, policies, and the episode
evaluation protocol shared by the learned model, baselines and ablations."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

from . import env as E
from .model import ModelConfig, forward, load_model

REPORT_FIELDS = ("method", "split", "SR", "SPL", "SNA", "episodes", "seed")


@dataclass
class EpisodeRecord:
    scene_id: str
    sound_id: int
    start_poses: list[tuple[tuple[int, int], int]]
    winner: int | None
    path_length: int | None
    action_count: int | None
    shortest_path_length: int | None
    min_actions: int | None
    steps: list[int]
    trace: list[str] = field(default_factory=list, repr=False)

    @property
    def success(self) -> bool:
        return self.winner is not None

    def to_json(self) -> str:
        d = asdict(self)
        d.pop("trace")
        return json.dumps(d)


@dataclass
class MetricsReport:
    method: str
    split: str
    sr: float
    spl: float
    sna: float
    episodes: int
    seed: int

    def row(self) -> dict:
        return {
            "method": self.method,
            "split": self.split,
            "SR": self.sr,
            "SPL": self.spl,
            "SNA": self.sna,
            "episodes": self.episodes,
            "seed": self.seed,
        }


def _require(episodes: Sequence[EpisodeRecord]) -> None:
    if len(episodes) == 0:
        raise ValueError("metrics need at least one episode")


def success_rate(episodes: Sequence[EpisodeRecord]) -> float:
    _require(episodes)
    return sum(1.0 for e in episodes if e.success) / len(episodes)


def spl(episodes: Sequence[EpisodeRecord]) -> float:
    """Mean of success * l / max(p, l) with l the winner's geodesic start distance.

    A zero-length optimal path walked exactly (start on the target) scores 1.
    """
    _require(episodes)
    total = 0.0
    for e in episodes:
        if e.success:
            denom = max(e.path_length, e.shortest_path_length)
            total += e.shortest_path_length / denom if denom else 1.0
    return total / len(episodes)


def sna(episodes: Sequence[EpisodeRecord]) -> float:
    """Mean of success * n* / max(n, n*) over winner action counts."""
    _require(episodes)
    total = 0.0
    for e in episodes:
        if e.success:
            total += e.min_actions / max(e.action_count, e.min_actions)
    return total / len(episodes)


def report(episodes, method: str, split: str, seed: int) -> MetricsReport:
    return MetricsReport(method, split, success_rate(episodes), spl(episodes), sna(episodes), len(episodes), seed)


# --- policies ---------------------------------------------------------------------------


class Policy(Protocol):
    label: str
    n_agents: int | None

    def act(self, visual: np.ndarray, audio: np.ndarray, rngs: Sequence[np.random.Generator]) -> np.ndarray: ...


class ModelPolicy:
    """Joint policy from a MAST checkpoint; greedy (argmax) unless ``greedy=False``."""

    def __init__(self, params, cfg: ModelConfig, label: str = "mast", greedy: bool = True):
        self.params, self.cfg, self.label, self.greedy = params, cfg, label, greedy
        self.n_agents = cfg.n_agents

    @classmethod
    def from_checkpoint(cls, path, label: str | None = None) -> "ModelPolicy":
        if not Path(path).is_file():
            raise FileNotFoundError(f"checkpoint not found: {path}")
        params, cfg, _ = load_model(path)
        return cls(params, cfg, label or ablation_label(cfg))

    def act(self, visual, audio, rngs):
        probs = forward(visual, audio, self.params, self.cfg).probs
        if self.greedy:
            return probs.argmax(axis=-1)
        return np.array([[rng.choice(len(p), p=p) for p in row] for rng, row in zip(rngs, probs)])


class IndependentPolicy(ModelPolicy):
    """Single-agent checkpoint applied to every agent separately (no shared decoder)."""

    def __init__(self, params, cfg: ModelConfig, label: str = "independent-two-agent", greedy: bool = True):
        if cfg.n_agents != 1:
            raise ValueError(f"independent baseline needs a single-agent model, got n_agents={cfg.n_agents}")
        super().__init__(params, cfg, label, greedy)
        self.n_agents = None

    def act(self, visual, audio, rngs):
        b, n = visual.shape[:2]
        flat = super().act(visual.reshape(b * n, 1, *visual.shape[2:]), audio.reshape(b * n, 1, *audio.shape[2:]),
                           [r for r in rngs for _ in range(n)])
        return flat.reshape(b, n)


class RandomPolicy:
    n_agents = None

    def __init__(self, label: str = "random"):
        self.label = label

    def act(self, visual, audio, rngs):
        n = visual.shape[1]
        return np.array([rng.integers(0, E.N_ACTIONS, size=n) for rng in rngs])


def ablation_label(cfg: ModelConfig) -> str:
    if cfg.mlp_decoder:
        return "wo-de"
    if cfg.skip_encoders:
        return "wo-en"
    return "mast" if cfg.n_agents > 1 else "mast-single"


# --- protocol ---------------------------------------------------------------------------


def episode_seeds(seed: int, k: int) -> tuple[int, int]:
    """(env seed, policy seed) for the k-th episode of an evaluation."""
    ss = np.random.SeedSequence([seed, k])
    env_seed, pol_seed = ss.generate_state(2)
    return int(env_seed), int(pol_seed)


def _finish(state: E.EnvState, sound_id: int, trace: list[str]) -> EpisodeRecord:
    scene = state.scene
    starts = [(tuple(p.cell), p.heading) for p in state.start_poses]
    w = state.winner
    if w is None:
        return EpisodeRecord(scene.scene_id, sound_id, starts, None, None, None, None, None, list(state.steps), trace)
    start = state.start_poses[w]
    return EpisodeRecord(
        scene.scene_id,
        sound_id,
        starts,
        w,
        state.path_lengths[w],
        state.steps[w],
        int(scene.geodesic[start.cell]),
        E.shortest_path_actions(scene, start),
        list(state.steps),
        trace,
    )


def evaluate(
    policy: Policy,
    scenes: Sequence[E.Scene],
    split: str,
    episodes_per_scene: int,
    seed: int = 0,
    n_agents: int = 2,
    max_steps: int = E.MAX_STEPS,
    batch: int = 64,
    keep_traces: bool = False,
) -> tuple[MetricsReport, list[EpisodeRecord]]:
    """Run ``len(scenes) * episodes_per_scene`` episodes and score them.

    Episode k uses scene ``k // episodes_per_scene`` and seeds derived from
    ``(seed, k)`` only, so results do not depend on ``batch``.
    """
    if policy.n_agents is not None and policy.n_agents != n_agents:
        raise ValueError(f"policy drives {policy.n_agents} agents, evaluation asks for {n_agents}")
    sounds = E.split_sounds(split) if isinstance(split, str) else list(split)
    total = len(scenes) * episodes_per_scene
    records: list[EpisodeRecord | None] = [None] * total
    active: list[tuple[int, E.EnvState, list, np.random.Generator, list[str]]] = []
    next_k = 0

    def start(k):
        env_seed, pol_seed = episode_seeds(seed, k)
        sound = sounds[env_seed % len(sounds)]
        st, obs = E.reset(scenes[k // episodes_per_scene], n_agents, sound, env_seed, max_steps)
        trace = []
        if keep_traces:
            trace.append(json.dumps({"type": "episode", "k": k, "scene": st.scene.to_dict(), "sound": sound.sound_id,
                                     "start": [[list(p.cell), E.HEADINGS[p.heading]] for p in st.poses]}))
        return (k, st, obs, np.random.default_rng(pol_seed), trace)

    while next_k < total or active:
        while next_k < total and len(active) < batch:
            active.append(start(next_k))
            next_k += 1
        vis = np.array([[o.visual for o in a[2]] for a in active])
        aud = np.array([[o.audio for o in a[2]] for a in active])
        actions = policy.act(vis, aud, [a[3] for a in active])
        still = []
        for (k, st, _, rng, trace), act in zip(active, actions):
            outcome = E.step(st, act)
            if keep_traces:
                trace.append(E.trace_line(st.steps[0], st, act, outcome))
            if outcome.done:
                records[k] = _finish(st, st.sound.sound_id, trace)
            else:
                still.append((k, st, outcome.observations, rng, trace))
        active = still
    return report(records, policy.label, split, seed), records


def run_baseline(
    kind: str,
    scenes,
    split: str = "heard",
    episodes_per_scene: int = 25,
    seed: int = 0,
    checkpoint=None,
    max_steps: int = E.MAX_STEPS,
    n_agents: int = 2,
    greedy: bool = True,
):
    if kind == "random-two-agent":
        policy = RandomPolicy(kind)
    elif kind == "random-one-agent":
        policy, n_agents = RandomPolicy(kind), 1
    elif kind == "independent-two-agent":
        if checkpoint is None:
            raise ValueError("independent-two-agent needs a single-agent checkpoint")
        if not Path(checkpoint).is_file():
            raise FileNotFoundError(f"checkpoint not found: {checkpoint}")
        params, cfg, _ = load_model(checkpoint)
        policy = IndependentPolicy(params, cfg, kind, greedy)
    else:
        raise ValueError(f"unknown baseline {kind!r}")
    return evaluate(policy, scenes, split, episodes_per_scene, seed, n_agents, max_steps)


ABLATIONS = {"wo-en": ("skip_encoders", True), "wo-de": ("mlp_decoder", True)}


def check_ablation(kind: str, cfg: ModelConfig) -> None:
    if kind not in ABLATIONS:
        raise ValueError(f"unknown ablation {kind!r}")
    if ablation_label(cfg) != kind:
        raise ValueError(f"checkpoint flags (skip_encoders={cfg.skip_encoders}, mlp_decoder={cfg.mlp_decoder}) "
                         f"do not match ablation {kind!r}")


def run_ablation(kind: str, checkpoint, scenes, split="heard", episodes_per_scene=25, seed=0, max_steps=E.MAX_STEPS):
    if not Path(checkpoint).is_file():
        raise FileNotFoundError(f"checkpoint not found: {checkpoint}")
    params, cfg, _ = load_model(checkpoint)
    check_ablation(kind, cfg)
    return evaluate(ModelPolicy(params, cfg, kind), scenes, split, episodes_per_scene, seed, cfg.n_agents, max_steps)


def write_report_csv(path, reports: Sequence[MetricsReport], append: bool = False) -> None:
    path = Path(path)
    new = not (append and path.exists())
    with open(path, "a" if append else "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=REPORT_FIELDS)
        if new:
            w.writeheader()
        for r in reports:
            w.writerow(r.row())


def write_episodes(path, records: Sequence[EpisodeRecord]) -> None:
    with open(path, "w") as fh:
        for r in records:
            fh.write(r.to_json() + "\n")
