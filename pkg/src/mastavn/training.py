"""On-policy actor-critic training: rollouts, discounted returns, per-agent
losses averaged over agents, gradient clipping and Adam."""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from . import autodiff as ad
from . import env as E
from .autodiff import Tensor
from .model import ModelConfig, forward, init_params, save_model

log = logging.getLogger(__name__)

METRIC_FIELDS = (
    "update",
    "env_steps",
    "L_actor",
    "L_critic",
    "L_entropy",
    "L_total",
    "mean_return",
    "probe_sr",
)


@dataclass(frozen=True)
class TrainConfig:
    gamma: float = 0.99
    lr: float = 1e-4
    entropy_coef: float = 0.01
    # if set, the entropy weight moves linearly from entropy_coef to this by the last update
    entropy_final: float | None = None
    value_coef: float = 0.5
    max_grad_norm: float = 0.5
    horizon: int = 128
    n_envs: int = 8
    total_env_steps: int = 100_000
    seed: int = 0
    probe_every: int = 0
    probe_episodes: int = 20
    checkpoint_every: int = 0
    # samples per forward/backward chunk inside one update; 0 means the whole rollout
    max_batch: int = 256

    def __post_init__(self):
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError(f"gamma must lie in (0, 1], got {self.gamma}")
        if self.horizon < 1 or self.n_envs < 1:
            raise ValueError("horizon and n_envs must be positive")
        if self.total_env_steps < 0:
            raise ValueError("total_env_steps must be non-negative")

    @property
    def steps_per_update(self) -> int:
        return self.horizon * self.n_envs

    @property
    def n_updates(self) -> int:
        return self.total_env_steps // self.steps_per_update

    def entropy_at(self, update: int) -> float:
        """Entropy weight used for ``update`` (1-based)."""
        if self.entropy_final is None or self.n_updates <= 1:
            return self.entropy_coef
        frac = (update - 1) / (self.n_updates - 1)
        return self.entropy_coef + frac * (self.entropy_final - self.entropy_coef)


@dataclass(frozen=True)
class EnvSpec:
    height: int = 10
    width: int = 10
    wall_density: float = 0.2
    train_scenes: tuple[int, ...] = tuple(range(100, 140))
    probe_scenes: tuple[int, ...] = tuple(range(900, 905))
    max_steps: int = E.MAX_STEPS
    sounds: str = "heard"

    def scenes(self, seeds: Sequence[int]) -> list[E.Scene]:
        return [E.generate_scene(s, self.height, self.width, self.wall_density) for s in seeds]


class VecEnv:
    """A fixed set of episodes run side by side, each restarted on a fresh
    (scene, sound, seed) draw from ``rng`` when it finishes."""

    def __init__(self, scenes, sounds, n_envs, n_agents, rng, max_steps=E.MAX_STEPS):
        self.scenes = list(scenes)
        self.sounds = list(sounds)
        self.n_agents = n_agents
        self.rng = rng
        self.max_steps = max_steps
        self.states: list[E.EnvState] = []
        self.obs: list[list[E.Observation]] = []
        self.episode_returns = np.zeros(n_envs)
        self.finished_returns: list[float] = []
        self.finished_success: list[bool] = []
        for _ in range(n_envs):
            st, ob = self._fresh()
            self.states.append(st)
            self.obs.append(ob)

    def _fresh(self):
        scene = self.scenes[self.rng.integers(len(self.scenes))]
        sound = self.sounds[self.rng.integers(len(self.sounds))]
        return E.reset(scene, self.n_agents, sound, int(self.rng.integers(2**31)), self.max_steps)

    @property
    def n_envs(self) -> int:
        return len(self.states)

    def stacked(self) -> tuple[np.ndarray, np.ndarray]:
        vis = np.array([[o.visual for o in obs] for obs in self.obs])
        aud = np.array([[o.audio for o in obs] for obs in self.obs])
        return vis, aud

    def step(self, actions: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        rewards = np.zeros((self.n_envs, self.n_agents))
        dones = np.zeros(self.n_envs, dtype=bool)
        for i, st in enumerate(self.states):
            out = E.step(st, actions[i])
            rewards[i] = out.rewards
            self.episode_returns[i] += out.rewards.sum()
            if out.done:
                dones[i] = True
                self.finished_returns.append(float(self.episode_returns[i]))
                self.finished_success.append(st.winner is not None)
                self.episode_returns[i] = 0.0
                self.states[i], self.obs[i] = self._fresh()
            else:
                self.obs[i] = out.observations
        return rewards, dones


@dataclass
class RolloutBuffer:
    visual: np.ndarray  # (T, E, n, 9, 9, 2)
    audio: np.ndarray  # (T, E, n, 2, F)
    actions: np.ndarray  # (T, E, n)
    log_probs: np.ndarray  # (T, E, n)
    values: np.ndarray  # (T, E, n)
    rewards: np.ndarray  # (T, E, n)
    dones: np.ndarray  # (T, E)
    bootstrap: np.ndarray  # (E, n)

    @property
    def horizon(self) -> int:
        return self.actions.shape[0]


def sample_actions(probs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Inverse-CDF draw of one action per row of the trailing probability axis."""
    cdf = np.cumsum(probs, axis=-1)
    u = rng.random(probs.shape[:-1] + (1,))
    return np.minimum((u > cdf).sum(axis=-1), probs.shape[-1] - 1)


def collect_rollout(venv: VecEnv, params, cfg: ModelConfig, horizon: int, rng) -> RolloutBuffer:
    t_e_n = (horizon, venv.n_envs, cfg.n_agents)
    vis_buf = np.zeros(t_e_n + (E.VIEW, E.VIEW, 2))
    aud_buf = np.zeros(t_e_n + (2, cfg.n_freq))
    actions = np.zeros(t_e_n, dtype=np.int64)
    logp = np.zeros(t_e_n)
    values = np.zeros(t_e_n)
    rewards = np.zeros(t_e_n)
    dones = np.zeros(t_e_n[:2], dtype=bool)
    for t in range(horizon):
        vis, aud = venv.stacked()
        out = forward(vis, aud, params, cfg)
        a = sample_actions(out.probs, rng)
        vis_buf[t], aud_buf[t], actions[t] = vis, aud, a
        logp[t] = np.take_along_axis(out.log_probs.data, a[..., None], axis=-1)[..., 0]
        values[t] = out.values.data
        rewards[t], dones[t] = venv.step(a)
    vis, aud = venv.stacked()
    bootstrap = forward(vis, aud, params, cfg).values.data
    return RolloutBuffer(vis_buf, aud_buf, actions, logp, values, rewards, dones, bootstrap)


def discounted_returns(rewards: np.ndarray, dones: np.ndarray, gamma: float, bootstrap=None) -> np.ndarray:
    """G_t = r_t + gamma * G_{t+1}, cut at episode ends, over the leading time axis.

    ``dones[t]`` marks that the episode ended with the reward ``rewards[t]``;
    it broadcasts against trailing reward axes (agents).
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    dones = np.asarray(dones, dtype=bool)
    while dones.ndim < rewards.ndim:
        dones = dones[..., None]
    out = np.zeros_like(rewards)
    g = np.zeros(rewards.shape[1:]) if bootstrap is None else np.asarray(bootstrap, dtype=np.float64)
    for t in range(len(rewards) - 1, -1, -1):
        g = rewards[t] + gamma * np.where(dones[t], 0.0, g)
        out[t] = g
    return out


def compute_returns(buf: RolloutBuffer, gamma: float, bootstrap=None) -> tuple[np.ndarray, np.ndarray]:
    """Return targets and advantages (G - V) per (step, env, agent)."""
    boot = buf.bootstrap if bootstrap is None else bootstrap
    returns = discounted_returns(buf.rewards, buf.dones, gamma, boot)
    return returns, returns - buf.values


@dataclass
class AgentLoss:
    actor: Tensor
    critic: Tensor
    entropy: Tensor
    total: Tensor


def agent_loss(
    log_probs: Tensor,
    values: Tensor,
    actions: np.ndarray,
    advantages: np.ndarray,
    returns: np.ndarray,
    value_coef: float = 0.5,
    entropy_coef: float = 0.01,
) -> AgentLoss:
    """Loss for one agent over N transitions.

    ``log_probs`` is (N, A) and ``values`` (N,).  Advantages enter as constants.
    """
    n = len(actions)
    chosen = ad.maximum(log_probs[np.arange(n), np.asarray(actions)], ad.LOG_PROB_FLOOR)
    actor = -ad.mean(ad.mul(chosen, np.asarray(advantages, dtype=np.float64)))
    critic = ad.mean(ad.square(values - np.asarray(returns, dtype=np.float64))) * value_coef
    ent = -ad.sum_(ad.exp(log_probs) * log_probs, axis=-1)
    entropy = ad.mean(ent) * (-entropy_coef)
    return AgentLoss(actor, critic, entropy, actor + critic + entropy)


def total_loss(losses: Sequence[Tensor]) -> Tensor:
    if not losses:
        raise ValueError("total_loss needs at least one agent loss")
    acc = losses[0]
    for l in losses[1:]:
        acc = acc + l
    return acc * (1.0 / len(losses))


@dataclass
class LossReport:
    actor: list[float]
    critic: list[float]
    entropy: list[float]
    per_agent: list[float]
    total: float
    grad_norm: float


def batch_losses(buf: RolloutBuffer, params, cfg: ModelConfig, tcfg: TrainConfig, rows=None, targets=None):
    """Forward the rollout and build the averaged loss; call inside ``ad.record``.

    ``rows`` restricts the forward pass to a slice of the flattened (step, env)
    samples. Each chunk's losses are scaled by its share of the batch, so the
    chunk losses of a partition sum to the full-batch loss.
    """
    returns, adv = targets if targets is not None else compute_returns(buf, tcfg.gamma)
    t, e, n = buf.actions.shape
    flat = t * e
    rows = slice(0, flat) if rows is None else rows
    acts, adv, ret = (x.reshape(flat, n)[rows] for x in (buf.actions, adv, returns))
    out = forward(
        buf.visual.reshape(flat, n, *buf.visual.shape[3:])[rows],
        buf.audio.reshape(flat, n, *buf.audio.shape[3:])[rows],
        params,
        cfg,
    )
    share = len(acts) / flat
    per_agent = []
    for j in range(n):
        l = agent_loss(
            out.log_probs[:, j], out.values[:, j], acts[:, j], adv[:, j], ret[:, j], tcfg.value_coef, tcfg.entropy_coef
        )
        if share != 1.0:
            l = AgentLoss(l.actor * share, l.critic * share, l.entropy * share, l.total * share)
        per_agent.append(l)
    return total_loss([l.total for l in per_agent]), per_agent


class TrainingDiverged(RuntimeError):
    pass


def update(buf: RolloutBuffer, params, cfg: ModelConfig, tcfg: TrainConfig, opt: ad.AdamState, dump_dir=None) -> LossReport:
    """One A2C step. With ``tcfg.max_batch`` set, gradients are accumulated over
    sample chunks to bound the memory held by the tape."""
    t, e, n = buf.actions.shape
    flat = t * e
    size = tcfg.max_batch if tcfg.max_batch > 0 else flat
    targets = compute_returns(buf, tcfg.gamma)
    grads = None
    loss_sum = 0.0
    parts = np.zeros((4, n))
    for start in range(0, flat, size):
        with ad.record() as graph:
            loss, per_agent = batch_losses(buf, params, cfg, tcfg, slice(start, start + size), targets)
        loss_sum += loss.item()
        if not np.isfinite(loss_sum):
            path = None
            if dump_dir is not None:
                path = Path(dump_dir) / f"nan_batch_{opt.step}.npz"
                np.savez(path, **{k: v for k, v in asdict(buf).items()})
            raise TrainingDiverged(f"non-finite loss {loss_sum} at update {opt.step}; batch dumped to {path}")
        g = ad.backward(loss, params)
        parts += [[getattr(l, f).item() for l in per_agent] for f in ("actor", "critic", "entropy", "total")]
        graph.release()
        grads = g if grads is None else {k: grads[k] + g[k] for k in grads}
    grads, norm = ad.clip_by_global_norm(grads, tcfg.max_grad_norm)
    ad.adam_step(params, grads, opt)
    actor, critic, entropy, per = (list(map(float, row)) for row in parts)
    return LossReport(actor=actor, critic=critic, entropy=entropy, per_agent=per, total=loss_sum, grad_norm=norm)


@dataclass
class TrainResult:
    params: dict[str, Tensor]
    model_config: ModelConfig
    metrics: list[dict] = field(default_factory=list)
    update_seconds: list[float] = field(default_factory=list)


def write_metrics_csv(path, rows: Sequence[Mapping]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=METRIC_FIELDS)
        w.writeheader()
        for row in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})


def train(
    tcfg: TrainConfig,
    mcfg: ModelConfig,
    spec: EnvSpec = EnvSpec(),
    out_dir=None,
    on_update: Callable[[dict], None] | None = None,
) -> TrainResult:
    """Run ``tcfg.n_updates`` rollout/update cycles.

    With ``out_dir`` set, writes ``metrics.csv``, periodic ``ckpt_<update>.json``
    and ``final.json`` there.
    """
    from .metrics import ModelPolicy, evaluate  # metrics imports model only

    rng = np.random.default_rng(tcfg.seed)
    params = init_params(mcfg, tcfg.seed)
    opt = ad.AdamState(lr=tcfg.lr)
    venv = VecEnv(
        spec.scenes(spec.train_scenes), E.split_sounds(spec.sounds), tcfg.n_envs, mcfg.n_agents, rng, spec.max_steps
    )
    probe_scenes = spec.scenes(spec.probe_scenes) if tcfg.probe_every else []
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    result = TrainResult(params, mcfg)
    for u in range(1, tcfg.n_updates + 1):
        t0 = time.perf_counter()
        buf = collect_rollout(venv, params, mcfg, tcfg.horizon, rng)
        step_cfg = tcfg if tcfg.entropy_final is None else replace(tcfg, entropy_coef=tcfg.entropy_at(u))
        rep = update(buf, params, mcfg, step_cfg, opt, out)
        result.update_seconds.append(time.perf_counter() - t0)
        recent = venv.finished_returns[-50:]
        row = {
            "update": u,
            "env_steps": u * tcfg.steps_per_update,
            "L_actor": float(np.mean(rep.actor)),
            "L_critic": float(np.mean(rep.critic)),
            "L_entropy": float(np.mean(rep.entropy)),
            "L_total": rep.total,
            "mean_return": float(np.mean(recent)) if recent else float("nan"),
            "probe_sr": float("nan"),
        }
        recent_sr = venv.finished_success[-50:]
        extra = {"train_sr": float(np.mean(recent_sr)) if recent_sr else float("nan"),
                 "episodes": len(venv.finished_success)}
        if tcfg.probe_every and u % tcfg.probe_every == 0:
            eps = max(1, tcfg.probe_episodes // len(probe_scenes))
            report, _ = evaluate(
                ModelPolicy(params, mcfg), probe_scenes, "heard", eps, seed=tcfg.seed,
                n_agents=mcfg.n_agents, max_steps=spec.max_steps,
            )
            row["probe_sr"] = report.sr
        result.metrics.append(row)
        if on_update is not None:
            on_update({**row, **extra})
        log.info("update %d: %s", u, row)
        if out is not None and tcfg.checkpoint_every and u % tcfg.checkpoint_every == 0:
            save_model(out / f"ckpt_{u}.json", params, mcfg, {"update": u})
    if out is not None:
        write_metrics_csv(out / "metrics.csv", result.metrics)
        save_model(out / "final.json", params, mcfg, {"update": tcfg.n_updates})
    return result
