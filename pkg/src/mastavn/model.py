"""Multi-agent scalable transformer: patch embedding, per-modality encoders,
joint agent-major token sequence, agent-causal decoder and actor/critic heads.

Everything here is a pure function of ``(inputs, params, config)``; parameters
live in a flat ``{name: Tensor}`` dict so they checkpoint trivially.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from typing import Mapping

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .env import N_ACTIONS, N_FREQ, VIEW

PATCH = 3
N_VIS_TOKENS = (VIEW // PATCH) ** 2
N_AUD_TOKENS = 2
TOKENS_PER_AGENT = N_VIS_TOKENS + N_AUD_TOKENS
AUDIO_GAIN = 1000.0
VISUAL, AUDIO = 0, 1


@dataclass(frozen=True)
class ModelConfig:
    n_agents: int = 2
    d_model: int = 64
    n_heads: int = 4
    n_encoder_layers: int = 2
    n_decoder_layers: int = 2
    mlp_ratio: int = 4
    n_freq: int = N_FREQ
    n_actions: int = N_ACTIONS
    skip_encoders: bool = False
    mlp_decoder: bool = False
    per_agent_params: bool = False

    def __post_init__(self):
        for f in ("n_agents", "d_model", "n_heads", "n_encoder_layers", "n_decoder_layers", "mlp_ratio"):
            if getattr(self, f) < (0 if f.endswith("layers") else 1):
                raise ValueError(f"{f} must be positive, got {getattr(self, f)}")
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    @property
    def seq_len(self) -> int:
        return self.n_agents * TOKENS_PER_AGENT

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class JointSequence:
    tokens: Tensor  # (B, n*11, d)
    agent_index: np.ndarray  # (n*11,)
    modality: np.ndarray  # (n*11,)


@dataclass
class PolicyOutput:
    logits: Tensor  # (B, n, A)
    log_probs: Tensor  # (B, n, A)
    values: Tensor  # (B, n)
    states: Tensor  # (B, n, d)

    @property
    def probs(self) -> np.ndarray:
        return np.exp(self.log_probs.data)


# --- parameters ---------------------------------------------------------------------


def _linear(rng, fan_in, fan_out):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, (fan_in, fan_out)), rng.uniform(-bound, bound, fan_out)


def _embedding(rng, *shape):
    return rng.normal(0.0, 0.02, shape)


def _attn_params(rng, d, prefix, out):
    for k in ("q", "k", "v", "o"):
        out[f"{prefix}w{k}"], out[f"{prefix}b{k}"] = _linear(rng, d, d)


def _mlp_params(rng, d, hidden, prefix, out):
    out[f"{prefix}w1"], out[f"{prefix}b1"] = _linear(rng, d, hidden)
    out[f"{prefix}w2"], out[f"{prefix}b2"] = _linear(rng, hidden, d)


def _ln_params(d, prefix, out):
    out[f"{prefix}g"] = np.ones(d)
    out[f"{prefix}b"] = np.zeros(d)


def _encoder_prefix(cfg: ModelConfig, modality: str, agent: int) -> str:
    return f"enc.a{agent}.{modality}." if cfg.per_agent_params else f"enc.{modality}."


def _head_prefix(cfg: ModelConfig, agent: int) -> str:
    return f"head.a{agent}." if cfg.per_agent_params else "head."


def init_params(cfg: ModelConfig, seed: int = 0) -> dict[str, Tensor]:
    rng = np.random.default_rng(seed)
    d, hid = cfg.d_model, cfg.d_model * cfg.mlp_ratio
    p: dict[str, np.ndarray] = {}
    p["embed.vis.w"], p["embed.vis.b"] = _linear(rng, PATCH * PATCH * 2, d)
    p["embed.vis.pos"] = _embedding(rng, N_VIS_TOKENS, d)
    p["embed.aud.w"], p["embed.aud.b"] = _linear(rng, cfg.n_freq, d)
    p["embed.aud.pos"] = _embedding(rng, N_AUD_TOKENS, d)
    if not cfg.skip_encoders:
        agents = range(cfg.n_agents) if cfg.per_agent_params else [0]
        for a in agents:
            for mod in ("vis", "aud"):
                base = _encoder_prefix(cfg, mod, a)
                for layer in range(cfg.n_encoder_layers):
                    pre = f"{base}{layer}."
                    _ln_params(d, pre + "ln1.", p)
                    _attn_params(rng, d, pre + "attn.", p)
                    _ln_params(d, pre + "ln2.", p)
                    _mlp_params(rng, d, hid, pre + "mlp.", p)
    p["joint.agent"] = _embedding(rng, cfg.n_agents, d)
    if cfg.mlp_decoder:
        _mlp_params(rng, d, hid, "mlpdec.", p)
    else:
        p["dec.start"] = _embedding(rng, cfg.n_agents, d)
        for layer in range(cfg.n_decoder_layers):
            pre = f"dec.{layer}."
            _ln_params(d, pre + "ln1.", p)
            _attn_params(rng, d, pre + "self.", p)
            _ln_params(d, pre + "ln2.", p)
            _ln_params(d, pre + "lnkv.", p)
            _attn_params(rng, d, pre + "cross.", p)
            _ln_params(d, pre + "ln3.", p)
            _mlp_params(rng, d, hid, pre + "mlp.", p)
    _ln_params(d, "out.ln.", p)
    for a in range(cfg.n_agents) if cfg.per_agent_params else [0]:
        pre = _head_prefix(cfg, a)
        p[pre + "actor.w"], p[pre + "actor.b"] = _linear(rng, d, cfg.n_actions)
        p[pre + "critic.w"], p[pre + "critic.b"] = _linear(rng, d, 1)
    return ad.as_parameters(p)


# --- building blocks ------------------------------------------------------------------


def linear(x: Tensor, p: Mapping[str, Tensor], prefix: str, suffix: str = "") -> Tensor:
    return x @ p[f"{prefix}w{suffix}"] + p[f"{prefix}b{suffix}"]


def ln(x: Tensor, p: Mapping[str, Tensor], prefix: str) -> Tensor:
    return ad.layer_norm(x, p[prefix + "g"], p[prefix + "b"])


def mlp(x: Tensor, p: Mapping[str, Tensor], prefix: str) -> Tensor:
    return linear(ad.gelu(linear(x, p, prefix, "1")), p, prefix, "2")


def multi_head_attention(
    xq: Tensor,
    xkv: Tensor,
    p: Mapping[str, Tensor],
    prefix: str,
    n_heads: int,
    mask: np.ndarray | None = None,
    capture: list | None = None,
) -> Tensor:
    """softmax((xq Wq)(xkv Wk)^T / sqrt(d_k)) (xkv Wv), heads concatenated then Wo.

    ``xq`` is (M, Lq, d) and ``xkv`` (M, Lk, d); ``mask`` is (Lq, Lk), True = visible.
    """
    m, lq, d = xq.shape
    lk = xkv.shape[1]
    dk = d // n_heads
    q = linear(xq, p, prefix, "q").reshape(m, lq, n_heads, dk).transpose(0, 2, 1, 3)
    k = linear(xkv, p, prefix, "k").reshape(m, lk, n_heads, dk).transpose(0, 2, 3, 1)
    v = linear(xkv, p, prefix, "v").reshape(m, lk, n_heads, dk).transpose(0, 2, 1, 3)
    weights = ad.softmax((q @ k) * (1.0 / np.sqrt(dk)), mask)
    if capture is not None:
        capture.append({"stage": prefix.rstrip("."), "weights": weights.data, "mask": mask})
    out = (weights @ v).transpose(0, 2, 1, 3).reshape(m, lq, d)
    return linear(out, p, prefix, "o")


def encoder_block(x: Tensor, p, prefix: str, n_heads: int, capture=None) -> Tensor:
    h = ln(x, p, prefix + "ln1.")
    x = x + multi_head_attention(h, h, p, prefix + "attn.", n_heads, capture=capture)
    return x + mlp(ln(x, p, prefix + "ln2."), p, prefix + "mlp.")


# --- pipeline stages --------------------------------------------------------------------


def _batched(arr: np.ndarray, tail: int) -> np.ndarray:
    arr = np.asarray(arr, dtype=np.float64)
    while arr.ndim < tail + 2:
        arr = arr[None]
    return arr


def visual_patches(visual: np.ndarray) -> np.ndarray:
    """(..., 9, 9, 2) -> (..., 9, 18): row-major 3x3 patches, each flattened."""
    lead = visual.shape[:-3]
    g = VIEW // PATCH
    x = visual.reshape(*lead, g, PATCH, g, PATCH, 2)
    nl = len(lead)
    x = x.transpose(*range(nl), nl, nl + 2, nl + 1, nl + 3, nl + 4)
    return x.reshape(*lead, g * g, PATCH * PATCH * 2)


def patch_embed_visual(visual, p: Mapping[str, Tensor]) -> Tensor:
    visual = np.asarray(visual, dtype=np.float64)
    if visual.shape[-3:] != (VIEW, VIEW, 2):
        raise ad.ShapeError(f"visual input must end in ({VIEW}, {VIEW}, 2), got {visual.shape}")
    return Tensor(visual_patches(visual)) @ p["embed.vis.w"] + p["embed.vis.b"] + p["embed.vis.pos"]


def compress_audio(audio: np.ndarray) -> np.ndarray:
    """log1p(gain * x): turns distance gain and ear panning into additive offsets."""
    return np.log1p(AUDIO_GAIN * audio)


def patch_embed_audio(audio, p: Mapping[str, Tensor]) -> Tensor:
    audio = np.asarray(audio, dtype=np.float64)
    f = p["embed.aud.w"].shape[0]
    if audio.shape[-2:] != (N_AUD_TOKENS, f):
        raise ad.ShapeError(f"audio input must end in ({N_AUD_TOKENS}, {f}), got {audio.shape}")
    return Tensor(compress_audio(audio)) @ p["embed.aud.w"] + p["embed.aud.b"] + p["embed.aud.pos"]


def _encode_stack(x: Tensor, p, cfg: ModelConfig, base: str, capture=None) -> Tensor:
    lead = x.shape[:-2]
    flat = x.reshape(-1, *x.shape[-2:])
    for layer in range(cfg.n_encoder_layers):
        flat = encoder_block(flat, p, f"{base}{layer}.", cfg.n_heads, capture)
    return flat.reshape(*lead, *x.shape[-2:])


def encode_agent(vis_tokens: Tensor, aud_tokens: Tensor, p, cfg: ModelConfig, agent: int = 0, capture=None):
    """Run the visual and audio encoder stacks; identity under ``skip_encoders``."""
    if cfg.skip_encoders:
        return vis_tokens, aud_tokens
    i = _encode_stack(vis_tokens, p, cfg, _encoder_prefix(cfg, "vis", agent), capture)
    b = _encode_stack(aud_tokens, p, cfg, _encoder_prefix(cfg, "aud", agent), capture)
    return i, b


def encode_all(vis_tokens: Tensor, aud_tokens: Tensor, p, cfg: ModelConfig, capture=None):
    """Encode (B, n, L, d) token stacks for every agent."""
    if cfg.skip_encoders or not cfg.per_agent_params:
        return encode_agent(vis_tokens, aud_tokens, p, cfg, 0, capture)
    pairs = [
        encode_agent(vis_tokens[:, a : a + 1], aud_tokens[:, a : a + 1], p, cfg, a, capture)
        for a in range(cfg.n_agents)
    ]
    return ad.concat([i for i, _ in pairs], axis=1), ad.concat([b for _, b in pairs], axis=1)


def build_joint_sequence(info_seqs: Tensor, audio_seqs: Tensor, p, cfg: ModelConfig) -> JointSequence:
    """Agent-major concatenation (agent 0 visual, agent 0 audio, agent 1 visual, ...).

    Inputs are the per-agent encoded sequences stacked on axis 1: (B, n, 9, d) and
    (B, n, 2, d).  Each token gets its agent's embedding added.
    """
    n = info_seqs.shape[1]
    if n != cfg.n_agents or audio_seqs.shape[1] != n:
        raise ValueError(f"got sequences for {n} agents, config expects {cfg.n_agents}")
    per_agent = ad.concat([info_seqs, audio_seqs], axis=2)
    per_agent = per_agent + p["joint.agent"].reshape(1, n, 1, cfg.d_model)
    b = per_agent.shape[0]
    tokens = per_agent.reshape(b, n * TOKENS_PER_AGENT, cfg.d_model)
    agent_index = np.repeat(np.arange(n), TOKENS_PER_AGENT)
    modality = np.tile(np.array([VISUAL] * N_VIS_TOKENS + [AUDIO] * N_AUD_TOKENS), n)
    return JointSequence(tokens, agent_index, modality)


def agent_causal_mask(n: int) -> np.ndarray:
    return np.tril(np.ones((n, n), dtype=bool))


def visibility_mask(n: int) -> np.ndarray:
    """(n, n*11): query agent j may read tokens of agents 0..j."""
    key_agent = np.repeat(np.arange(n), TOKENS_PER_AGENT)
    return key_agent[None, :] <= np.arange(n)[:, None]


def decode(joint: JointSequence, p, cfg: ModelConfig, capture=None) -> Tensor:
    """One temporal state per agent, (B, n, d), computed in a single masked pass."""
    c = joint.tokens
    b, n = c.shape[0], cfg.n_agents
    if cfg.mlp_decoder:
        pooled = c.reshape(b, n, TOKENS_PER_AGENT, cfg.d_model).mean(axis=2)
        return mlp(pooled, p, "mlpdec.")
    self_mask = agent_causal_mask(n)
    cross_mask = visibility_mask(n)
    x = ad.add(np.zeros((b, n, cfg.d_model)), p["dec.start"])
    for layer in range(cfg.n_decoder_layers):
        pre = f"dec.{layer}."
        h = ln(x, p, pre + "ln1.")
        x = x + multi_head_attention(h, h, p, pre + "self.", cfg.n_heads, self_mask, capture)
        kv = ln(c, p, pre + "lnkv.")
        x = x + multi_head_attention(ln(x, p, pre + "ln2."), kv, p, pre + "cross.", cfg.n_heads, cross_mask, capture)
        x = x + mlp(ln(x, p, pre + "ln3."), p, pre + "mlp.")
    return x


def actor_head(s: Tensor, p, prefix: str = "head.") -> Tensor:
    """Action logits from temporal states; softmax is applied by the caller."""
    return linear(s, p, prefix + "actor.")


def critic_head(s: Tensor, p, prefix: str = "head.") -> Tensor:
    return linear(s, p, prefix + "critic.")


def _heads(s: Tensor, p, cfg: ModelConfig) -> tuple[Tensor, Tensor]:
    if not cfg.per_agent_params:
        return actor_head(s, p), critic_head(s, p)
    parts = [
        (actor_head(s[:, a : a + 1], p, _head_prefix(cfg, a)), critic_head(s[:, a : a + 1], p, _head_prefix(cfg, a)))
        for a in range(cfg.n_agents)
    ]
    return ad.concat([x for x, _ in parts], axis=1), ad.concat([v for _, v in parts], axis=1)


def forward(visual, audio, p: Mapping[str, Tensor], cfg: ModelConfig, capture: list | None = None) -> PolicyOutput:
    """Policy and value for every agent.

    ``visual`` is (B, n, 9, 9, 2) and ``audio`` (B, n, 2, F); a missing batch
    axis is added.  Pass a list as ``capture`` to collect attention maps.
    """
    visual = _batched(visual, 3)
    audio = _batched(audio, 2)
    if visual.shape[1] != cfg.n_agents or audio.shape[1] != cfg.n_agents:
        raise ad.ShapeError(
            f"observations for {visual.shape[1]}/{audio.shape[1]} agents, config expects {cfg.n_agents}"
        )
    vis_tokens = patch_embed_visual(visual, p)
    aud_tokens = patch_embed_audio(audio, p)
    info_seqs, audio_seqs = encode_all(vis_tokens, aud_tokens, p, cfg, capture)
    joint = build_joint_sequence(info_seqs, audio_seqs, p, cfg)
    states = ln(decode(joint, p, cfg, capture), p, "out.ln.")
    logits, values = _heads(states, p, cfg)
    values = values.reshape(*values.shape[:-1])
    return PolicyOutput(logits, ad.log_softmax(logits), values, states)


def load_model(path) -> tuple[dict[str, Tensor], ModelConfig, dict]:
    arrays, header = ad.load_checkpoint(path)
    if "model" not in header:
        raise ValueError(f"{path} has no model config header")
    cfg = ModelConfig.from_dict(header["model"])
    expected = init_params(cfg, 0)
    if set(expected) != set(arrays):
        missing, extra = sorted(set(expected) - set(arrays)), sorted(set(arrays) - set(expected))
        raise ValueError(f"checkpoint does not match its config: missing {missing[:5]}, unexpected {extra[:5]}")
    for k, t in expected.items():
        if t.shape != arrays[k].shape:
            raise ValueError(f"checkpoint tensor {k} has shape {arrays[k].shape}, config needs {t.shape}")
    return ad.as_parameters(arrays), cfg, header


def save_model(path, params: Mapping[str, Tensor], cfg: ModelConfig, extra: dict | None = None):
    header = {"model": cfg.to_dict(), **(extra or {})}
    return ad.save_checkpoint(path, params, header)
