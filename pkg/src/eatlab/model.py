"""Embodiment-aware transformer (EAT) head.

A window of (embodiment, state, action) timesteps is mapped to tokens in
the order e, s, a per timestep (s, a in vanilla mode), each modality through
its own linear layer + layer norm, plus a learned absolute-timestep
embedding added to every token of that timestep. The GPT hidden state at
each s-token is decoded to an action prediction, so the prediction for
timestep t conditions on e, s_1..s_t and a_1..a_{t-1} only.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .gpt import GptConfig, gpt_forward, init_gpt_params


@dataclass(frozen=True)
class EatConfig:
    context_len: int = 20  # H, in timesteps
    include_embodiment_token: bool = True
    state_dim: int = 2
    action_dim: int = 1
    embodiment_dim: int = 3
    max_episode_len: int = 200
    gpt: GptConfig = field(default_factory=GptConfig)

    def __post_init__(self):
        if self.context_len < 1:
            raise ValueError(f"context_len must be >= 1, got {self.context_len}")
        expected = self.tokens_per_step * self.context_len
        if self.gpt.max_tokens != expected:
            raise ValueError(
                f"gpt.max_tokens must be {expected} "
                f"({self.tokens_per_step} tokens x {self.context_len} timesteps), "
                f"got {self.gpt.max_tokens}"
            )

    @property
    def tokens_per_step(self) -> int:
        return 3 if self.include_embodiment_token else 2

    def to_json(self) -> dict:
        d = {k: getattr(self, k) for k in (
            "context_len", "include_embodiment_token", "state_dim",
            "action_dim", "embodiment_dim", "max_episode_len")}
        d["gpt"] = {k: getattr(self.gpt, k) for k in (
            "n_layers", "n_heads", "d_model", "max_tokens", "dropout_rate")}
        return d

    @classmethod
    def from_json(cls, d: dict) -> "EatConfig":
        gpt = GptConfig(**d["gpt"])
        rest = {k: v for k, v in d.items() if k != "gpt"}
        return cls(gpt=gpt, **rest)


def make_eat_config(context_len: int = 20, include_embodiment_token: bool = True,
                    n_layers: int = 3, n_heads: int = 4, d_model: int = 64,
                    dropout_rate: float = 0.1, state_dim: int = 2, action_dim: int = 1,
                    max_episode_len: int = 200) -> EatConfig:
    """Convenience constructor that sizes gpt.max_tokens to the window."""
    tps = 3 if include_embodiment_token else 2
    gpt = GptConfig(n_layers=n_layers, n_heads=n_heads, d_model=d_model,
                    max_tokens=tps * context_len, dropout_rate=dropout_rate)
    return EatConfig(context_len=context_len,
                     include_embodiment_token=include_embodiment_token,
                     state_dim=state_dim, action_dim=action_dim,
                     max_episode_len=max_episode_len, gpt=gpt)


@dataclass(frozen=True)
class EmbodimentVector:
    """Morphology in meters: torso, front limb, hind limb lengths."""

    torso_length: float
    front_limb_length: float
    hind_limb_length: float

    def as_array(self) -> np.ndarray:
        return np.array([self.torso_length, self.front_limb_length, self.hind_limb_length])

    def validate(self, bounds) -> "EmbodimentVector":
        arr = self.as_array()
        for value, (lo, hi) in zip(arr, bounds):
            if not (lo <= value <= hi) or value <= 0:
                raise ValueError(f"embodiment {tuple(arr)} outside bounds {tuple(bounds)}")
        return self


@dataclass
class TokenWindow:
    """An h-timestep slice of one episode, the unit of training/inference.

    states/actions are raw (unnormalized); timesteps are absolute episode
    indices and must be consecutive.
    """

    embodiment: np.ndarray  # (embodiment_dim,)
    states: np.ndarray      # (h, state_dim)
    actions: np.ndarray     # (h, action_dim); inference fills the last with zeros
    timesteps: np.ndarray   # (h,) ints

    def validate(self, cfg: EatConfig) -> "TokenWindow":
        h = len(self.timesteps)
        if not (1 <= h <= cfg.context_len):
            raise ValueError(f"window length {h} not in [1, {cfg.context_len}]")
        if self.states.shape != (h, cfg.state_dim) or self.actions.shape != (h, cfg.action_dim):
            raise ValueError(
                f"window shapes states={self.states.shape} actions={self.actions.shape} "
                f"inconsistent with h={h}, dims=({cfg.state_dim},{cfg.action_dim})"
            )
        if h > 1 and not np.all(np.diff(self.timesteps) == 1):
            raise ValueError(f"timesteps must be consecutive, got {self.timesteps}")
        if self.timesteps.min() < 0 or self.timesteps.max() >= cfg.max_episode_len:
            raise ValueError(
                f"timestep out of range [0, {cfg.max_episode_len}): {self.timesteps}"
            )
        return self


@dataclass(frozen=True)
class Normalization:
    """Z-scoring for states/actions plus embodiment box scaling to [-1, 1]."""

    state_mean: np.ndarray
    state_std: np.ndarray
    action_mean: np.ndarray
    action_std: np.ndarray
    embodiment_low: np.ndarray
    embodiment_high: np.ndarray

    @classmethod
    def identity(cls, state_dim: int, action_dim: int, bounds) -> "Normalization":
        lo = np.array([b[0] for b in bounds], dtype=float)
        hi = np.array([b[1] for b in bounds], dtype=float)
        return cls(np.zeros(state_dim), np.ones(state_dim),
                   np.zeros(action_dim), np.ones(action_dim), lo, hi)

    def norm_states(self, s: np.ndarray) -> np.ndarray:
        return (s - self.state_mean) / self.state_std

    def norm_actions(self, a: np.ndarray) -> np.ndarray:
        return (a - self.action_mean) / self.action_std

    def denorm_actions(self, a: np.ndarray) -> np.ndarray:
        return a * self.action_std + self.action_mean

    def norm_embodiment(self, e: np.ndarray) -> np.ndarray:
        return 2.0 * (e - self.embodiment_low) / (self.embodiment_high - self.embodiment_low) - 1.0

    def to_json(self) -> dict:
        return {k: getattr(self, k).tolist() for k in (
            "state_mean", "state_std", "action_mean", "action_std",
            "embodiment_low", "embodiment_high")}

    @classmethod
    def from_json(cls, d: dict) -> "Normalization":
        return cls(**{k: np.array(v, dtype=float) for k, v in d.items()})


def init_eat_params(cfg: EatConfig, rng: np.random.Generator) -> dict[str, Tensor]:
    d = cfg.gpt.d_model
    params = init_gpt_params(cfg.gpt, rng)

    def lin(name, n_in):
        params[f"embed.{name}.w"] = Tensor(rng.normal(0.0, 0.02, size=(n_in, d)), requires_grad=True)
        params[f"embed.{name}.b"] = Tensor(np.zeros(d), requires_grad=True)
        params[f"embed.{name}.ln.gain"] = Tensor(np.ones(d), requires_grad=True)
        params[f"embed.{name}.ln.bias"] = Tensor(np.zeros(d), requires_grad=True)

    if cfg.include_embodiment_token:
        lin("e", cfg.embodiment_dim)
    lin("s", cfg.state_dim)
    lin("a", cfg.action_dim)
    params["embed.t.table"] = Tensor(
        rng.normal(0.0, 0.02, size=(cfg.max_episode_len, d)), requires_grad=True)
    params["head.w"] = Tensor(rng.normal(0.0, 0.02, size=(d, cfg.action_dim)), requires_grad=True)
    params["head.b"] = Tensor(np.zeros(cfg.action_dim), requires_grad=True)
    return params


def _modality_tokens(params, name: str, x: Tensor) -> Tensor:
    y = ad.add(ad.matmul(x, params[f"embed.{name}.w"]), params[f"embed.{name}.b"])
    return ad.layer_norm(y, params[f"embed.{name}.ln.gain"], params[f"embed.{name}.ln.bias"])


def embed_window(
    params: dict[str, Tensor],
    cfg: EatConfig,
    embodiment: np.ndarray,  # (B, embodiment_dim), already scaled to [-1, 1]
    states: np.ndarray,      # (B, h, state_dim), normalized
    actions: np.ndarray,     # (B, h, action_dim), normalized
    timesteps: np.ndarray,   # (B, h) ints
) -> Tensor:
    """Build the (B, tokens_per_step*h, d_model) token sequence."""
    B, h = timesteps.shape
    if timesteps.size and timesteps.max() >= cfg.max_episode_len:
        raise ValueError(
            f"timestep {timesteps.max()} >= max episode length {cfg.max_episode_len}")
    d = cfg.gpt.d_model

    t_emb = ad.embedding_lookup(params["embed.t.table"], timesteps)  # (B, h, d)
    s_tok = ad.add(_modality_tokens(params, "s", Tensor(states)), t_emb)
    a_tok = ad.add(_modality_tokens(params, "a", Tensor(actions)), t_emb)

    parts = []
    if cfg.include_embodiment_token:
        e_tok = _modality_tokens(params, "e", Tensor(embodiment))  # (B, d)
        e_rep = ad.add(ad.repeat_new_axis(e_tok, 1, h), t_emb)
        parts.append(ad.reshape(e_rep, (B, h, 1, d)))
    parts.append(ad.reshape(s_tok, (B, h, 1, d)))
    parts.append(ad.reshape(a_tok, (B, h, 1, d)))
    stacked = ad.concat(parts, axis=2)  # (B, h, tps, d)
    return ad.reshape(stacked, (B, h * cfg.tokens_per_step, d))


def predict_actions(
    params: dict[str, Tensor],
    cfg: EatConfig,
    embodiment: np.ndarray,
    states: np.ndarray,
    actions: np.ndarray,
    timesteps: np.ndarray,
    dropout_rng: np.random.Generator | None = None,
) -> Tensor:
    """Normalized action predictions, one per timestep: (B, h, action_dim)."""
    B, h = timesteps.shape
    tokens = embed_window(params, cfg, embodiment, states, actions, timesteps)
    hidden = gpt_forward(tokens, params, cfg.gpt, dropout_rng=dropout_rng)
    per_step = ad.reshape(hidden, (B, h, cfg.tokens_per_step, cfg.gpt.d_model))
    s_pos = 1 if cfg.include_embodiment_token else 0
    s_hidden = ad.slice_t(per_step, (slice(None), slice(None), s_pos))  # (B, h, d)
    return ad.add(ad.matmul(s_hidden, params["head.w"]), params["head.b"])


def loss_mse(predicted: Tensor, target: np.ndarray) -> Tensor:
    """Mean over timesteps and action dims of squared error."""
    if predicted.size == 0:
        raise ValueError("loss_mse: empty prediction window")
    if predicted.shape != np.shape(target):
        raise ValueError(f"loss_mse: shape mismatch {predicted.shape} vs {np.shape(target)}")
    diff = ad.add(predicted, Tensor(-np.asarray(target, dtype=float)))
    return ad.mean_t(ad.mul(diff, diff))


class EatModel:
    """Bundles config, parameters, and normalization for inference."""

    def __init__(self, cfg: EatConfig, params: dict[str, Tensor], norm: Normalization):
        self.cfg = cfg
        self.params = params
        self.norm = norm

    @classmethod
    def init(cls, cfg: EatConfig, norm: Normalization, rng: np.random.Generator) -> "EatModel":
        return cls(cfg, init_eat_params(cfg, rng), norm)

    def act_batch(self, embodiments: np.ndarray, states: np.ndarray,
                  actions: np.ndarray, timesteps: np.ndarray) -> np.ndarray:
        """Deterministic actions for a batch of windows with a pending slot.

        ``states`` is (B, h, state_dim) raw; ``actions`` is (B, h, action_dim)
        raw with the final step's action ignored (pending). Returns raw
        actions (B, action_dim).
        """
        e = self.norm.norm_embodiment(embodiments)
        s = self.norm.norm_states(states)
        a = self.norm.norm_actions(actions)
        a[:, -1, :] = 0.0  # pending-action placeholder, normalized space
        with ad.no_grad():
            pred = predict_actions(self.params, self.cfg, e, s, a, timesteps)
        return self.norm.denorm_actions(pred.data[:, -1, :])

    def act(self, history_states: np.ndarray, history_actions: np.ndarray,
            embodiment: np.ndarray, t: int) -> np.ndarray:
        """Action for the state awaiting one at absolute timestep ``t``.

        ``history_states`` holds states up to and including the pending one,
        ``history_actions`` the actions already taken (one fewer entry).
        """
        n = len(history_states)
        if n < 1:
            raise ValueError("act: history must contain the pending state")
        if history_states.shape[1] != self.cfg.state_dim:
            raise ValueError(
                f"act: state dim {history_states.shape[1]} != config {self.cfg.state_dim}")
        h = min(n, self.cfg.context_len)
        states = history_states[n - h:].reshape(1, h, self.cfg.state_dim)
        actions = np.zeros((1, h, self.cfg.action_dim))
        if h > 1:
            actions[0, :-1, :] = history_actions[n - h: n - 1]
        timesteps = np.arange(t - h + 1, t + 1, dtype=np.int64).reshape(1, h)
        window = TokenWindow(np.asarray(embodiment, dtype=float), states[0],
                             actions[0], timesteps[0])
        window.validate(self.cfg)
        return self.act_batch(np.asarray(embodiment, dtype=float).reshape(1, -1),
                              states, actions, timesteps)[0]

    # -- persistence ------------------------------------------------------

    def save(self, path) -> None:
        """Write the parameter checkpoint plus a self-describing sidecar."""
        ad.save_params(path, {k: v.data for k, v in self.params.items()})
        sidecar = {"config": self.cfg.to_json(), "normalization": self.norm.to_json()}
        with open(str(path) + ".json", "w") as f:
            json.dump(sidecar, f, indent=1, sort_keys=True)

    @classmethod
    def load(cls, path) -> "EatModel":
        with open(str(path) + ".json") as f:
            sidecar = json.load(f)
        cfg = EatConfig.from_json(sidecar["config"])
        norm = Normalization.from_json(sidecar["normalization"])
        arrays = ad.load_params(path)
        params = {k: Tensor(v, requires_grad=True) for k, v in arrays.items()}
        return cls(cfg, params, norm)
