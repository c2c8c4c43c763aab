"""Supervised training of the transformer policies and the MLP baseline.

Every iteration samples a batch of expert windows, predicts actions at all
window timesteps, and takes one Adam step on the MSE. Loss is logged every
100 iterations; a NaN loss aborts with the iteration index and the last
finite value.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .dataset import Dataset, sample_window_batch
from .model import EatConfig, EatModel, Normalization, init_eat_params, loss_mse, predict_actions
from .rng import derive_rng

GRAD_CLIP_NORM = 1.0
LOG_EVERY = 100


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 20_000
    batch_size: int = 64
    learning_rate: float = 1e-4
    warmup_steps: int = 1_000
    seed: int = 0
    eval_every: int = 0  # also checkpoint every N iterations when > 0
    model_kind: str = "eat"  # eat | vanilla | eabc

    def __post_init__(self):
        if self.warmup_steps > self.iterations:
            raise ValueError(
                f"warmup_steps {self.warmup_steps} exceeds iterations {self.iterations}")
        if self.model_kind not in ("eat", "vanilla", "eabc"):
            raise ValueError(f"unknown model_kind {self.model_kind!r}")

    def to_json(self) -> dict:
        return {k: getattr(self, k) for k in (
            "iterations", "batch_size", "learning_rate", "warmup_steps",
            "seed", "eval_every", "model_kind")}


@dataclass(frozen=True)
class EabcConfig:
    hidden_widths: tuple = (128, 128)

    def to_json(self) -> dict:
        return {"hidden_widths": list(self.hidden_widths)}


class NanLossError(RuntimeError):
    def __init__(self, iteration: int, last_finite: float):
        super().__init__(
            f"loss became NaN at iteration {iteration}; last finite loss {last_finite:.6f}")
        self.iteration = iteration
        self.last_finite = last_finite


def _lr_at(cfg: TrainConfig, iteration: int) -> float:
    if cfg.warmup_steps > 0 and iteration < cfg.warmup_steps:
        return cfg.learning_rate * (iteration + 1) / cfg.warmup_steps
    return cfg.learning_rate


@dataclass
class TrainResult:
    model: object
    loss_curve: list[tuple[int, float]] = field(default_factory=list)
    final_loss: float = float("nan")


def write_loss_curve(path, curve: list[tuple[int, float]]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["iteration", "loss"])
        for it, loss in curve:
            w.writerow([it, repr(loss)])


def train(dataset: Dataset, train_cfg: TrainConfig, model_cfg: EatConfig,
          checkpoint_path=None, log=None) -> TrainResult:
    """Train an EAT or vanilla transformer policy on expert windows."""
    if dataset.state_dim != model_cfg.state_dim or dataset.action_dim != model_cfg.action_dim:
        raise ValueError(
            f"dataset dims ({dataset.state_dim},{dataset.action_dim}) do not match "
            f"model config ({model_cfg.state_dim},{model_cfg.action_dim})")
    if (train_cfg.model_kind == "vanilla") == model_cfg.include_embodiment_token:
        raise ValueError(
            f"model_kind {train_cfg.model_kind!r} inconsistent with "
            f"include_embodiment_token={model_cfg.include_embodiment_token}")

    init_rng = derive_rng(train_cfg.seed, 21)
    batch_rng = derive_rng(train_cfg.seed, 22)
    drop_rng = derive_rng(train_cfg.seed, 23)
    params = init_eat_params(model_cfg, init_rng)
    state = ad.init_adam(params, learning_rate=train_cfg.learning_rate)
    model = EatModel(model_cfg, params, dataset.normalization)

    curve: list[tuple[int, float]] = []
    last_finite = float("nan")
    H = model_cfg.context_len
    for it in range(train_cfg.iterations):
        emb, states, actions, timesteps = sample_window_batch(
            dataset, H, train_cfg.batch_size, batch_rng)
        rng = drop_rng if model_cfg.gpt.dropout_rate > 0 else None
        pred = predict_actions(params, model_cfg, emb, states, actions, timesteps,
                               dropout_rng=rng)
        loss = loss_mse(pred, actions)
        value = loss.item()
        if np.isnan(value):
            raise NanLossError(it, last_finite)
        last_finite = value
        ad.zero_grads(params)
        ad.backward(loss)
        ad.clip_grad_norm(params, GRAD_CLIP_NORM)
        grads = {k: p.grad for k, p in params.items()}
        ad.adam_step(params, grads, state, learning_rate=_lr_at(train_cfg, it))
        if it % LOG_EVERY == 0 or it == train_cfg.iterations - 1:
            curve.append((it, value))
            if log:
                log(f"iter {it}: loss {value:.6f}")
        if checkpoint_path and train_cfg.eval_every and it and it % train_cfg.eval_every == 0:
            model.save(checkpoint_path)
    if checkpoint_path:
        model.save(checkpoint_path)
    return TrainResult(model, curve, last_finite)


# ---------------------------------------------------------------------------
# MLP baseline: stateless regression from (embodiment, state) to action
# ---------------------------------------------------------------------------


class EabcModel:
    """Plain relu MLP from concatenated (scaled e, normalized s) to action."""

    def __init__(self, cfg: EabcConfig, params: dict[str, Tensor], norm: Normalization,
                 state_dim: int, action_dim: int):
        self.cfg = cfg
        self.params = params
        self.norm = norm
        self.state_dim = state_dim
        self.action_dim = action_dim

    @classmethod
    def init(cls, cfg: EabcConfig, norm: Normalization, state_dim: int,
             action_dim: int, embodiment_dim: int, rng: np.random.Generator) -> "EabcModel":
        widths = [embodiment_dim + state_dim, *cfg.hidden_widths, action_dim]
        params: dict[str, Tensor] = {}
        for i, (n_in, n_out) in enumerate(zip(widths[:-1], widths[1:])):
            scale = (2.0 / n_in) ** 0.5
            params[f"fc{i}.w"] = Tensor(rng.normal(0.0, scale, size=(n_in, n_out)),
                                        requires_grad=True)
            params[f"fc{i}.b"] = Tensor(np.zeros(n_out), requires_grad=True)
        return cls(cfg, params, norm, state_dim, action_dim)

    @property
    def n_layers(self) -> int:
        return len(self.cfg.hidden_widths) + 1

    def forward(self, inputs: np.ndarray) -> Tensor:
        x = Tensor(inputs)
        for i in range(self.n_layers):
            x = ad.add(ad.matmul(x, self.params[f"fc{i}.w"]), self.params[f"fc{i}.b"])
            if i < self.n_layers - 1:
                x = ad.relu(x)
        return x

    def act_batch(self, embodiments: np.ndarray, states: np.ndarray) -> np.ndarray:
        inputs = np.concatenate(
            [self.norm.norm_embodiment(embodiments), self.norm.norm_states(states)], axis=1)
        with ad.no_grad():
            out = self.forward(inputs)
        return self.norm.denorm_actions(out.data)

    def save(self, path) -> None:
        import json
        ad.save_params(path, {k: v.data for k, v in self.params.items()})
        sidecar = {
            "kind": "eabc",
            "hidden_widths": list(self.cfg.hidden_widths),
            "state_dim": self.state_dim,
            "action_dim": self.action_dim,
            "normalization": self.norm.to_json(),
        }
        with open(str(path) + ".json", "w") as f:
            json.dump(sidecar, f, indent=1, sort_keys=True)

    @classmethod
    def load(cls, path) -> "EabcModel":
        import json
        with open(str(path) + ".json") as f:
            sc = json.load(f)
        arrays = ad.load_params(path)
        params = {k: Tensor(v, requires_grad=True) for k, v in arrays.items()}
        return cls(EabcConfig(tuple(sc["hidden_widths"])), params,
                   Normalization.from_json(sc["normalization"]),
                   sc["state_dim"], sc["action_dim"])


def train_eabc(dataset: Dataset, train_cfg: TrainConfig, eabc_cfg: EabcConfig = EabcConfig(),
               checkpoint_path=None, log=None) -> TrainResult:
    """Per-sample (not windowed) regression with the same optimizer settings."""
    norm = dataset.normalization
    init_rng = derive_rng(train_cfg.seed, 31)
    batch_rng = derive_rng(train_cfg.seed, 32)
    model = EabcModel.init(eabc_cfg, norm, dataset.state_dim, dataset.action_dim,
                           3, init_rng)
    params = model.params
    state = ad.init_adam(params, learning_rate=train_cfg.learning_rate)
    T = dataset.episode_length
    n_traj = len(dataset.trajectories)
    curve: list[tuple[int, float]] = []
    last_finite = float("nan")
    for it in range(train_cfg.iterations):
        ti = batch_rng.integers(0, n_traj, size=train_cfg.batch_size)
        si = batch_rng.integers(0, T, size=train_cfg.batch_size)
        emb = np.empty((train_cfg.batch_size, 3))
        states = np.empty((train_cfg.batch_size, dataset.state_dim))
        targets = np.empty((train_cfg.batch_size, dataset.action_dim))
        for b in range(train_cfg.batch_size):
            traj = dataset.trajectories[ti[b]]
            emb[b] = traj.embodiment.as_array()
            states[b] = traj.states[si[b]]
            targets[b] = traj.actions[si[b]]
        inputs = np.concatenate([norm.norm_embodiment(emb), norm.norm_states(states)], axis=1)
        pred = model.forward(inputs)
        loss = loss_mse(pred, norm.norm_actions(targets))
        value = loss.item()
        if np.isnan(value):
            raise NanLossError(it, last_finite)
        last_finite = value
        ad.zero_grads(params)
        ad.backward(loss)
        ad.clip_grad_norm(params, GRAD_CLIP_NORM)
        grads = {k: p.grad for k, p in params.items()}
        ad.adam_step(params, grads, state, learning_rate=_lr_at(train_cfg, it))
        if it % LOG_EVERY == 0 or it == train_cfg.iterations - 1:
            curve.append((it, value))
            if log:
                log(f"iter {it}: loss {value:.6f}")
    if checkpoint_path:
        model.save(checkpoint_path)
    return TrainResult(model, curve, last_finite)
