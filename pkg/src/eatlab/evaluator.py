"""Evaluation protocol: return matrices over the embodiment grid, the
method comparison table, and the context/dataset ablation summaries.

Policies follow a small batched protocol:

    policy.reset(embodiments, spec)   once per episode batch
    policy.actions(vec) -> (n,)       once per step, given the live episodes

Episodes are advanced in lockstep; per-episode RNG streams are derived from
(master seed, cell, trial, episode), so results do not depend on batching or
evaluation order. A policy emitting NaN marks that episode failed; failed
episodes score the environment's return floor rather than being dropped.
"""

from __future__ import annotations

import csv
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .dataset import Trajectory
from .env import (
    EnvSpec,
    NoiseProfile,
    VecEpisodes,
    disturbance,
    episode_return_floor,
    evaluation_grid,
    expert_terms,
    is_zero_shot,
    NOMINAL_EMBODIMENT,
)
from .model import EatModel, EmbodimentVector
from .rng import derive_seed

METHODS = ("eat", "vanilla", "eabc", "expert")


@dataclass(frozen=True)
class EvalConfig:
    trials: int = 3
    episodes_per_trial: int = 16
    master_seed: int = 0

    def __post_init__(self):
        if self.trials < 1:
            raise ValueError("trials must be >= 1")

    def to_json(self) -> dict:
        return {k: getattr(self, k) for k in ("trials", "episodes_per_trial", "master_seed")}


@dataclass
class CellResult:
    embodiment: EmbodimentVector
    mean: float
    std: float
    zero_shot: bool
    trial_means: list[float] = field(default_factory=list)


@dataclass
class ReturnMatrix:
    method_id: str
    noise_multiplier: float
    cells: list[CellResult]

    def mean_return(self) -> float:
        return float(np.mean([c.mean for c in self.cells]))

    def std_across_cells(self) -> float:
        return float(np.std([c.mean for c in self.cells]))

    def cell_map(self) -> dict[tuple, CellResult]:
        return {(c.embodiment.torso_length, c.embodiment.front_limb_length,
                 c.embodiment.hind_limb_length): c for c in self.cells}


# ---------------------------------------------------------------------------
# policies
# ---------------------------------------------------------------------------


class ExpertPolicy:
    """Per-cell teacher: LQR + feedforward + privileged phase compensation."""

    def reset(self, embodiments, spec):
        self.spec = spec
        terms = [expert_terms(e, spec) for e in embodiments]
        self.k = np.array([t[0] for t in terms])
        self.aff = np.array([t[1] for t in terms])
        self.gain = np.array([t[2] for t in terms])

    def actions(self, vec):
        d = disturbance(self.spec, vec.t, vec.phase)
        a = self.k * (self.spec.target_velocity - vec.v) + self.aff - d / self.gain
        return np.clip(a, -1.0, 1.0)


class SingleExpertPolicy:
    """Fixed-morphology baseline: the controller tuned for the nominal body,
    deployed on every cell. Reads observations only (no hidden phase)."""

    def __init__(self, e: EmbodimentVector = NOMINAL_EMBODIMENT):
        self.e = e

    def reset(self, embodiments, spec):
        self.spec = spec
        self.k, self.aff, self.gain = expert_terms(self.e, spec)

    def actions(self, vec):
        obs = vec.observations()
        a = self.k * (self.spec.target_velocity - obs[:, 0]) + self.aff
        return np.clip(a, -1.0, 1.0)


class ZeroPolicy:
    def reset(self, embodiments, spec):
        self.n = len(embodiments)

    def actions(self, vec):
        return np.zeros(self.n)


class EatPolicy:
    """Wraps a trained transformer; feeds it the last H timesteps."""

    def __init__(self, model: EatModel):
        self.model = model

    def reset(self, embodiments, spec):
        n = len(embodiments)
        T = spec.episode_length
        cfg = self.model.cfg
        self.emb = np.stack([e.as_array() for e in embodiments])
        self.state_hist = np.zeros((n, T, cfg.state_dim))
        self.action_hist = np.zeros((n, T, cfg.action_dim))

    def actions(self, vec):
        cfg = self.model.cfg
        t = vec.t
        self.state_hist[:, t, :] = vec.observations()
        h = min(t + 1, cfg.context_len)
        lo = t + 1 - h
        # the slot at t is pending; act_batch overwrites it with the placeholder
        window_actions = self.action_hist[:, lo: t + 1, :].copy()
        acts = self.model.act_batch(
            self.emb,
            self.state_hist[:, lo: t + 1, :],
            window_actions,
            np.tile(np.arange(lo, t + 1), (len(self.emb), 1)),
        )
        acts = np.clip(acts, -1.0, 1.0)
        self.action_hist[:, t, :] = acts
        return acts[:, 0]


class EabcPolicy:
    """Stateless regressor baseline."""

    def __init__(self, model):
        self.model = model

    def reset(self, embodiments, spec):
        self.emb = np.stack([e.as_array() for e in embodiments])

    def actions(self, vec):
        a = self.model.act_batch(self.emb, vec.observations())
        return np.clip(a[:, 0], -1.0, 1.0)


# ---------------------------------------------------------------------------
# rollouts
# ---------------------------------------------------------------------------


def run_episodes(policy, embodiments: list[EmbodimentVector], spec: EnvSpec,
                 seeds: list[int], stepper: bool = False):
    """Advance a batch of episodes to completion under ``policy``.

    Returns (returns, fitness, failed): failed episodes (NaN action) score
    the environment floor.
    """
    vec = VecEpisodes(spec, embodiments, seeds, stepper=stepper)
    policy.reset(embodiments, spec)
    failed = np.zeros(vec.n, dtype=bool)
    while not vec.done.all():
        acts = np.asarray(policy.actions(vec), dtype=float).reshape(vec.n)
        bad = np.isnan(acts)
        if bad.any():
            failed |= bad
            acts = np.where(bad, 0.0, acts)
        vec.step(acts)
    returns = np.where(failed, episode_return_floor(spec), vec.returns)
    return returns, vec.fitness(), failed


def rollout(policy, e: EmbodimentVector, spec: EnvSpec, seed: int):
    """Single evaluation episode; returns (undiscounted return, Trajectory)."""
    vec = VecEpisodes(spec, [e], [seed])
    policy.reset([e], spec)
    T = spec.episode_length
    states = np.zeros((T, 2))
    actions = np.zeros((T, 1))
    rewards = np.zeros(T)
    failed = False
    t = 0
    while not vec.done.all():
        states[t] = vec.observations()[0]
        a = float(np.asarray(policy.actions(vec)).reshape(1)[0])
        if np.isnan(a):
            failed = True
            a = 0.0
        r, _ = vec.step(np.array([a]))
        actions[t, 0] = np.clip(a, -1.0, 1.0)
        rewards[t] = r[0]
        t += 1
    ret = episode_return_floor(spec) if failed else float(vec.returns[0])
    traj = Trajectory(e, states[:t], actions[:t], rewards[:t], seed=seed, env_id="eval")
    return ret, traj


def _eval_chunk(policy_factory, spec, cells, cfg: EvalConfig):
    episodes = cfg.trials * cfg.episodes_per_trial
    embodiments = []
    seeds = []
    for ci, e in cells:
        for trial in range(cfg.trials):
            for ep in range(cfg.episodes_per_trial):
                embodiments.append(e)
                seeds.append(derive_seed(cfg.master_seed, 41, ci, trial, ep))
    returns, _, _ = run_episodes(policy_factory(), embodiments, spec, seeds)
    return returns.reshape(len(cells), cfg.trials, cfg.episodes_per_trial)


def return_matrix(policy_factory, method_id: str, spec: EnvSpec, cfg: EvalConfig,
                  grid: list[EmbodimentVector] | None = None,
                  chunk_cells: int = 16) -> ReturnMatrix:
    """Mean/std of returns per grid cell; trials define the std grouping.

    ``policy_factory`` builds a fresh policy per chunk so chunking cannot
    leak state; EATLAB_THREADS > 1 evaluates chunks concurrently.
    """
    grid = list(evaluation_grid()) if grid is None else grid
    if not grid:
        raise ValueError("empty evaluation grid")
    indexed = list(enumerate(grid))
    chunks = [indexed[i: i + chunk_cells] for i in range(0, len(indexed), chunk_cells)]
    threads = int(os.environ.get("EATLAB_THREADS", "1"))
    results = [None] * len(chunks)
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            futs = {pool.submit(_eval_chunk, policy_factory, spec, chunk, cfg): i
                    for i, chunk in enumerate(chunks)}
            for fut, i in futs.items():
                results[i] = fut.result()
    else:
        for i, chunk in enumerate(chunks):
            results[i] = _eval_chunk(policy_factory, spec, chunk, cfg)
    per_cell = np.concatenate(results, axis=0)  # (cells, trials, episodes)
    cells = []
    for ci, e in indexed:
        trial_means = per_cell[ci].mean(axis=1)
        cells.append(CellResult(e, float(per_cell[ci].mean()), float(per_cell[ci].std()),
                                is_zero_shot(e), [float(x) for x in trial_means]))
    return ReturnMatrix(method_id, spec.noise.multiplier, cells)


def matrix_to_csv(matrix: ReturnMatrix, path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["torso", "front", "hind", "method", "noise_multiplier",
                    "mean_return", "std_return", "zero_shot"])
        for c in matrix.cells:
            e = c.embodiment
            w.writerow([repr(e.torso_length), repr(e.front_limb_length),
                        repr(e.hind_limb_length), matrix.method_id,
                        repr(matrix.noise_multiplier), repr(c.mean), repr(c.std),
                        int(c.zero_shot)])


def matrix_from_csv(path) -> list[ReturnMatrix]:
    groups: dict[tuple[str, float], list[CellResult]] = {}
    with open(path, newline="") as f:
        for row in csv.DictReader(f):
            key = (row["method"], float(row["noise_multiplier"]))
            e = EmbodimentVector(float(row["torso"]), float(row["front"]), float(row["hind"]))
            groups.setdefault(key, []).append(CellResult(
                e, float(row["mean_return"]), float(row["std_return"]),
                bool(int(row["zero_shot"]))))
    return [ReturnMatrix(m, n, cells) for (m, n), cells in groups.items()]


def method_table(matrices: list[ReturnMatrix]) -> list[dict]:
    """Per (method, noise): mean +/- std across cells. Grids must match."""
    if not matrices:
        raise ValueError("no matrices given")
    ref = {(c.embodiment.torso_length, c.embodiment.front_limb_length,
            c.embodiment.hind_limb_length) for c in matrices[0].cells}
    rows = []
    for m in matrices:
        keys = {(c.embodiment.torso_length, c.embodiment.front_limb_length,
                 c.embodiment.hind_limb_length) for c in m.cells}
        if keys != ref:
            raise ValueError(f"matrix {m.method_id} grid does not match the first matrix")
        rows.append({
            "method": m.method_id,
            "noise_multiplier": m.noise_multiplier,
            "mean": m.mean_return(),
            "std": m.std_across_cells(),
        })
    return rows


def method_table_csv(rows: list[dict], path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["method", "noise_multiplier", "mean", "std"])
        for r in rows:
            w.writerow([r["method"], repr(r["noise_multiplier"]),
                        repr(r["mean"]), repr(r["std"])])


def best_method_per_cell(matrices: list[ReturnMatrix]) -> dict[tuple, str]:
    best: dict[tuple, tuple[float, str]] = {}
    for m in matrices:
        for c in m.cells:
            key = (c.embodiment.torso_length, c.embodiment.front_limb_length,
                   c.embodiment.hind_limb_length)
            if key not in best or c.mean > best[key][0]:
                best[key] = (c.mean, m.method_id)
    return {k: v[1] for k, v in best.items()}


def ablation_suite(variant_matrices: dict[str, ReturnMatrix]) -> list[dict]:
    """Summaries for trained variants (context length / dataset ablations)."""
    rows = []
    for name, matrix in variant_matrices.items():
        rows.append({
            "variant": name,
            "noise_multiplier": matrix.noise_multiplier,
            "mean": matrix.mean_return(),
            "std": matrix.std_across_cells(),
        })
    return rows


def expert_ceilings(spec: EnvSpec, cfg: EvalConfig,
                    grid: list[EmbodimentVector] | None = None) -> ReturnMatrix:
    """Per-cell teacher returns on the noiseless env: the reference ceiling."""
    return return_matrix(ExpertPolicy, "expert_ceiling", spec.noiseless(), cfg, grid)
