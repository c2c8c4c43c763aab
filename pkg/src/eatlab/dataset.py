"""Trajectory persistence and training-window sampling.

File format: magic, u32 header length, JSON header (schema version, dims,
per-trajectory metadata, manifest, normalization, payload sha256), then one
little-endian float64 block per trajectory (states | actions | rewards).
The checksum makes corruption loud instead of silently misreading floats.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .env import ACTION_DIM, OBSERVATION_DIM, EnvSpec, VecEpisodes, disturbance, expert_terms
from .model import EmbodimentVector, Normalization, TokenWindow
from .rng import derive_rng, derive_seed

_MAGIC = b"EATDATA\x01"
DATASET_VERSION = 1


@dataclass
class Trajectory:
    embodiment: EmbodimentVector
    states: np.ndarray   # (T, state_dim)
    actions: np.ndarray  # (T, action_dim)
    rewards: np.ndarray  # (T,)
    seed: int
    env_id: str = "cruiser"

    def __post_init__(self):
        T = len(self.rewards)
        if len(self.states) != T or len(self.actions) != T:
            raise ValueError(
                f"trajectory sequences disagree: states {len(self.states)}, "
                f"actions {len(self.actions)}, rewards {T}")


@dataclass
class Dataset:
    trajectories: list[Trajectory]
    manifest: dict[str, int] = field(default_factory=dict)
    normalization: Normalization | None = None
    excluded: int = 0  # unstable expert rollouts dropped during collection

    @property
    def state_dim(self) -> int:
        return self.trajectories[0].states.shape[1] if self.trajectories else 0

    @property
    def action_dim(self) -> int:
        return self.trajectories[0].actions.shape[1] if self.trajectories else 0

    @property
    def episode_length(self) -> int:
        return len(self.trajectories[0].rewards) if self.trajectories else 0


def _embodiment_key(e: EmbodimentVector) -> str:
    return f"{e.torso_length:g},{e.front_limb_length:g},{e.hind_limb_length:g}"


def compute_normalization(trajectories: list[Trajectory], bounds) -> Normalization:
    """Per-dimension mean/std over the merged dataset; std floored at 1e-8."""
    states = np.concatenate([t.states for t in trajectories], axis=0)
    actions = np.concatenate([t.actions for t in trajectories], axis=0)
    lo = np.array([b[0] for b in bounds], dtype=float)
    hi = np.array([b[1] for b in bounds], dtype=float)
    return Normalization(
        state_mean=states.mean(axis=0),
        state_std=np.maximum(states.std(axis=0), 1e-8),
        action_mean=actions.mean(axis=0),
        action_std=np.maximum(actions.std(axis=0), 1e-8),
        embodiment_low=lo,
        embodiment_high=hi,
    )


# Std of the Gaussian exploration noise added to the teacher's actions in
# demonstrations. Without it the teacher's action sequence is an invertible
# function of the hidden disturbance, and learners latch onto that inversion,
# which is only valid when the teacher itself produced the history; noisy
# demonstrations force them onto dynamics features that survive their own
# rollouts.
TEACHER_ACTION_NOISE = 0.05


def collect(spec: EnvSpec, embodiments: list[EmbodimentVector],
            n_traj_per_embodiment: int, seed: int, batch: int = 100,
            action_noise_std: float = TEACHER_ACTION_NOISE) -> Dataset:
    """Roll out the privileged expert under the training noise profile.

    Rollouts whose return is negative (expert instability, which the bounded
    plant should never produce) are excluded and counted.
    """
    trajectories: list[Trajectory] = []
    manifest: dict[str, int] = {}
    excluded = 0
    T = spec.episode_length
    for ei, e in enumerate(embodiments):
        k, aff, gain = expert_terms(e, spec)
        kept = 0
        for start in range(0, n_traj_per_embodiment, batch):
            n = min(batch, n_traj_per_embodiment - start)
            seeds = [derive_seed(seed, 11, ei, start + j) for j in range(n)]
            explore = np.stack([
                derive_rng(seed, 12, ei, start + j).normal(0.0, 1.0, size=T)
                for j in range(n)]) * action_noise_std
            vec = VecEpisodes(spec, [e] * n, seeds)
            states = np.empty((n, T, OBSERVATION_DIM))
            actions = np.empty((n, T, ACTION_DIM))
            rewards = np.empty((n, T))
            for t in range(T):
                states[:, t, :] = vec.observations()
                d = disturbance(spec, vec.t, vec.phase)
                a = np.clip(k * (spec.target_velocity - vec.v) + aff - d / gain
                            + explore[:, t], -1.0, 1.0)
                r, _ = vec.step(a)
                actions[:, t, 0] = a
                rewards[:, t] = r
            for j in range(n):
                if vec.returns[j] < 0.0:
                    excluded += 1
                    continue
                trajectories.append(Trajectory(e, states[j], actions[j], rewards[j],
                                               seed=seeds[j]))
                kept += 1
        manifest[_embodiment_key(e)] = kept
    norm = compute_normalization(trajectories, spec.embodiment_bounds) if trajectories else None
    return Dataset(trajectories, manifest, norm, excluded)


# ---------------------------------------------------------------------------
# window sampling
# ---------------------------------------------------------------------------


def sample_window_batch(dataset: Dataset, H: int, batch_size: int,
                        rng: np.random.Generator):
    """Uniformly sample (trajectory, start) pairs and stack H-step windows.

    Returns normalized arrays: embodiment (B, 3), states (B, H, s),
    actions (B, H, a), timesteps (B, H) plus the normalized action targets.
    Windows never cross trajectory boundaries.
    """
    T = dataset.episode_length
    if H > T:
        raise ValueError(f"window length {H} exceeds trajectory length {T}")
    norm = dataset.normalization
    n_traj = len(dataset.trajectories)
    ti = rng.integers(0, n_traj, size=batch_size)
    si = rng.integers(0, T - H + 1, size=batch_size)
    emb = np.empty((batch_size, 3))
    states = np.empty((batch_size, H, dataset.state_dim))
    actions = np.empty((batch_size, H, dataset.action_dim))
    timesteps = np.empty((batch_size, H), dtype=np.int64)
    for b in range(batch_size):
        traj = dataset.trajectories[ti[b]]
        s = si[b]
        emb[b] = traj.embodiment.as_array()
        states[b] = traj.states[s: s + H]
        actions[b] = traj.actions[s: s + H]
        timesteps[b] = np.arange(s, s + H)
    return (norm.norm_embodiment(emb), norm.norm_states(states),
            norm.norm_actions(actions), timesteps)


def sample_window(dataset: Dataset, H: int, rng: np.random.Generator) -> TokenWindow:
    """One raw (unnormalized) window, as a TokenWindow."""
    T = dataset.episode_length
    if H > T:
        raise ValueError(f"window length {H} exceeds trajectory length {T}")
    traj = dataset.trajectories[rng.integers(0, len(dataset.trajectories))]
    s = int(rng.integers(0, T - H + 1))
    return TokenWindow(traj.embodiment.as_array(), traj.states[s: s + H].copy(),
                       traj.actions[s: s + H].copy(), np.arange(s, s + H))


# ---------------------------------------------------------------------------
# save / load
# ---------------------------------------------------------------------------


class DatasetFormatError(ValueError):
    pass


class DatasetVersionError(DatasetFormatError):
    pass


class DatasetTruncatedError(DatasetFormatError):
    pass


class DatasetChecksumError(DatasetFormatError):
    pass


def save(dataset: Dataset, path) -> None:
    payload = bytearray()
    metas = []
    for traj in dataset.trajectories:
        block = np.concatenate(
            [traj.states.reshape(-1), traj.actions.reshape(-1), traj.rewards],
        ).astype("<f8").tobytes()
        metas.append({
            "embodiment": list(traj.embodiment.as_array()),
            "seed": int(traj.seed),
            "env_id": traj.env_id,
            "offset": len(payload),
        })
        payload += block
    header = {
        "version": DATASET_VERSION,
        "episode_length": dataset.episode_length,
        "state_dim": dataset.state_dim,
        "action_dim": dataset.action_dim,
        "manifest": dataset.manifest,
        "excluded": dataset.excluded,
        "normalization": dataset.normalization.to_json() if dataset.normalization else None,
        "sha256": hashlib.sha256(bytes(payload)).hexdigest(),
        "trajectories": metas,
    }
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        f.write(bytes(payload))


def load(path) -> Dataset:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[: len(_MAGIC)] != _MAGIC:
        raise DatasetFormatError(f"{path}: not a dataset file (bad magic)")
    if len(blob) < len(_MAGIC) + 4:
        raise DatasetTruncatedError(f"{path}: truncated before header length")
    (hlen,) = struct.unpack_from("<I", blob, len(_MAGIC))
    start = len(_MAGIC) + 4
    if len(blob) < start + hlen:
        raise DatasetTruncatedError(f"{path}: truncated inside header")
    header = json.loads(blob[start: start + hlen].decode())
    if header["version"] != DATASET_VERSION:
        raise DatasetVersionError(
            f"{path}: dataset version {header['version']}, expected {DATASET_VERSION}")
    payload = blob[start + hlen:]
    T, sd, ad = header["episode_length"], header["state_dim"], header["action_dim"]
    block_floats = T * (sd + ad + 1)
    expected = len(header["trajectories"]) * block_floats * 8
    if len(payload) != expected:
        raise DatasetTruncatedError(
            f"{path}: payload is {len(payload)} bytes, expected {expected}")
    digest = hashlib.sha256(payload).hexdigest()
    if digest != header["sha256"]:
        raise DatasetChecksumError(f"{path}: payload checksum mismatch")
    trajectories = []
    for meta in header["trajectories"]:
        flat = np.frombuffer(payload, dtype="<f8", count=block_floats,
                             offset=meta["offset"]).astype(np.float64)
        states = flat[: T * sd].reshape(T, sd)
        actions = flat[T * sd: T * (sd + ad)].reshape(T, ad)
        rewards = flat[T * (sd + ad):]
        e = EmbodimentVector(*meta["embodiment"])
        trajectories.append(Trajectory(e, states, actions, rewards,
                                       seed=meta["seed"], env_id=meta["env_id"]))
    norm = Normalization.from_json(header["normalization"]) if header["normalization"] else None
    return Dataset(trajectories, header["manifest"], norm, header["excluded"])


def manifest_json(dataset: Dataset) -> str:
    doc = {
        "trajectories": len(dataset.trajectories),
        "excluded": dataset.excluded,
        "episode_length": dataset.episode_length,
        "state_dim": dataset.state_dim,
        "action_dim": dataset.action_dim,
        "per_embodiment": dataset.manifest,
        "normalization": dataset.normalization.to_json() if dataset.normalization else None,
    }
    return json.dumps(doc, indent=1, sort_keys=True)
