"""Measure ordering margins between analytic controller variants.

Proxies, before any model training:
  expert        cell-tuned LQR + feedforward + phase compensation (teacher;
                ~ceiling for an H=20 imitator)
  blind         cell-tuned LQR + feedforward, no phase term (~ceiling for an
                H=1 imitator or a stateless regressor)
  single        nominal-cell controller, no phase term (the fixed-morphology
                baseline)
  single_phase  nominal-cell controller with phase compensation
"""

import sys
import time

import numpy as np

from eatlab import env
from eatlab.env import EnvSpec, NoiseProfile, VecEpisodes, evaluation_grid, expert_terms
from eatlab.model import EmbodimentVector
from eatlab.rng import derive_seed

EPISODES = 8


def controller_returns(spec, kind, episodes=EPISODES):
    grid = evaluation_grid()
    means = []
    nom = env.NOMINAL_EMBODIMENT
    for ci, e in enumerate(grid):
        seeds = [derive_seed(123, ci, ep) for ep in range(episodes)]
        vec = VecEpisodes(spec, [e] * episodes, seeds)
        if kind in ("expert", "blind"):
            k, aff, gain = expert_terms(e, spec)
        else:
            k, aff, gain = expert_terms(nom, spec)
        while not vec.done.all():
            d = env.disturbance(spec, vec.t, vec.phase)
            a = k * (spec.target_velocity - vec.v) + aff
            if kind in ("expert", "single_phase"):
                a = a - d / gain
            vec.step(np.clip(a, -1, 1))
        means.append(vec.returns.mean())
    return np.array(means)


def main(amp, period, push_p, push_amp, jit):
    noise = NoiseProfile(gain_jitter=jit, mass_jitter=jit,
                         push_probability=push_p, push_amplitude=push_amp)
    spec = EnvSpec(noise=noise, disturbance_amplitude=amp, disturbance_period=period)
    t0 = time.time()
    res = {kind: controller_returns(spec, kind)
           for kind in ("expert", "blind", "single", "single_phase")}
    noiseless = {kind: controller_returns(spec.noiseless(), kind, episodes=4)
                 for kind in ("expert",)}
    print(f"amp={amp} period={period} push=({push_p},{push_amp}) jit={jit}  "
          f"[{time.time()-t0:.1f}s]")
    me = res["expert"].mean()
    for kind, vals in res.items():
        rel = (me - vals.mean()) / vals.mean() * 100
        print(f"  {kind:13s} mean={vals.mean():7.2f} min={vals.min():7.2f} "
              f"expert-over-this={rel:6.2f}%")
    ratio = res["expert"] / noiseless["expert"]
    print(f"  expert noisy/noiseless ratio: min={ratio.min():.3f} mean={ratio.mean():.3f}")


if __name__ == "__main__":
    args = [float(x) for x in sys.argv[1:]] or [0.3, 240.0, 0.2, 0.06, 0.15]
    main(*args)
