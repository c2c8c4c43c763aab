"""Train quick models at acceptance scale and print the method-ordering
margins that the acceptance suite will assert. Used to pin environment and
training constants.
"""

import sys
import time

import numpy as np

from eatlab import dataset as ds
from eatlab.env import EnvSpec, NoiseProfile, training_grid
from eatlab.evaluator import (
    EatPolicy,
    EabcPolicy,
    EvalConfig,
    ExpertPolicy,
    SingleExpertPolicy,
    return_matrix,
)
from eatlab.model import make_eat_config
from eatlab.trainer import EabcConfig, TrainConfig, train, train_eabc


def main(n_traj=100, iters=800, batch=48, d_model=32, heads=2, layers=2, seed=0):
    spec = EnvSpec()
    t0 = time.time()
    data = ds.collect(spec, training_grid(), n_traj, seed=1000)
    print(f"collect: {time.time()-t0:.0f}s  ({len(data.trajectories)} trajs)")

    def tcfg(kind):
        return TrainConfig(iterations=iters, batch_size=batch, learning_rate=3e-4,
                           warmup_steps=100, seed=seed, model_kind=kind)

    models = {}
    for name, kind, H, inc_e in (
        ("eat", "eat", 20, True),
        ("vanilla", "vanilla", 20, False),
        ("eat_h1", "eat", 1, True),
    ):
        cfg = make_eat_config(context_len=H, include_embodiment_token=inc_e,
                              d_model=d_model, n_heads=heads, n_layers=layers,
                              dropout_rate=0.1)
        t0 = time.time()
        res = train(data, tcfg(kind), cfg)
        models[name] = res.model
        print(f"train {name}: {time.time()-t0:.0f}s  final loss {res.final_loss:.4f}")

    t0 = time.time()
    res = train_eabc(data, tcfg("eabc"), EabcConfig())
    models["eabc"] = res.model
    print(f"train eabc: {time.time()-t0:.0f}s  final loss {res.final_loss:.4f}")

    ecfg = EvalConfig(trials=2, episodes_per_trial=3, master_seed=7)
    factories = {
        "eat": lambda: EatPolicy(models["eat"]),
        "vanilla": lambda: EatPolicy(models["vanilla"]),
        "eat_h1": lambda: EatPolicy(models["eat_h1"]),
        "eabc": lambda: EabcPolicy(models["eabc"]),
        "single": SingleExpertPolicy,
        "expert": ExpertPolicy,
    }
    means = {}
    for name, factory in factories.items():
        t0 = time.time()
        for mult in (1.0, 2.0) if name in ("eat", "vanilla", "eabc", "single") else (1.0,):
            noisy_spec = spec.with_noise(NoiseProfile(multiplier=mult))
            m = return_matrix(factory, name, noisy_spec, ecfg)
            means[(name, mult)] = m.mean_return()
        print(f"eval {name}: {time.time()-t0:.0f}s")

    eat = means[("eat", 1.0)]
    print("\n=== clean-env means (noise x1) ===")
    for (name, mult), v in sorted(means.items()):
        if mult == 1.0:
            margin = (eat - v) / v * 100 if v else float("nan")
            print(f"  {name:8s} {v:8.2f}   eat-over-this {margin:+6.2f}%")
    print("=== noisy-env means (noise x2) ===")
    for (name, mult), v in sorted(means.items()):
        if mult == 2.0:
            print(f"  {name:8s} {v:8.2f}   retention vs clean "
                  f"{v/means[(name,1.0)]*100:5.1f}%")
    print(f"\nH1 below EAT: {(eat - means[('eat_h1',1.0)])/eat*100:.2f}% (need >=10)")


if __name__ == "__main__":
    kw = {}
    for arg in sys.argv[1:]:
        k, v = arg.split("=")
        kw[k] = int(v)
    main(**kw)
