"""Where does the trained model lose return relative to the teacher?"""

import sys
import time

import numpy as np

from eatlab import dataset as ds
from eatlab.env import EnvSpec, training_grid
from eatlab.evaluator import EatPolicy, EvalConfig, ExpertPolicy, SingleExpertPolicy, return_matrix
from eatlab.model import make_eat_config
from eatlab.trainer import TrainConfig, train


def main(n_traj=200, iters=1600, batch=48, d_model=32, heads=2, layers=2,
         dropout=0, lr=3, seed=0):
    spec = EnvSpec()
    data = ds.collect(spec, training_grid(), n_traj, seed=1000)
    cfg = make_eat_config(context_len=20, d_model=d_model, n_heads=heads,
                          n_layers=layers, dropout_rate=dropout / 100.0)
    tc = TrainConfig(iterations=iters, batch_size=batch, learning_rate=lr * 1e-4,
                     warmup_steps=100, seed=seed)
    t0 = time.time()
    res = train(data, tc, cfg)
    print(f"train: {time.time()-t0:.0f}s  final loss {res.final_loss:.4f}")

    ecfg = EvalConfig(trials=2, episodes_per_trial=3, master_seed=7)
    eat = return_matrix(lambda: EatPolicy(res.model), "eat", spec, ecfg)
    exp = return_matrix(ExpertPolicy, "expert", spec, ecfg)
    single = return_matrix(SingleExpertPolicy, "single", spec, ecfg)

    for label, flag in (("training cells", False), ("zero-shot cells", True)):
        ecells = [c.mean for c in eat.cells if c.zero_shot == flag]
        xcells = [c.mean for c in exp.cells if c.zero_shot == flag]
        print(f"{label}: eat {np.mean(ecells):7.2f}  expert {np.mean(xcells):7.2f} "
              f" gap {(np.mean(xcells)-np.mean(ecells))/np.mean(xcells)*100:5.2f}%")
    print(f"overall: eat {eat.mean_return():.2f} expert {exp.mean_return():.2f} "
          f"single {single.mean_return():.2f} "
          f"eat-over-single {(eat.mean_return()-single.mean_return())/single.mean_return()*100:+.2f}%")
    worst = sorted(zip([c.mean for c in eat.cells],
                       [c.mean for c in exp.cells],
                       [c.embodiment for c in eat.cells]), key=lambda z: z[0] - z[1])
    for m, x, e in worst[:6]:
        print(f"  worst cell {e.torso_length:.2f}/{e.front_limb_length:.2f}/"
              f"{e.hind_limb_length:.2f}: eat {m:6.1f} vs expert {x:6.1f}")


if __name__ == "__main__":
    kw = {}
    for arg in sys.argv[1:]:
        k, v = arg.split("=")
        kw[k] = int(v)
    main(**kw)
