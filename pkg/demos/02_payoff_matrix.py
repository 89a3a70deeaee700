"""Train one model per perturbation type and score each against every
type.  Each row has some column where it does much worse than on its own
training objective, so no single adversarial training recipe covers all.

    python3 demos/02_payoff_matrix.py      (about half a minute)
"""
import numpy as np

from loanrobust import cli
from loanrobust.dataset import synthetic_fixture
from loanrobust.robust import payoff_matrix

train_ds, test_ds = synthetic_fixture(seed=7)
cfg = cli.DEFAULT_CONFIG
objectives = cli.objective_set(cfg)
pm = payoff_matrix(objectives, train_ds, test_ds, cli.train_config(cfg, "payoff", 30))

names = objectives.names
print("accuracy (row: trained on, column: evaluated under)")
print("          " + "".join(f"{n:>7s}" for n in names))
for n, row in zip(names, pm.accuracy):
    print(f"{n:>8s}  " + "".join(f"{v:7.3f}" for v in row))
for i, n in enumerate(names):
    j = int(np.argmin(pm.accuracy[i]))
    print(f"{n} model is weakest under {names[j]}: {pm.accuracy[i, i]:.3f} -> {pm.accuracy[i, j]:.3f}")
