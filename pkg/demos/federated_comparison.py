"""
A small federated run with each uplink codec
============================================

Same data, split and seed for every algorithm; only the uplink changes.
Runs in a few seconds.
"""

from fedbat.config import parse_config
from fedbat.fed_engine import run_experiment

BASE = """\
[experiment]
algorithm = {algo}
rounds = 40
seed = 0
eval_every = 10

[data]
n = 3000
n_test = 600
dim = 16
classes = 10

[partition]
scheme = dirichlet
n_clients = 20
beta = 0.5

[model]
hidden = 64

[training]
clients_per_round = 5
tau = 30
batch_size = 32
"""

for algo in ["fedavg-raw", "signsgd", "ef-signsgd", "noisy-signsgd", "stoc-signsgd", "fedbat"]:
    result = run_experiment(parse_config(BASE.format(algo=algo)))
    last = result.records[-1]
    print(f"{algo:>14}: test acc {100 * last.test_accuracy:5.1f}%  uplink {last.cum_uplink_bytes / 1e6:.2f} MB")
