"""Find a winning ticket in a small linear autoencoder.

Train the dense net, prune the smallest 20% of the surviving weights,
rewind what is left to its end-of-epoch-1 values, retrain, and repeat.
After each round the same mask is also trained from a fresh random
initialization. If the lottery picture holds, the rewound ticket should
reconstruct better than its random twin once most weights are gone.

With only 20 epochs the dense net (round 0) may sit near the
predict-the-mean plateau printed at the end; the masks found from it can
still escape that plateau, which is the point of the exercise.

    python3 demos/01_finding_a_ticket.py
"""

from gentickets.config import parse_config
from gentickets.harness import run_experiment

CONFIG = """
name = demo_ae
kind = imp
seeds = 0, 1
baselines = random_ticket
model.family = linear_ae
model.latent_dim = 16
model.hidden_dim = 64
dataset.kind = shapes16
dataset.n_train = 512
dataset.n_test = 256
schedule.rounds = 6
train.epochs = 20
train.lr = 0.003
eval.samples = 256
metrics = reconstruction_mse
"""


def main():
    cfg = parse_config(CONFIG)
    res = run_experiment(cfg, jobs=1)
    rows = {(r.run, r.round): r for r in res.rows}
    print(f"{'round':>5} {'sparsity':>9} {'winning':>9} {'random':>9}")
    for k in range(cfg.schedule.rounds + 1):
        w = rows["winning", k]
        r = rows.get(("random", k))
        print(f"{k:>5} {w.sparsity:>9.1%} {w.mean:>9.4f} {r.mean if r else float('nan'):>9.4f}")
    # pixel variance is the loss of always predicting the mean image
    ds = cfg.dataset.build()
    print(f"\npredict-the-mean baseline: {ds.pixel_variance:.4f}")


if __name__ == "__main__":
    main()
