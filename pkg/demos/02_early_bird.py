"""Spot an early-bird ticket while a toy DCGAN trains.

Each epoch we rank batch-norm scales, keep the top half of the channels,
and compare that channel mask with the ones from earlier epochs. Once the
mask stops moving (every distance in the window under delta), the network
is physically shrunk and training carries on with the small copy. The
FLOP ledger shows what that saves against training the dense net.

The cut is made separately inside the generator and the discriminator.
Ranking both on one |gamma| scale tends to gut the generator while the
discriminator keeps nearly everything, and the GAN then collapses.

    python3 demos/02_early_bird.py
"""

from gentickets.config import parse_config
from gentickets.earlybird import run_earlybird
from gentickets.harness import prepare
from gentickets.metrics import Evaluator

CONFIG = """
name = demo_eb
kind = earlybird
model.family = dcgan
model.base_channels = 16
dataset.kind = shapes16
dataset.n_train = 1024
dataset.n_test = 512
eb.ratio = 0.5
eb.delta = 0.1
eb.lookback = 5
eb.pooling = per_component
train.epochs = 30
eval.samples = 512
"""


def main():
    cfg = parse_config(CONFIG)
    ds, ext = prepare(cfg)
    rep = run_earlybird(cfg, seed=0, dataset=ds, evaluator=Evaluator(ds, ext, cfg.eval.samples))
    print("epoch-to-epoch mask distance:", " ".join(f"{d:.3f}" for d in rep.distances))
    if rep.found:
        print(f"early bird found after epoch {rep.detection_epoch}")
    else:
        print("no early bird within the budget; the dense net trained to the end")
    print(f"weights kept: {rep.weights} of {rep.dense_weights} ({float(rep.weight_sparsity):.1%} pruned)")
    print(f"training FLOPs: {rep.ledger.total:.3e} vs dense {rep.dense_ledger.total:.3e} "
          f"({rep.flop_savings:.1%} saved)")
    print(f"final FID: {rep.metrics.fid:.2f}")


if __name__ == "__main__":
    main()
