"""How the sample-quality numbers behave.

A small classifier trained on the toy shapes supplies the features for
the Frechet distance. Two halves of the real test set should sit close
together and uniform noise far away. An untrained generator lands further
out still: its near-constant grey blobs have almost no spread in feature
space, and the covariance term punishes that. The last step writes a PGM
grid you can open in any image viewer.

    python3 demos/03_measuring_samples.py
"""

from pathlib import Path

import numpy as np

from gentickets.data import make_dataset
from gentickets.images import emit_image_grid
from gentickets.metrics import compute_stats, fid, inception_like_score, train_feature_extractor
from gentickets.models import ModelConfig, build_model, generate


def main():
    ds = make_dataset("shapes16", n_train=1024, n_test=1024, seed=0)
    ext = train_feature_extractor(ds, seed=0)
    print(f"extractor test accuracy: {ext.test_accuracy:.3f}")

    half = len(ds.test_x) // 2
    real_a = compute_stats(ext.features(ds.test_x[:half]))
    real_b = compute_stats(ext.features(ds.test_x[half:]))
    rng = np.random.default_rng(0)
    noise = rng.uniform(-1, 1, ds.test_x[:half].shape)
    fake = generate(build_model(ModelConfig("dcgan", base_channels=8), 0), half, rng)

    print(f"FID real vs real:      {fid(real_a, real_b):8.2f}")
    print(f"FID real vs untrained: {fid(real_a, compute_stats(ext.features(fake))):8.2f}")
    print(f"FID real vs noise:     {fid(real_a, compute_stats(ext.features(noise))):8.2f}")
    print(f"inception-like score of real images: {inception_like_score(ext.probs(ds.test_x)):.2f} "
          f"(max {ds.num_classes})")

    out = Path("demo_output") / "real_and_fake.pgm"
    emit_image_grid(np.concatenate([ds.test_x[:8], fake[:8]]), 8, out)
    print(f"top row real, bottom row untrained generator: {out}")


if __name__ == "__main__":
    main()
