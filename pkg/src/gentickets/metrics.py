"""Evaluation metrics: Frechet distance, inception-style score, losses,
downstream accuracy and early-stopping iteration.

Features come from a small convolutional classifier trained on the
experiment's own dataset, so distances are comparable between tickets
evaluated with the same extractor and not otherwise.  Every
:class:`MetricReport` carries the extractor fingerprint.
"""

import hashlib
from dataclasses import dataclass, field

import numpy as np

from . import functional as F
from .data import batches
from .errors import ContractError, NumericError
from .models import discriminator_scores, generate, reconstruct
from .nn import Conv2d, Flatten, Linear, ReLU, Sequential
from .optim import OptimizerState, adam_step, zero_grad
from .tensor import Tape, Tensor

COV_RIDGE = 1e-6


@dataclass
class FeatureStats:
    mu: np.ndarray
    sigma: np.ndarray
    n: int
    regularized: bool = False

    @property
    def dim(self):
        return self.mu.shape[0]


def compute_stats(features):
    """Sample mean and unbiased covariance of an ``(n, d)`` feature batch.

    When ``n <= d`` the covariance is rank deficient; a ridge of 1e-6 is
    added and the result flagged ``regularized``.
    """
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise ContractError(f"compute_stats needs at least 2 samples of d-vectors, got shape {x.shape}")
    n, d = x.shape
    mu = x.mean(axis=0)
    xc = x - mu
    s = xc.T @ xc / (n - 1)
    s = (s + s.T) / 2
    reg = n <= d
    if reg:
        s = s + COV_RIDGE * np.eye(d)
    return FeatureStats(mu=mu, sigma=s, n=n, regularized=reg)


def matrix_sqrt_psd(a, sym_tol=1e-10, neg_tol=1e-8):
    """Symmetric square root of a PSD matrix via eigendecomposition.

    Eigenvalues in ``[-neg_tol * scale, 0)`` are rounding noise and are
    clamped to zero.
    """
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ContractError(f"matrix_sqrt_psd needs a square matrix, got {a.shape}")
    scale = max(1.0, float(np.abs(a).max(initial=0.0)))
    if np.abs(a - a.T).max(initial=0.0) > sym_tol * scale:
        raise ContractError("matrix_sqrt_psd: matrix is not symmetric")
    w, v = np.linalg.eigh((a + a.T) / 2)
    if w.size and w.min() < -neg_tol * scale:
        raise ContractError(f"matrix_sqrt_psd: matrix has eigenvalue {w.min():.3e} < 0")
    root = (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T
    return (root + root.T) / 2


def fid(real, gen):
    """Frechet distance between two Gaussian feature fits.

    Uses ``Tr sqrt(S_r^1/2 S_g S_r^1/2)`` for the cross term, which is the
    trace of ``(S_r S_g)^1/2`` but keeps the square-root argument PSD.
    """
    if real.mu.shape != gen.mu.shape or real.sigma.shape != gen.sigma.shape:
        raise ContractError(f"fid: feature dims differ ({real.dim} vs {gen.dim})")
    diff = real.mu - gen.mu
    root_r = matrix_sqrt_psd(real.sigma)
    inner = root_r @ gen.sigma @ root_r
    cross = np.trace(matrix_sqrt_psd((inner + inner.T) / 2))
    value = float(diff @ diff + np.trace(real.sigma) + np.trace(gen.sigma) - 2.0 * cross)
    if value < 0:
        if value < -1e-6:
            raise NumericError(f"fid: negative distance {value:.3e}")
        value = 0.0
    return value


def inception_like_score(probs):
    """``exp(mean_x KL(p(y|x) || p(y)))`` over a batch of class distributions."""
    p = np.asarray(probs, dtype=np.float64)
    if p.ndim != 2 or len(p) == 0:
        raise ContractError(f"inception_like_score needs an (n, C) batch, got {p.shape}")
    if (p < 0).any() or np.abs(p.sum(axis=1) - 1.0).max() > 1e-6:
        raise ContractError("inception_like_score: rows must be probability vectors")
    marginal = p.mean(axis=0)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * (np.log(p) - np.log(marginal)), 0.0)
    return float(np.exp(terms.sum(axis=1).mean()))


def early_stop_iteration(loss_curve, patience=5, min_delta=1e-4):
    """Index at which ``patience`` consecutive points have failed to improve
    the best-so-far by more than ``min_delta``; ``len(curve)`` if never."""
    curve = list(loss_curve)
    if not curve:
        raise ContractError("early_stop_iteration needs a non-empty curve")
    best = curve[0]
    wait = 0
    for i in range(1, len(curve)):
        if curve[i] < best - min_delta:
            best = curve[i]
            wait = 0
        else:
            wait += 1
            if wait >= patience:
                return i
    return len(curve)


# ---------------------------------------------------------------- feature extractor

def _he(layer, rng):
    fan_in = int(np.prod(layer.weight.shape[1:]))
    layer.weight.data[...] = rng.normal(0.0, np.sqrt(2.0 / fan_in), layer.weight.shape)
    return layer


def build_classifier(channels, image_size, num_classes, feature_dim=32, rng=None):
    rng = rng if rng is not None else np.random.default_rng(0)
    flat = 16 * (image_size // 4) ** 2
    return Sequential([
        ("conv1", _he(Conv2d(channels, 8, 3, 2, 1, rng=rng), rng)),
        ("act1", ReLU()),
        ("conv2", _he(Conv2d(8, 16, 3, 2, 1, rng=rng), rng)),
        ("act2", ReLU()),
        ("flatten", Flatten()),
        ("fc1", _he(Linear(flat, feature_dim, rng=rng), rng)),
        ("act3", ReLU()),
        ("fc2", _he(Linear(feature_dim, num_classes, rng=rng), rng)),
    ])


@dataclass
class FeatureExtractor:
    net: Sequential = field(repr=False)
    feature_dim: int
    num_classes: int
    seed: int
    dataset_fingerprint: str
    test_accuracy: float = 0.0

    def _forward(self, images, upto_features, batch_size=512):
        images = np.asarray(images, dtype=np.float64)
        layers = self.net.layers[:-1] if upto_features else self.net.layers
        outs = []
        for i in range(0, len(images), batch_size):
            x = Tensor(images[i:i + batch_size])
            for _, layer in layers:
                x = layer(x)
            outs.append(x.data)
        width = self.feature_dim if upto_features else self.num_classes
        return np.concatenate(outs) if outs else np.zeros((0, width))

    def features(self, images):
        return self._forward(images, True)

    def logits(self, images):
        return self._forward(images, False)

    def probs(self, images):
        return np.exp(F.log_softmax(self.logits(images)))

    def predict(self, images):
        return self.logits(images).argmax(axis=1)

    def fingerprint(self):
        h = hashlib.sha256(self.dataset_fingerprint.encode())
        for _, p in self.net.named_parameters():
            h.update(p.data.tobytes())
        return h.hexdigest()[:16]


def train_feature_extractor(dataset, seed=0, feature_dim=32, epochs=12, batch_size=64, lr=2e-3,
                            accuracy_floor=0.9):
    """Train the shared classifier; refuses to return one below the floor."""
    rng = np.random.default_rng([seed, 0xFEA7])
    net = build_classifier(dataset.channels, dataset.image_size, dataset.num_classes, feature_dim, rng)
    params = [p for _, p in net.named_parameters()]
    for name, p in net.named_parameters():
        p.name = name
    opt = OptimizerState(lr=lr)
    x, y = dataset.train_x, dataset.train_y
    for epoch in range(epochs):
        erng = np.random.default_rng([seed, epoch, 0xFEA7])
        for idx in batches(len(x), batch_size, erng):
            with Tape() as tape:
                loss = F.cross_entropy(net(Tensor(x[idx])), y[idx])
            zero_grad(params)
            tape.backward(loss)
            adam_step(params, opt)
    ext = FeatureExtractor(net=net, feature_dim=feature_dim, num_classes=dataset.num_classes,
                           seed=seed, dataset_fingerprint=dataset.fingerprint())
    ext.test_accuracy = downstream_accuracy(dataset.test_x, dataset.test_y, ext)
    if ext.test_accuracy < accuracy_floor:
        raise ContractError(
            f"feature extractor reached {ext.test_accuracy:.3f} test accuracy, below the floor {accuracy_floor}")
    return ext


def downstream_accuracy(images, labels, classifier):
    """Top-1 accuracy of ``classifier`` on ``images``."""
    labels = np.asarray(labels)
    if len(labels) != len(images):
        raise ContractError(f"{len(images)} images but {len(labels)} labels")
    if len(labels) and (labels.min() < 0 or labels.max() >= classifier.num_classes):
        raise ContractError(f"labels outside the classifier's {classifier.num_classes} classes")
    if len(labels) == 0:
        raise ContractError("downstream_accuracy on an empty batch")
    return float(np.mean(classifier.predict(images) == labels))


# ---------------------------------------------------------------- reports

@dataclass
class MetricReport:
    fid: float | None = None
    inception_like: float | None = None
    reconstruction_mse: float | None = None
    discriminator_loss: float | None = None
    downstream_accuracy: float | None = None
    early_stop_iteration: int | None = None
    extractor: str = ""

    def as_dict(self):
        return {k: v for k, v in self.__dict__.items() if v is not None and k != "extractor"}

    def validate(self):
        for k, v in self.as_dict().items():
            if not np.isfinite(v):
                raise NumericError(f"metric {k} is not finite")
        return self


def discriminator_loss(net, real, fake):
    """Held-out critic loss: BCE on real-vs-generated, or the WGAN gap."""
    s_real = discriminator_scores(net, real)
    s_fake = discriminator_scores(net, fake)
    if net.config.family == "wgan":
        return float(s_fake.mean() - s_real.mean())
    return (F.bce_with_logits_loss(Tensor(s_real), 1.0).item()
            + F.bce_with_logits_loss(Tensor(s_fake), 0.0).item())


class Evaluator:
    """Computes a :class:`MetricReport` for trained networks on one dataset.

    Real-image statistics are computed once and reused.
    """

    def __init__(self, dataset, extractor, n_samples=2048, seed=0):
        self.dataset = dataset
        self.extractor = extractor
        self.n_samples = min(n_samples, len(dataset.test_x))
        self.seed = seed
        self.real = dataset.test_x[:self.n_samples]
        self.real_labels = dataset.test_y[:self.n_samples]
        self.real_stats = compute_stats(extractor.features(self.real))

    def fid_of(self, images):
        return fid(self.real_stats, compute_stats(self.extractor.features(images)))

    def __call__(self, net, loss_curve=None, patience=5, min_delta=1e-4, curve_offset=0):
        rep = MetricReport(extractor=self.extractor.fingerprint())
        kind = net.config.kind
        if kind in ("ae", "vae"):
            recon = reconstruct(net, self.real)
            rep.reconstruction_mse = float(np.mean((recon - self.real) ** 2))
            rep.downstream_accuracy = downstream_accuracy(recon, self.real_labels, self.extractor)
        if kind == "ae":
            rep.fid = self.fid_of(recon)
        else:
            samples = generate(net, self.n_samples, np.random.default_rng([self.seed, 0x6E4]))
            rep.fid = self.fid_of(samples)
            rep.inception_like = inception_like_score(self.extractor.probs(samples))
            if kind == "gan":
                rep.discriminator_loss = discriminator_loss(net, self.real, samples)
        if loss_curve:
            rep.early_stop_iteration = curve_offset + early_stop_iteration(loss_curve, patience, min_delta)
        return rep.validate()
