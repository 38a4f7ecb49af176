"""Experiment configuration files.

One ``key = value`` assignment per line, dotted keys for sections, ``#``
starts a comment.  Lists are comma separated.  Example::

    name = toy_ae
    kind = imp
    model.family = linear_ae
    schedule.rounds = 10
    seeds = 0, 1, 2, 3, 4

Unknown keys are rejected so that typos cannot silently fall back to
defaults.
"""

from dataclasses import dataclass, field, replace
from pathlib import Path

from .data import make_dataset
from .earlybird import EBConfig
from .errors import ConfigError
from .models import ModelConfig, TrainSettings
from .pruning import SCOPES, PruneSchedule

KINDS = ("imp", "earlybird", "transfer", "baselines")
BASELINES = ("random_ticket", "one_shot", "rewind_init", "snip", "grasp", "native")


def _bool(s):
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _opt(conv):
    def f(s):
        return None if s.strip().lower() in ("none", "") else conv(s)
    return f


def _list(conv):
    def f(s):
        return tuple(conv(x.strip()) for x in s.split(",") if x.strip())
    return f


def _str(s):
    return s.strip()


def _floats_or_auto(s):
    return "auto" if s.strip() == "auto" else _list(float)(s)


def _float_or_matched(s):
    return "matched" if s.strip() == "matched" else float(s)


KEYS = {
    "name": _str,
    "kind": _str,
    "seeds": _list(int),
    "baselines": _list(_str),
    "metrics": _list(_str),
    "scope": _str,
    "model.family": _str,
    "model.latent_dim": int,
    "model.base_channels": int,
    "model.image_size": int,
    "model.channels": int,
    "model.beta": _opt(float),
    "model.wgan_clip": _opt(float),
    "model.critic_steps": _opt(int),
    "model.hidden_dim": _opt(int),
    "dataset.kind": _str,
    "dataset.n_train": int,
    "dataset.n_test": int,
    "dataset.seed": int,
    "dataset.image_size": int,
    "dataset.images_path": _opt(_str),
    "dataset.labels_path": _opt(_str),
    "dataset.test_images_path": _opt(_str),
    "dataset.test_labels_path": _opt(_str),
    "schedule.p": float,
    "schedule.rounds": int,
    "schedule.rewind_iteration": _opt(int),
    "schedule.strategy": _str,
    "train.epochs": int,
    "train.batch_size": int,
    "train.lr": _opt(float),
    "train.lr_b": _opt(float),
    "train.beta1": _opt(float),
    "train.beta2": _opt(float),
    "eb.delta": float,
    "eb.lookback": int,
    "eb.ratio": float,
    "eb.aggregation": _str,
    "eb.pooling": _str,
    "eval.samples": int,
    "eval.extractor_seed": int,
    "eval.extractor_epochs": int,
    "eval.accuracy_floor": float,
    "eval.patience": int,
    "eval.min_delta": float,
    "eval.stop_curve": _opt(_str),
    "one_shot.sparsities": _floats_or_auto,
    "pai.sparsity": _float_or_matched,
    "pai.sparsities": _list(float),
    "transfer.source_family": _str,
    "transfer.source_rounds": int,
    "transfer.source_epochs": _opt(int),
    "transfer.source_lr": _opt(float),
    "transfer.source_component": _str,
    "transfer.target_component": _str,
    "transfer.mask_only": _bool,
    "output.images": _bool,
    "output.checkpoints": _bool,
    "output.wall_time": _bool,
    "output.grid_samples": int,
}


@dataclass(frozen=True)
class DatasetSpec:
    kind: str = "shapes16"
    n_train: int = 1024
    n_test: int = 512
    seed: int = 0
    image_size: int = 16
    images_path: str | None = None
    labels_path: str | None = None
    test_images_path: str | None = None
    test_labels_path: str | None = None

    def build(self):
        return make_dataset(**self.__dict__)


@dataclass(frozen=True)
class EvalSpec:
    samples: int = 2048
    extractor_seed: int = 0
    extractor_epochs: int = 12
    accuracy_floor: float = 0.9
    patience: int = 5
    min_delta: float = 1e-4
    stop_curve: str | None = None


@dataclass(frozen=True)
class TransferSpec:
    source_family: str = "vae"
    source_rounds: int = 4
    source_epochs: int | None = None
    source_lr: float | None = None
    source_component: str = "b"
    target_component: str = "a"
    mask_only: bool = False


@dataclass(frozen=True)
class ExperimentConfig:
    name: str = "experiment"
    kind: str = "imp"
    model: ModelConfig = field(default_factory=ModelConfig)
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    schedule: PruneSchedule = field(default_factory=PruneSchedule)
    eb: EBConfig | None = None
    baselines: tuple = ("random_ticket",)
    seeds: tuple = (0, 1, 2, 3, 4)
    epochs: int = 20
    train: TrainSettings = field(default_factory=TrainSettings)
    scope: str = "both_components"
    metrics: tuple = ()
    eval: EvalSpec = field(default_factory=EvalSpec)
    one_shot_sparsities: tuple | str = "auto"
    pai_sparsity: float | str = "matched"
    pai_sparsities: tuple = ()
    transfer: TransferSpec | None = None
    images: bool = True
    checkpoints: bool = True
    wall_time: bool = False
    grid_samples: int = 16

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"kind must be one of {KINDS}, got {self.kind!r}")
        if not self.seeds:
            raise ConfigError("seeds must be non-empty")
        if len(set(self.seeds)) != len(self.seeds):
            raise ConfigError(f"seeds must be distinct, got {self.seeds}")
        bad = [b for b in self.baselines if b not in BASELINES]
        if bad:
            raise ConfigError(f"unknown baselines {bad}; choose from {BASELINES}")
        if self.scope not in SCOPES:
            raise ConfigError(f"unknown scope {self.scope!r}")
        if self.epochs < 1:
            raise ConfigError("train.epochs must be >= 1")
        if self.kind == "earlybird" and self.eb is None:
            raise ConfigError("an earlybird run needs eb.* settings")
        if self.kind == "transfer" and self.transfer is None:
            raise ConfigError("a transfer run needs transfer.* settings")

    # pruning helpers read these names
    @property
    def stop_curve(self):
        return self.eval.stop_curve

    @property
    def patience(self):
        return self.eval.patience

    @property
    def min_delta(self):
        return self.eval.min_delta

    def with_seeds(self, seeds):
        return replace(self, seeds=tuple(seeds))


def parse_text(text, source="<config>"):
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in KEYS:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        try:
            values[key] = KEYS[key](value)
        except ValueError as e:
            raise ConfigError(f"{source}:{lineno}: bad value for {key}: {e}") from e
    return values


def _section(values, prefix):
    n = len(prefix) + 1
    return {k[n:]: v for k, v in values.items() if k.startswith(prefix + ".")}


def from_values(values):
    try:
        top = {k: v for k, v in values.items() if "." not in k}
        model = ModelConfig(**_section(values, "model"))
        dataset = DatasetSpec(**_section(values, "dataset"))
        if dataset.image_size != model.image_size and dataset.kind != "idx_images":
            model = replace(model, image_size=dataset.image_size)
        schedule = PruneSchedule(**_section(values, "schedule"))
        tr = _section(values, "train")
        epochs = tr.pop("epochs", 20)
        b1, b2 = tr.pop("beta1", None), tr.pop("beta2", None)
        betas = None if b1 is None and b2 is None else (b1 if b1 is not None else 0.9,
                                                        b2 if b2 is not None else 0.999)
        settings = TrainSettings(betas=betas, **tr)
        eb = _section(values, "eb")
        ev = _section(values, "eval")
        if "stop_curve" not in ev:
            ev["stop_curve"] = None if model.kind == "gan" else "val_reconstruction"
        tf = _section(values, "transfer")
        out = _section(values, "output")
        kind = top.get("kind", "imp")
        return ExperimentConfig(
            name=top.get("name", "experiment"), kind=kind, model=model, dataset=dataset, schedule=schedule,
            eb=EBConfig(**eb) if eb or kind == "earlybird" else None,
            baselines=top.get("baselines", ("random_ticket",)), seeds=top.get("seeds", (0, 1, 2, 3, 4)),
            epochs=epochs, train=settings, scope=top.get("scope", "both_components"),
            metrics=top.get("metrics", ()), eval=EvalSpec(**ev),
            one_shot_sparsities=values.get("one_shot.sparsities", "auto"),
            pai_sparsity=values.get("pai.sparsity", "matched"),
            pai_sparsities=values.get("pai.sparsities", ()),
            transfer=TransferSpec(**tf) if tf or kind == "transfer" else None,
            images=out.get("images", True), checkpoints=out.get("checkpoints", True),
            wall_time=out.get("wall_time", False), grid_samples=out.get("grid_samples", 16),
        )
    except (TypeError, ValueError) as e:
        if isinstance(e, ConfigError):
            raise
        raise ConfigError(str(e)) from e


def load_config(path):
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    return from_values(parse_text(text, str(path)))


def parse_config(text):
    return from_values(parse_text(text))
