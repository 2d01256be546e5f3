from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
import os
from pathlib import Path
import types
import typing
from typing import Any, Iterable

from dotenv import load_dotenv

from app.core.errors import ConfigError
from data.enums import FreezePolicy

BASE_DIR = Path(__file__).resolve().parent.parent.parent
ENV_PATH = BASE_DIR / ".env"

if ENV_PATH.exists():
    load_dotenv(ENV_PATH)


def _parse_int_tuple(value: str) -> tuple[int, ...]:
    return tuple(int(item.strip()) for item in value.split(",") if item.strip())


def _parse_float_tuple(value: str) -> tuple[float, ...]:
    return tuple(float(item.strip()) for item in value.split(",") if item.strip())


def _parse_bool(value: str) -> bool:
    lowered = value.strip().lower()
    if lowered in {"1", "true", "yes", "on"}:
        return True
    if lowered in {"0", "false", "no", "off"}:
        return False
    raise ValueError(f"not a boolean: {value!r}")


def _env(name: str, default: str) -> str:
    return os.getenv(name, default)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 32
    max_epochs: int = 300
    early_stop_patience: int = 20
    plateau_patience: int = 8
    plateau_factor: float = 0.5
    min_lr: float = 1e-6
    seed: int = 42
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-4

    def __post_init__(self) -> None:
        if self.learning_rate <= 0:
            raise ConfigError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.max_epochs < 0:
            raise ConfigError(f"max_epochs must be >= 0, got {self.max_epochs}")
        if self.early_stop_patience < 1 or self.plateau_patience < 1:
            raise ConfigError("patience values must be >= 1")
        if not 0.0 < self.plateau_factor < 1.0:
            raise ConfigError(f"plateau_factor must be in (0, 1), got {self.plateau_factor}")
        if self.min_lr < 0 or self.min_lr > self.learning_rate:
            raise ConfigError("min_lr must be in [0, learning_rate]")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ConfigError("AdamW betas must be in [0, 1)")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be >= 0")


@dataclass(frozen=True)
class CsaeConfig:
    filters: tuple[int, ...] = (16, 32, 8)
    kernel_sizes: tuple[int, ...] = (11, 7, 5)
    strides: tuple[int, ...] = (4, 5, 1)
    alpha: float = 0.1
    lam: float = 1e-7
    segment_length: int = 1000
    channels: int = 2
    train: TrainConfig = field(default_factory=TrainConfig)

    def __post_init__(self) -> None:
        if not (len(self.filters) == len(self.kernel_sizes) == len(self.strides) == 3):
            raise ConfigError("filters, kernel_sizes and strides need exactly 3 entries (Conv I, Conv II, Conv III)")
        if min(self.filters) < 1 or min(self.kernel_sizes) < 1 or min(self.strides) < 1:
            raise ConfigError("filters, kernel sizes and strides must be >= 1")
        if not 0.0 < self.alpha < 1.0:
            raise ConfigError(f"alpha must be in (0, 1), got {self.alpha}")
        if self.lam < 0:
            raise ConfigError(f"lambda must be >= 0, got {self.lam}")

    @property
    def bottleneck_width(self) -> int:
        return self.filters[-1]


@dataclass(frozen=True)
class ClassifierConfig:
    head_conv: tuple[int, ...] = (32, 5, 2)
    mlp_widths: tuple[int, ...] = (64, 32)
    num_classes: int = 6
    alpha: float = 0.1
    norm_eps: float = 1e-5
    pooling: str = "attention"
    train: TrainConfig = field(default_factory=TrainConfig)

    def __post_init__(self) -> None:
        if len(self.head_conv) != 3 or min(self.head_conv) < 1:
            raise ConfigError("head_conv must be (channels, kernel, stride) with entries >= 1")
        if len(self.mlp_widths) != 2 or min(self.mlp_widths) < 1:
            raise ConfigError("mlp_widths must hold two widths >= 1")
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {self.num_classes}")
        if not 0.0 < self.alpha < 1.0:
            raise ConfigError(f"alpha must be in (0, 1), got {self.alpha}")
        if self.pooling not in {"attention", "gap"}:
            raise ConfigError(f"pooling must be 'attention' or 'gap', got {self.pooling!r}")


@dataclass(frozen=True)
class AdaptationConfig:
    finetune: TrainConfig = field(default_factory=lambda: TrainConfig(learning_rate=1e-4, min_lr=1e-7))
    phase1: TrainConfig = field(default_factory=TrainConfig)
    phase2: TrainConfig = field(default_factory=lambda: TrainConfig(learning_rate=1e-5, min_lr=1e-8))
    policy: FreezePolicy = FreezePolicy.FINAL_DENSE_ONLY
    calib_fraction: float = 1.0
    new_classes: int = 10

    def __post_init__(self) -> None:
        if not 0.0 < self.calib_fraction <= 1.0:
            raise ConfigError(f"calib_fraction must be in (0, 1], got {self.calib_fraction}")
        if self.phase2.learning_rate >= self.phase1.learning_rate:
            raise ConfigError("phase2 learning rate must be lower than phase1")


@dataclass(frozen=True)
class ForestConfig:
    num_trees: int = 100
    max_depth: int = 12
    min_samples_split: int = 2
    bootstrap: bool = True
    seed: int = 42
    deadband: float = 0.01

    def __post_init__(self) -> None:
        if self.num_trees < 1:
            raise ConfigError("num_trees must be >= 1")
        if self.max_depth < 0:
            raise ConfigError("max_depth must be >= 0")


@dataclass(frozen=True)
class FcaeConfig:
    hidden_widths: tuple[int, ...] = (512,)
    latent_width: int = 128
    alpha: float = 0.1
    lam: float = 0.0
    train: TrainConfig = field(default_factory=TrainConfig)

    def __post_init__(self) -> None:
        if any(width < 1 for width in self.hidden_widths) or self.latent_width < 1:
            raise ConfigError("FCAE widths must be >= 1")


@dataclass(frozen=True)
class SyntheticConfig:
    num_subjects: int = 8
    trials_per_class: int = 6
    duration_s: float = 5.0
    sampling_rate: int = 4000
    snr_db: float = 10.0
    gain_spread: float = 0.6
    shift_spread_hz: float = 30.0

    def __post_init__(self) -> None:
        if self.num_subjects < 2:
            raise ConfigError("synthetic data needs at least 2 subjects")
        if not 1 <= self.trials_per_class <= 6:
            raise ConfigError("trials_per_class must be in 1..6")
        if self.duration_s <= 0 or self.sampling_rate < 1:
            raise ConfigError("duration_s and sampling_rate must be positive")


@dataclass(frozen=True)
class RunConfig:
    data_dir: Path | None = None
    synthetic: bool = False
    num_classes: int = 6
    seed: int = 42
    output_dir: Path = Path("runs/latest")
    window: int = 1000
    window_stride: int = 500
    lambdas: tuple[float, ...] = (0.0, 1e-8, 1e-7, 1e-6, 1e-5)
    bottleneck_filters: tuple[int, ...] = ()
    # 0 runs every LOSO fold
    folds: int = 0
    csae: CsaeConfig = field(default_factory=CsaeConfig)
    classifier: ClassifierConfig = field(default_factory=ClassifierConfig)
    adaptation: AdaptationConfig = field(default_factory=AdaptationConfig)
    forest: ForestConfig = field(default_factory=ForestConfig)
    fcae: FcaeConfig = field(default_factory=FcaeConfig)
    synthetic_data: SyntheticConfig = field(default_factory=SyntheticConfig)

    def __post_init__(self) -> None:
        if self.num_classes not in (6, 10):
            raise ConfigError(f"num_classes must be 6 or 10, got {self.num_classes}")
        if self.window < 1 or self.window_stride < 1:
            raise ConfigError("window and window_stride must be >= 1")
        if self.folds < 0:
            raise ConfigError(f"folds must be >= 0, got {self.folds}")

    def to_lines(self) -> list[str]:
        return [f"{key} = {_render(value)}" for key, value in _flatten(self)]


def _render(value: Any) -> str:
    if isinstance(value, tuple):
        return ",".join(repr(item) if isinstance(item, float) else str(item) for item in value)
    if isinstance(value, FreezePolicy):
        return value.value
    if isinstance(value, float):
        return repr(value)
    return "" if value is None else str(value)


def _flatten(obj: Any, prefix: str = "") -> Iterable[tuple[str, Any]]:
    for item in dataclasses.fields(obj):
        value = getattr(obj, item.name)
        key = f"{prefix}{_public_name(item.name)}"
        if dataclasses.is_dataclass(value):
            yield from _flatten(value, f"{key}.")
        else:
            yield key, value


# "lambda" is a keyword, so the lambda fields are stored as ``lam``.
def _public_name(name: str) -> str:
    return "lambda" if name == "lam" else name


def _field_name(name: str) -> str:
    return "lam" if name == "lambda" else name


def _coerce(raw: str, hint: Any, key: str) -> Any:
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    try:
        if origin in (typing.Union, types.UnionType):
            if raw.strip() == "":
                return None
            inner = next(arg for arg in args if arg is not type(None))
            return _coerce(raw, inner, key)
        if origin is tuple:
            return _parse_float_tuple(raw) if args and args[0] is float else _parse_int_tuple(raw)
        if hint is bool:
            return _parse_bool(raw)
        if hint is int:
            return int(raw)
        if hint is float:
            return float(raw)
        if hint is Path:
            return Path(raw.strip())
        if hint is FreezePolicy:
            return FreezePolicy(raw.strip())
        return raw.strip()
    except (ValueError, StopIteration) as exc:
        raise ConfigError(f"invalid value for {key}: {raw!r}") from exc


def override(config: Any, overrides: dict[str, str], prefix: str = "") -> Any:
    """Return a copy of ``config`` with dotted ``overrides`` applied.

    Keys use the section prefixes of the config file format, for example
    ``csae.lambda`` or ``classifier.train.batch_size``. A bare ``train.*`` key
    is expanded onto every nested TrainConfig by the caller.
    """
    hints = typing.get_type_hints(type(config))
    changes: dict[str, Any] = {}
    nested: dict[str, dict[str, str]] = {}
    for key, raw in overrides.items():
        head, _, rest = key.partition(".")
        name = _field_name(head)
        if name not in hints:
            raise ConfigError(f"unknown config key: {prefix}{key}")
        if rest:
            nested.setdefault(name, {})[rest] = raw
        else:
            changes[name] = _coerce(raw, hints[name], f"{prefix}{key}")
    for name, sub in nested.items():
        current = getattr(config, name)
        if not dataclasses.is_dataclass(current):
            raise ConfigError(f"{prefix}{name} has no sub-keys")
        changes[name] = override(current, sub, f"{prefix}{_public_name(name)}.")
    return dataclasses.replace(config, **changes)


def parse_config_text(text: str) -> dict[str, str]:
    entries: dict[str, str] = {}
    for number, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {number}: expected 'key = value', got {line!r}")
        key, value = (part.strip() for part in stripped.split("=", 1))
        if not key:
            raise ConfigError(f"line {number}: empty key")
        entries[key] = value
    return entries


_TRAIN_SECTIONS = (
    "csae.train",
    "classifier.train",
    "fcae.train",
    "adaptation.finetune",
    "adaptation.phase1",
    "adaptation.phase2",
)


def build_run_config(
    overrides: dict[str, str] | None = None,
    base: RunConfig | None = None,
) -> RunConfig:
    """Apply ``key = value`` overrides (file entries, then CLI flags) to a RunConfig."""
    overrides = dict(overrides or {})
    expanded: dict[str, str] = {}
    for key, value in overrides.items():
        if key.startswith("train."):
            # shared training knobs; a section-specific key still wins
            for section in _TRAIN_SECTIONS:
                if section.startswith("adaptation.") and key == "train.learning_rate":
                    continue
                expanded.setdefault(f"{section}.{key[len('train.'):]}", value)
        else:
            expanded[key] = value
    for key, value in overrides.items():
        if not key.startswith("train."):
            expanded[key] = value
    normalized = {
        (key[len("run."):] if key.startswith("run.") else key): value
        for key, value in expanded.items()
    }
    return override(base or RUN, normalized)


def load_config_file(path: Path) -> dict[str, str]:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    return parse_config_text(text)


TRAIN = TrainConfig(
    learning_rate=float(_env("TRAIN_LEARNING_RATE", "1e-3")),
    batch_size=int(_env("TRAIN_BATCH_SIZE", "32")),
    max_epochs=int(_env("TRAIN_MAX_EPOCHS", "300")),
    early_stop_patience=int(_env("TRAIN_EARLY_STOP_PATIENCE", "20")),
    plateau_patience=int(_env("TRAIN_PLATEAU_PATIENCE", "8")),
    plateau_factor=float(_env("TRAIN_PLATEAU_FACTOR", "0.5")),
    min_lr=float(_env("TRAIN_MIN_LR", "1e-6")),
    seed=int(_env("RUN_SEED", "42")),
)

CSAE = CsaeConfig(
    filters=_parse_int_tuple(_env("CSAE_FILTERS", "16,32,8")),
    kernel_sizes=_parse_int_tuple(_env("CSAE_KERNEL_SIZES", "11,7,5")),
    strides=_parse_int_tuple(_env("CSAE_STRIDES", "4,5,1")),
    alpha=float(_env("CSAE_ALPHA", "0.1")),
    lam=float(_env("CSAE_LAMBDA", "1e-7")),
    train=TRAIN,
)

CLASSIFIER = ClassifierConfig(
    head_conv=_parse_int_tuple(_env("CLASSIFIER_HEAD_CONV", "32,5,2")),
    mlp_widths=_parse_int_tuple(_env("CLASSIFIER_MLP_WIDTHS", "64,32")),
    alpha=float(_env("CLASSIFIER_ALPHA", "0.1")),
    train=TRAIN,
)

ADAPTATION = AdaptationConfig(
    finetune=dataclasses.replace(
        TRAIN,
        learning_rate=float(_env("ADAPT_FINETUNE_LR", "1e-4")),
        min_lr=min(TRAIN.min_lr, 1e-7),
    ),
    phase1=TRAIN,
    phase2=dataclasses.replace(
        TRAIN,
        learning_rate=float(_env("ADAPT_PHASE2_LR", "1e-5")),
        min_lr=min(TRAIN.min_lr, 1e-8),
    ),
    calib_fraction=float(_env("ADAPT_CALIB_FRACTION", "1.0")),
)

FOREST = ForestConfig(
    num_trees=int(_env("FOREST_NUM_TREES", "100")),
    max_depth=int(_env("FOREST_MAX_DEPTH", "12")),
    seed=TRAIN.seed,
)

FCAE = FcaeConfig(
    hidden_widths=_parse_int_tuple(_env("FCAE_HIDDEN_WIDTHS", "512")),
    latent_width=int(_env("FCAE_LATENT_WIDTH", "128")),
    train=TRAIN,
)

RUN = RunConfig(
    seed=TRAIN.seed,
    output_dir=Path(_env("RUN_OUTPUT_DIR", "runs/latest")),
    csae=CSAE,
    classifier=CLASSIFIER,
    adaptation=ADAPTATION,
    forest=FOREST,
    fcae=FCAE,
)
