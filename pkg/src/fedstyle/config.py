"""Experiment configuration: dataclasses, the text config format, presets.

The config format is line-oriented ``key = value`` under bracketed sections,
diff-friendly and strict: unknown sections or keys are rejected with the
offending line number. ``render_config`` emits a fully resolved file that
parses back to an equal config.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace

from .errors import ConfigError


@dataclass
class EncoderConfig:
    input_dim: int = 16
    hidden_dim: int = 64
    feature_dim: int = 32
    activation: str = "tanh"


@dataclass
class OptimizerConfig:
    base_lr: float = 1e-3
    weight_decay: float = 5e-4
    momentum: float = 0.9
    milestones: tuple = (20, 40)
    gamma: float = 0.1


@dataclass
class LossSettings:
    temperature: float = 0.05
    triplet_margin: float = 0.3
    label_smoothing: float = 0.0


@dataclass
class MemoryConfig:
    momentum: float = 0.2
    policy: str = "renormalize"
    warmup_rounds: int = 1
    normalize_before_mean: bool = True


@dataclass
class TransformConfig:
    mix_alpha: float = 0.5
    degrade_prob: float = 0.1
    degrade_sigma: float = 6.0
    forced_degrade_rounds: tuple = ()


@dataclass
class DataConfig:
    num_sources: int = 3
    identities_per_domain: int = 20
    samples_per_identity: int = 10
    noise_sigma: float = 0.25
    informative_dims: int = 8
    scale_spread: float = 0.25
    nuisance_scale: float = 2.5
    shift_spread: float = 1.0


@dataclass
class BatchConfig:
    num_identities: int = 16
    instances: int = 4

    @property
    def size(self) -> int:
        return self.num_identities * self.instances


@dataclass
class AblationConfig:
    new_style: bool = True
    memory: bool = True
    screening: bool = True


@dataclass
class EvalConfig:
    plan: str = "leave_one_out"
    query_fraction: float = 0.5
    val_fraction: float = 0.2
    max_rank: int = 10


@dataclass
class ExperimentConfig:
    seed: int = 0
    rounds: int = 60
    out_dir: str = "runs/exp"
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    loss: LossSettings = field(default_factory=LossSettings)
    memory: MemoryConfig = field(default_factory=MemoryConfig)
    transform: TransformConfig = field(default_factory=TransformConfig)
    data: DataConfig = field(default_factory=DataConfig)
    batch: BatchConfig = field(default_factory=BatchConfig)
    ablation: AblationConfig = field(default_factory=AblationConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def validate(self) -> "ExperimentConfig":
        if self.seed < 0:
            raise ConfigError("seed must be non-negative")
        if self.rounds < 0:
            raise ConfigError("rounds must be non-negative")
        if self.batch.num_identities < 2 or self.batch.instances < 2:
            raise ConfigError("batch needs >= 2 identities with >= 2 instances")
        if self.data.num_sources < 1:
            raise ConfigError("need at least one source domain")
        if self.eval.plan == "reduced_sources" and self.data.num_sources < 2:
            raise ConfigError("reduced_sources needs >= 2 configured sources")
        if self.data.identities_per_domain < 2:
            raise ConfigError("identities_per_domain must be >= 2")
        if not (1 <= self.data.informative_dims <= self.encoder.input_dim):
            raise ConfigError("informative_dims must lie in [1, input_dim]")
        if not (0.0 <= self.eval.val_fraction < 1.0):
            raise ConfigError("val_fraction must lie in [0, 1)")
        if not (0.0 < self.eval.query_fraction < 1.0):
            raise ConfigError("query_fraction must lie in (0, 1)")
        n = self.data.samples_per_identity
        if val_samples_per_identity(self) + self.batch.instances > n:
            raise ConfigError(
                "samples_per_identity too small for the validation holdout "
                "plus PK sampling"
            )
        if self.memory.warmup_rounds < 0:
            raise ConfigError("warmup_rounds must be non-negative")
        if any(r < 1 for r in self.transform.forced_degrade_rounds):
            raise ConfigError("forced_degrade_rounds are 1-based round indices")
        return self


def val_samples_per_identity(cfg: ExperimentConfig) -> int:
    """Held-out screening samples per identity (>= 2 so each identity can
    contribute a query and a gallery item)."""
    if cfg.eval.val_fraction == 0:
        return 0
    return max(2, int(round(cfg.eval.val_fraction * cfg.data.samples_per_identity)))


ABLATION_PRESETS = {
    "baseline": AblationConfig(new_style=False, memory=False, screening=False),
    "nsa": AblationConfig(new_style=True, memory=False, screening=False),
    "pscu": AblationConfig(new_style=False, memory=True, screening=True),
    "full": AblationConfig(new_style=True, memory=True, screening=True),
}


def apply_preset(cfg: ExperimentConfig, name: str) -> ExperimentConfig:
    if name not in ABLATION_PRESETS:
        raise ConfigError(f"unknown ablation preset {name!r}, "
                          f"expected one of {sorted(ABLATION_PRESETS)}")
    return replace(cfg, ablation=replace(ABLATION_PRESETS[name]))


_SECTIONS = {
    "experiment": None,  # scalar fields on ExperimentConfig itself
    "encoder": "encoder",
    "optimizer": "optimizer",
    "loss": "loss",
    "memory": "memory",
    "transform": "transform",
    "data": "data",
    "batch": "batch",
    "ablation": "ablation",
    "eval": "eval",
}

_TOP_LEVEL_KEYS = ("seed", "rounds", "out_dir")


def _convert(raw: str, default, where: str):
    kind = type(default)
    raw = raw.strip()
    try:
        if kind is bool:
            low = raw.lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise ValueError(raw)
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        if kind is tuple:
            if not raw:
                return ()
            return tuple(int(part) for part in raw.split(","))
        return raw
    except ValueError:
        raise ConfigError(f"{where}: cannot parse {raw!r} as {kind.__name__}") from None


def parse_config_text(text: str, source: str = "<config>") -> ExperimentConfig:
    cfg = ExperimentConfig()
    section = None
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        where = f"{source}:{lineno}"
        if stripped.startswith("[") and stripped.endswith("]"):
            name = stripped[1:-1].strip()
            if name not in _SECTIONS:
                raise ConfigError(f"{where}: unknown section [{name}]")
            section = name
            continue
        if "=" not in stripped:
            raise ConfigError(f"{where}: expected 'key = value', got {stripped!r}")
        if section is None:
            raise ConfigError(f"{where}: key outside any [section]")
        key, raw = (part.strip() for part in stripped.split("=", 1))
        if section == "experiment":
            if key not in _TOP_LEVEL_KEYS:
                raise ConfigError(f"{where}: unknown key {key!r} in [experiment]")
            setattr(cfg, key, _convert(raw, getattr(cfg, key), where))
            continue
        sub = getattr(cfg, _SECTIONS[section])
        valid = {f.name for f in fields(sub)}
        if key not in valid:
            raise ConfigError(f"{where}: unknown key {key!r} in [{section}]")
        setattr(sub, key, _convert(raw, getattr(sub, key), where))
    return cfg.validate()


def parse_config(path) -> ExperimentConfig:
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config_text(text, source=str(path))


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ", ".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def render_config(cfg: ExperimentConfig) -> str:
    """Fully resolved config text; parsing it back yields an equal config."""
    lines = ["[experiment]"]
    for key in _TOP_LEVEL_KEYS:
        lines.append(f"{key} = {_format_value(getattr(cfg, key))}")
    for section, attr in _SECTIONS.items():
        if attr is None:
            continue
        sub = getattr(cfg, attr)
        lines.append("")
        lines.append(f"[{section}]")
        for f in fields(sub):
            lines.append(f"{f.name} = {_format_value(getattr(sub, f.name))}")
    return "\n".join(lines) + "\n"
