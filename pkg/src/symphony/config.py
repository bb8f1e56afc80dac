"""Variant presets and run configuration."""
from __future__ import annotations

import configparser
import logging
import math
from dataclasses import asdict, dataclass, field, fields, replace

from .math_core import ScheduleKind
from .optim import GOLDEN

log = logging.getLogger(__name__)

MIN_RECOMMENDED_BUFFER = 7680 * 50


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class VariantConfig:
    name: str = "s3"
    noise_scale: float = 1.0 / math.e
    noise_clip: float = math.e
    n_exp: int = 10_240
    repeats: int = 50
    h_dim: int = 512
    n_out: int = 128
    batch_size: int = 384
    lr: float = 1e-4
    grad_dropout_p: float = 0.0
    buffer_schedule: str = ScheduleKind.BUFFER.value
    target_schedule: str = ScheduleKind.TARGET_CRITIC.value
    half_precision: bool = False
    gamma: float = 0.99
    tau: float = 0.005
    alpha: float = GOLDEN
    updates_per_step: int = 3
    weight_decay: float = 0.01
    resample_per_update: bool = True
    sqrt_divisor: bool = True  # the literal m / (v + eps) form does not learn at desk scale
    done_decay: bool = False
    fixed_beta: float | None = None
    eval_sigma_one: bool = False
    net_dtype: str = "float32"

    @property
    def n_rb(self) -> int:
        return self.n_exp * self.repeats

    def validate(self) -> "VariantConfig":
        if self.batch_size != 3 * self.n_out:
            raise ConfigError(f"batch size {self.batch_size} must equal 3 * n_out = {3 * self.n_out}")
        for name in ("n_exp", "repeats", "h_dim", "n_out", "batch_size", "updates_per_step"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.batch_size > self.n_rb:
            raise ConfigError("batch size exceeds replay capacity")
        if not 0.0 <= self.grad_dropout_p <= 1.0:
            raise ConfigError("grad_dropout_p must be in [0, 1]")
        if not 0.0 < self.tau <= 1.0:
            raise ConfigError("tau must be in (0, 1]")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if self.fixed_beta is not None and not 1e-3 <= self.fixed_beta <= 1 - 1e-3:
            raise ConfigError("fixed_beta must be within [1e-3, 1 - 1e-3]")
        if self.net_dtype not in ("float32", "float64"):
            raise ConfigError("net_dtype must be float32 or float64")
        for kind in (self.buffer_schedule, self.target_schedule):
            try:
                ScheduleKind(kind)
            except ValueError:
                raise ConfigError(f"unknown schedule kind {kind!r}") from None
        if self.n_rb < MIN_RECOMMENDED_BUFFER:
            log.warning("replay capacity %d is below the recommended %d", self.n_rb,
                        MIN_RECOMMENDED_BUFFER)
        return self


S3 = VariantConfig()
VARIANTS: dict[str, VariantConfig] = {
    "s3": S3,
    "se": replace(S3, name="se", noise_scale=1.0 / math.pi, noise_clip=math.pi),
    "s2": replace(S3, name="s2", n_exp=20_480, repeats=25, lr=0.5e-4, grad_dropout_p=0.5),
    "ed": replace(S3, name="ed", n_exp=7_680, h_dim=384, n_out=96, batch_size=288,
                  half_precision=True),
}
VARIANTS["s2t"] = replace(
    VARIANTS["s2"], name="s2t", grad_dropout_p=0.8,
    buffer_schedule=ScheduleKind.BUFFER_DIMPLED.value,
    target_schedule=ScheduleKind.TARGET_CRITIC_DIMPLED.value,
)
VARIANT_IDS = {name: i for i, name in enumerate(("s3", "se", "s2", "ed", "s2t"))}


def desk_scale(v: VariantConfig, n_exp: int = 1024, n_out: int = 32) -> VariantConfig:
    """Shrink a variant for desk runs, keeping ``h_dim = 4 n_out`` and ``B = 3 n_out``."""
    return replace(v, n_exp=n_exp, n_out=n_out, h_dim=4 * n_out, batch_size=3 * n_out)


@dataclass
class RunConfig:
    variant: VariantConfig = field(default_factory=lambda: S3)
    env: str = "pendulum"
    seed: int = 0
    steps: int = 50_000
    out_dir: str = "runs/default"
    env_params: dict = field(default_factory=dict)
    eval_every: int = 5_000
    eval_episodes: int = 25
    checkpoint_every: int = 10_000

    def to_text(self) -> str:
        """Flat ``key = value`` text with one section per module."""
        cp = configparser.ConfigParser()
        cp["run"] = {k: str(getattr(self, k)) for k in
                     ("env", "seed", "steps", "out_dir", "eval_every", "eval_episodes",
                      "checkpoint_every")}
        cp["variant"] = {k: str(v) for k, v in asdict(self.variant).items()}
        cp["env"] = {k: str(v) for k, v in sorted(self.env_params.items())}
        lines = []
        for section in cp.sections():
            lines.append(f"[{section}]")
            lines.extend(f"{k} = {v}" for k, v in cp[section].items())
            lines.append("")
        return "\n".join(lines)


def _coerce(kind, raw: str):
    if kind in (bool, "bool"):
        low = raw.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"not a boolean: {raw!r}")
    if raw.strip().lower() == "none":
        return None
    if kind in (int, "int"):
        return int(float(raw))
    if kind in (float, "float", "float | None"):
        return float(raw)
    return raw.strip()


def apply_variant_overrides(v: VariantConfig, overrides: dict) -> VariantConfig:
    types = {f.name: f.type for f in fields(VariantConfig)}
    clean = {}
    for k, raw in overrides.items():
        if k not in types:
            raise ConfigError(f"unknown variant key {k!r}")
        clean[k] = _coerce(types[k], raw) if isinstance(raw, str) else raw
    return replace(v, **clean)


def load_config_file(path: str) -> dict[str, dict[str, str]]:
    cp = configparser.ConfigParser()
    with open(path) as fh:
        cp.read_file(fh)
    return {s: dict(cp[s]) for s in cp.sections()}


def build_run_config(variant: str = "s3", file_values: dict | None = None,
                     flag_values: dict | None = None) -> RunConfig:
    """Variant defaults, then the config file, then CLI flags."""
    if variant not in VARIANTS:
        raise ConfigError(f"unknown variant {variant!r}; choose from {sorted(VARIANTS)}")
    file_values = file_values or {}
    flag_values = flag_values or {}
    v = VARIANTS[variant]
    v = apply_variant_overrides(v, file_values.get("variant", {}))
    v = apply_variant_overrides(v, flag_values.get("variant", {}))
    run = RunConfig(variant=v)
    run_types = {"env": str, "seed": int, "steps": int, "out_dir": str, "eval_every": int,
                 "eval_episodes": int, "checkpoint_every": int}
    for src in (file_values.get("run", {}), flag_values.get("run", {})):
        for k, raw in src.items():
            if k not in run_types:
                raise ConfigError(f"unknown run key {k!r}")
            setattr(run, k, _coerce(run_types[k], raw) if isinstance(raw, str) else raw)
    env_params = dict(file_values.get("env", {}))
    env_params.update(flag_values.get("env", {}))
    run.env_params = env_params
    run.variant.validate()
    return run
