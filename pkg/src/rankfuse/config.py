"""Experiment configuration: YAML schema, validation, and stable digests.

A config file fully determines an experiment together with a seed. The
sha256 digest of the canonically serialized config is recorded in every
snapshot so evaluation can refuse mismatched artifacts.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, replace

import yaml

from .data import STYLE_PRESETS, PairPolicy, StyleParams
from .errors import ConfigurationError

SCHEMA_ID = "rankfuse/v1"

_DIVERGENCES = ("skl", "kl", "js")
_LAMBDA_VARIANTS = ("literal", "incloud")
_RKD_NORMS = ("cubic", "quadratic")
_FORGETTING_MODES = ("printed", "from_t")
_TOGGLE_NAMES = ("pr", "rkd", "dkd", "buffer", "fusion")


@dataclass(frozen=True)
class EncoderConfig:
    hidden: int = 24
    dim: int = 32
    normalize: bool = True
    points_per_scan: int = 48


@dataclass(frozen=True)
class LossConfig:
    margin: float = 0.2
    rank_temp: float = 0.1
    dist_temp: float = 1.0
    divergence: str = "skl"
    rkd_norm: str = "cubic"
    lambda_variant: str = "literal"
    pr: bool = True
    rkd: bool = True
    dkd: bool = True


@dataclass(frozen=True)
class PlanConfig:
    epochs: int = 60
    batch_start: int = 16
    batch_cap: int = 256
    expansion_rate: float = 1.4
    active_threshold: float = 0.7
    lr: float = 1e-4
    lr_drop_epoch: int = 30
    lr_drop_factor: float = 0.1
    weight_decay: float = 1e-3


@dataclass(frozen=True)
class BufferConfig:
    capacity: int = 256
    fraction: float = 0.25
    enabled: bool = True


@dataclass(frozen=True)
class DomainConfig:
    name: str
    seed: int
    train_places: int = 400
    test_places: int = 200
    trajectory_length: float = 900.0
    style: str | StyleParams = "plains"

    def style_params(self) -> StyleParams:
        if isinstance(self.style, StyleParams):
            return self.style
        if self.style not in STYLE_PRESETS:
            raise ConfigurationError(
                f"domains[{self.name}].style: unknown preset {self.style!r}"
            )
        return STYLE_PRESETS[self.style]


@dataclass(frozen=True)
class ExperimentConfig:
    schema: str = SCHEMA_ID
    seeds: tuple = (0,)
    out_dir: str = "runs/out"
    fusion: bool = True
    forgetting_max: str = "printed"
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    pairs: PairPolicy = field(default_factory=PairPolicy)
    loss: LossConfig = field(default_factory=LossConfig)
    plan: PlanConfig = field(default_factory=PlanConfig)
    buffer: BufferConfig = field(default_factory=BufferConfig)
    domains: tuple = ()


def _require(cond: bool, path: str, msg: str):
    if not cond:
        raise ConfigurationError(f"{path}: {msg}")


def _build(cls, raw: dict, path: str):
    if not isinstance(raw, dict):
        raise ConfigurationError(f"{path}: expected a mapping, got {type(raw).__name__}")
    known = {f for f in cls.__dataclass_fields__}
    for key in raw:
        if key not in known:
            raise ConfigurationError(f"{path}.{key}: unknown field")
    try:
        return cls(**raw)
    except TypeError as exc:
        raise ConfigurationError(f"{path}: {exc}") from exc


def from_dict(raw: dict) -> ExperimentConfig:
    """Validate a parsed mapping into an ExperimentConfig.

    Raises ConfigurationError naming the offending field path.
    """
    if not isinstance(raw, dict):
        raise ConfigurationError(f"config root: expected a mapping, got {type(raw).__name__}")
    raw = dict(raw)
    schema = raw.pop("schema", None)
    _require(schema == SCHEMA_ID, "schema", f"expected {SCHEMA_ID!r}, got {schema!r}")

    known_top = {f for f in ExperimentConfig.__dataclass_fields__}
    for key in raw:
        if key not in known_top:
            raise ConfigurationError(f"{key}: unknown field")

    enc = _build(EncoderConfig, raw.get("encoder", {}), "encoder")
    _require(enc.hidden >= 1, "encoder.hidden", f"must be >= 1, got {enc.hidden}")
    _require(enc.dim >= 2, "encoder.dim", f"must be >= 2, got {enc.dim}")
    _require(
        enc.points_per_scan >= 1,
        "encoder.points_per_scan",
        f"must be >= 1, got {enc.points_per_scan}",
    )

    pairs_raw = raw.get("pairs", {})
    pairs = _build(PairPolicy, pairs_raw, "pairs")

    loss = _build(LossConfig, raw.get("loss", {}), "loss")
    _require(loss.margin >= 0, "loss.margin", f"must be >= 0, got {loss.margin}")
    _require(loss.rank_temp > 0, "loss.rank_temp", f"must be > 0, got {loss.rank_temp}")
    _require(loss.dist_temp > 0, "loss.dist_temp", f"must be > 0, got {loss.dist_temp}")
    _require(
        loss.divergence in _DIVERGENCES,
        "loss.divergence",
        f"must be one of {_DIVERGENCES}, got {loss.divergence!r}",
    )
    _require(
        loss.rkd_norm in _RKD_NORMS,
        "loss.rkd_norm",
        f"must be one of {_RKD_NORMS}, got {loss.rkd_norm!r}",
    )
    _require(
        loss.lambda_variant in _LAMBDA_VARIANTS,
        "loss.lambda_variant",
        f"must be one of {_LAMBDA_VARIANTS}, got {loss.lambda_variant!r}",
    )
    _require(loss.pr or loss.rkd or loss.dkd, "loss", "all loss terms toggled off")

    plan = _build(PlanConfig, raw.get("plan", {}), "plan")
    _require(plan.epochs >= 1, "plan.epochs", f"must be >= 1, got {plan.epochs}")
    _require(
        plan.batch_start <= plan.batch_cap,
        "plan.batch_start",
        f"start {plan.batch_start} exceeds cap {plan.batch_cap}",
    )
    _require(plan.batch_start >= 2, "plan.batch_start", f"must be >= 2, got {plan.batch_start}")
    _require(
        plan.expansion_rate > 1,
        "plan.expansion_rate",
        f"must be > 1, got {plan.expansion_rate}",
    )
    _require(plan.lr > 0, "plan.lr", f"must be > 0, got {plan.lr}")
    _require(plan.weight_decay >= 0, "plan.weight_decay", f"must be >= 0, got {plan.weight_decay}")
    _require(
        0.0 <= plan.active_threshold <= 1.0,
        "plan.active_threshold",
        f"must be in [0, 1], got {plan.active_threshold}",
    )

    buf = _build(BufferConfig, raw.get("buffer", {}), "buffer")
    _require(buf.capacity >= 1, "buffer.capacity", f"must be >= 1, got {buf.capacity}")
    _require(
        0.0 < buf.fraction < 1.0,
        "buffer.fraction",
        f"must be in (0, 1), got {buf.fraction}",
    )

    seeds = raw.get("seeds", [0])
    _require(
        isinstance(seeds, (list, tuple)) and len(seeds) > 0,
        "seeds",
        "must be a non-empty list of integers",
    )
    for i, s in enumerate(seeds):
        _require(isinstance(s, int), f"seeds[{i}]", f"must be an integer, got {s!r}")

    fusion = raw.get("fusion", True)
    _require(isinstance(fusion, bool), "fusion", f"must be a boolean, got {fusion!r}")
    fmode = raw.get("forgetting_max", "printed")
    _require(
        fmode in _FORGETTING_MODES,
        "forgetting_max",
        f"must be one of {_FORGETTING_MODES}, got {fmode!r}",
    )

    domains_raw = raw.get("domains", [])
    _require(isinstance(domains_raw, list), "domains", "must be a list")
    domains = []
    names = set()
    for i, d in enumerate(domains_raw):
        if isinstance(d, dict) and isinstance(d.get("style"), dict):
            d = dict(d)
            d["style"] = _build(StyleParams, d["style"], f"domains[{i}].style")
        dom = _build(DomainConfig, d, f"domains[{i}]")
        _require(dom.train_places >= 2, f"domains[{i}].train_places", "must be >= 2")
        _require(dom.test_places >= 2, f"domains[{i}].test_places", "must be >= 2")
        _require(dom.name not in names, f"domains[{i}].name", f"duplicate name {dom.name!r}")
        names.add(dom.name)
        dom.style_params()  # validates preset names
        domains.append(dom)

    return ExperimentConfig(
        schema=SCHEMA_ID,
        seeds=tuple(seeds),
        out_dir=str(raw.get("out_dir", "runs/out")),
        fusion=fusion,
        forgetting_max=fmode,
        encoder=enc,
        pairs=pairs,
        loss=loss,
        plan=plan,
        buffer=buf,
        domains=tuple(domains),
    )


def load_config(path: str) -> ExperimentConfig:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            raw = yaml.safe_load(fh)
    except FileNotFoundError:
        raise ConfigurationError(f"config file not found: {path}")
    except yaml.YAMLError as exc:
        raise ConfigurationError(f"config file {path}: {exc}")
    return from_dict(raw if raw is not None else {})


def apply_overrides(
    cfg: ExperimentConfig,
    seed: int | None = None,
    out: str | None = None,
    toggles: dict | None = None,
    lambda_variant: str | None = None,
    divergence: str | None = None,
    fusion: bool | None = None,
) -> ExperimentConfig:
    """Apply command-line overrides, re-validating the result."""
    loss = cfg.loss
    buf = cfg.buffer
    fus = cfg.fusion
    for name, value in (toggles or {}).items():
        if name not in _TOGGLE_NAMES:
            raise ConfigurationError(f"--toggle: unknown term {name!r}, expected {_TOGGLE_NAMES}")
        if name == "buffer":
            buf = replace(buf, enabled=value)
        elif name == "fusion":
            fus = value
        else:
            loss = replace(loss, **{name: value})
    if lambda_variant is not None:
        if lambda_variant not in _LAMBDA_VARIANTS:
            raise ConfigurationError(f"--lambda-variant: must be one of {_LAMBDA_VARIANTS}")
        loss = replace(loss, lambda_variant=lambda_variant)
    if divergence is not None:
        if divergence not in _DIVERGENCES:
            raise ConfigurationError(f"--divergence: must be one of {_DIVERGENCES}")
        loss = replace(loss, divergence=divergence)
    if fusion is not None:
        fus = fusion
    if not (loss.pr or loss.rkd or loss.dkd):
        raise ConfigurationError("loss: all loss terms toggled off")
    out_cfg = replace(
        cfg,
        loss=loss,
        buffer=buf,
        fusion=fus,
        seeds=(seed,) if seed is not None else cfg.seeds,
        out_dir=out if out is not None else cfg.out_dir,
    )
    return out_cfg


def canonical_dict(cfg: ExperimentConfig) -> dict:
    return asdict(cfg)


def config_digest(cfg: ExperimentConfig) -> str:
    """sha256 over the canonical JSON form; stable across dict ordering.

    out_dir is excluded: it decides where artifacts land, not what the
    experiment computes, and results must not change when it does.
    """
    d = canonical_dict(cfg)
    d.pop("out_dir")
    blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def parse_toggle_args(items) -> dict:
    """Parse `name=on|off` strings (flat or nested lists) into {name: bool}."""
    flat = []
    for item in items or ():
        flat.extend(item) if isinstance(item, (list, tuple)) else flat.append(item)
    out = {}
    for item in flat:
        if "=" not in item:
            raise ConfigurationError(f"--toggle: expected name=on|off, got {item!r}")
        name, _, value = item.partition("=")
        if value not in ("on", "off"):
            raise ConfigurationError(f"--toggle {name}: expected on|off, got {value!r}")
        out[name.strip()] = value == "on"
    return out
