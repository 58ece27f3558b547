"""Experiment configuration: a TOML tree with one table per stage.

Unknown tables or keys are rejected so that a typo never silently falls back
to a default. ``config_hash`` covers everything except the output directory.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from importlib import resources
from pathlib import Path

try:  # Python >= 3.11
    import tomllib
except ModuleNotFoundError:  # pragma: no cover
    import tomli as tomllib

from ..errors import ConfigError


@dataclass
class DiffusionSection:
    T_steps: int = 20
    beta_start: float | None = None
    beta_end: float | None = None
    dataset: str = "gmm"
    n_data: int = 4096
    hidden: int = 64
    depth: int = 3
    emb_dim: int = 16
    activation: str = "silu"
    train_iters: int = 3000
    train_batch: int = 256
    train_lr: float = 3e-3


@dataclass
class CalibrationSection:
    n_per_timestep: int = 256
    interval: int = 2
    val_fraction: float = 0.05
    groups: int = 5


@dataclass
class QuantSection:
    bits: int = 4
    per_channel: bool = True
    symmetric: bool = True
    iters: int = 2000
    lam: float = 0.001
    lr: float = 0.01
    b_start: float = 20.0
    b_end: float = 2.0
    warmup: float = 0.2
    batch_size: int = 256
    act_bits: int = 0


@dataclass
class WeightingSection:
    tau: float = 1.0
    inner_lr: float = 1.0
    outer_lr: float = 1e4
    meta_iters: int = 100
    t_acc: int = 0          # 0: one pseudo-update per group
    batch: int = 64
    pseudo_lr: float = 0.0  # 0: same as inner_lr
    mode: str = "sgd"
    restrict_batch: bool = True
    max_step: float = 0.05  # cap on each committed score change; 0 disables
    update: str = "every_block"   # or "first_block"
    downstream: str = "fp"


@dataclass
class DiagnosticsSection:
    enabled: bool = True
    lemma_eta: float = 1e-6
    lemma_step: float = 0.1    # one-step-ahead move relative to |theta|
    lemma_train: int = 200
    lemma42_configs: int = 50
    pooling: str = "mean"
    buckets: int = 50


@dataclass
class RunSection:
    mode: str = "weighted"   # or "uniform"
    seed: int = 0
    out: str = "out"


SECTIONS = {
    "diffusion": DiffusionSection,
    "calibration": CalibrationSection,
    "quant": QuantSection,
    "weighting": WeightingSection,
    "diagnostics": DiagnosticsSection,
    "run": RunSection,
}


@dataclass
class ExperimentConfig:
    diffusion: DiffusionSection = field(default_factory=DiffusionSection)
    calibration: CalibrationSection = field(default_factory=CalibrationSection)
    quant: QuantSection = field(default_factory=QuantSection)
    weighting: WeightingSection = field(default_factory=WeightingSection)
    diagnostics: DiagnosticsSection = field(default_factory=DiagnosticsSection)
    run: RunSection = field(default_factory=RunSection)
    notes: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {name: asdict(getattr(self, name)) for name in SECTIONS}

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        unknown = set(d) - set(SECTIONS) - {"sweep", "notes"}
        if unknown:
            raise ConfigError(f"unknown config tables: {sorted(unknown)}")
        kw = {}
        for name, sec in SECTIONS.items():
            table = d.get(name, {})
            if not isinstance(table, dict):
                raise ConfigError(f"[{name}] must be a table")
            names = {f.name for f in fields(sec)}
            bad = set(table) - names
            if bad:
                raise ConfigError(f"unknown keys in [{name}]: {sorted(bad)}")
            kw[name] = sec(**_coerce(sec, table, name))
        cfg = cls(**kw, notes=list(d.get("notes", [])))
        validate(cfg)
        return cfg

    def replace(self, **overrides) -> "ExperimentConfig":
        """Copy with dotted-key overrides, e.g. ``replace(**{"run.seed": 3})``."""
        d = self.to_dict()
        for key, val in overrides.items():
            sec, _, name = key.partition(".")
            if sec not in d or name not in d[sec]:
                raise ConfigError(f"unknown config key {key!r}")
            d[sec][name] = val
        d["notes"] = list(self.notes)
        return ExperimentConfig.from_dict(d)

    @property
    def G(self) -> int:
        return self.calibration.groups

    @property
    def t_acc(self) -> int:
        return self.weighting.t_acc or self.calibration.groups

    def hash(self) -> str:
        return config_hash(self)


def _coerce(sec, table: dict, name: str) -> dict:
    out = {}
    defaults = sec()
    for key, val in table.items():
        ref = getattr(defaults, key)
        if isinstance(ref, bool):
            if not isinstance(val, bool):
                raise ConfigError(f"[{name}].{key} must be a boolean, got {val!r}")
        elif isinstance(ref, int) and not isinstance(ref, bool):
            if isinstance(val, bool) or not isinstance(val, int):
                raise ConfigError(f"[{name}].{key} must be an integer, got {val!r}")
        elif isinstance(ref, float) or ref is None:
            if val is not None and (isinstance(val, bool) or not isinstance(val, (int, float))):
                raise ConfigError(f"[{name}].{key} must be a number, got {val!r}")
            val = None if val is None else float(val)
        elif isinstance(ref, str) and not isinstance(val, str):
            raise ConfigError(f"[{name}].{key} must be a string, got {val!r}")
        out[key] = val
    return out


def validate(cfg: ExperimentConfig):
    d, c, q, w, g, r = (cfg.diffusion, cfg.calibration, cfg.quant, cfg.weighting,
                        cfg.diagnostics, cfg.run)
    problems = []
    if d.T_steps < 2:
        problems.append("diffusion.T_steps must be >= 2")
    if d.dataset not in ("gmm", "gmm2", "gmm8", "swiss_roll"):
        problems.append(f"unknown dataset {d.dataset!r}")
    if d.activation not in ("silu", "relu"):
        problems.append(f"unknown activation {d.activation!r}")
    if d.depth < 1 or d.hidden < 1 or d.n_data < 1 or d.train_iters < 0:
        problems.append("diffusion model/training sizes must be positive")
    if c.n_per_timestep < 1:
        problems.append("calibration.n_per_timestep must be >= 1")
    if c.interval < 1 or d.T_steps % c.interval:
        problems.append(f"calibration.interval {c.interval} must divide T_steps {d.T_steps}")
    n_collect = d.T_steps // c.interval if c.interval >= 1 else 0
    if not 0 < c.val_fraction < 1:
        problems.append("calibration.val_fraction must lie in (0, 1)")
    elif round(c.val_fraction * c.n_per_timestep) < 1:
        problems.append(f"val_fraction {c.val_fraction} leaves no validation samples at "
                        f"{c.n_per_timestep} samples per timestep")
    if not 1 <= c.groups <= max(n_collect, 1):
        problems.append(f"calibration.groups {c.groups} exceeds {n_collect} collection timesteps")
    if not 2 <= q.bits <= 16:
        problems.append("quant.bits must lie in [2, 16]")
    if q.iters < 0 or q.lam < 0 or q.lr <= 0 or q.batch_size < 1:
        problems.append("quant iters/lam must be >= 0, lr > 0, batch_size >= 1")
    if not 0 <= q.warmup < 1:
        problems.append("quant.warmup must lie in [0, 1)")
    if w.tau <= 0:
        problems.append("weighting.tau must be positive")
    if w.inner_lr <= 0 or w.outer_lr < 0 or w.pseudo_lr < 0 or w.max_step < 0:
        problems.append("weighting.inner_lr must be > 0, outer_lr, pseudo_lr and max_step >= 0")
    if w.meta_iters < 0 or w.batch < 1 or w.t_acc < 0:
        problems.append("weighting.meta_iters/t_acc must be >= 0 and batch >= 1")
    if w.mode not in ("sgd", "adam"):
        problems.append(f"unknown weighting.mode {w.mode!r}")
    if w.update not in ("every_block", "first_block"):
        problems.append(f"unknown weighting.update {w.update!r}")
    if w.downstream not in ("fp", "quant"):
        problems.append(f"unknown weighting.downstream {w.downstream!r}")
    if g.pooling not in ("mean", "samples"):
        problems.append(f"unknown diagnostics.pooling {g.pooling!r}")
    if g.lemma_eta <= 0 or g.lemma_step <= 0 or g.lemma_train < 2 or g.buckets < 1:
        problems.append("diagnostics lemma settings must be positive")
    if r.mode not in ("weighted", "uniform"):
        problems.append(f"unknown run.mode {r.mode!r}")
    if not 0 <= r.seed < 2 ** 64:
        problems.append("run.seed must be a u64")
    if problems:
        raise ConfigError("; ".join(problems))


def config_hash(cfg: ExperimentConfig) -> str:
    d = cfg.to_dict()
    d["run"] = {k: v for k, v in d["run"].items() if k != "out"}
    blob = json.dumps(d, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()


def section_hash(cfg: ExperimentConfig, *names, extra=None) -> str:
    d = {n: asdict(getattr(cfg, n)) for n in names}
    d["extra"] = extra
    return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()


def load_toml(path) -> dict:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    try:
        with open(p, "rb") as f:
            return tomllib.load(f)
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f"{p}: {e}") from None


def load_config(path) -> ExperimentConfig:
    return ExperimentConfig.from_dict(load_toml(path))


def preset_names() -> list:
    root = resources.files("diffq.pipeline") / "presets"
    return sorted(p.name[:-5] for p in root.iterdir() if p.name.endswith(".toml"))


def preset_path(name: str):
    p = resources.files("diffq.pipeline") / "presets" / f"{name}.toml"
    if not p.is_file():
        raise ConfigError(f"unknown preset {name!r}; available: {preset_names()}")
    return p


def load_preset(name: str) -> ExperimentConfig:
    with preset_path(name).open("rb") as f:
        return ExperimentConfig.from_dict(tomllib.load(f))


def resolve(path_or_preset) -> tuple[ExperimentConfig, dict]:
    """Load a config file, or a packaged preset by name. Returns the config
    and the raw tree (which may hold a [sweep] table)."""
    p = Path(str(path_or_preset))
    if p.suffix == ".toml" or p.exists():
        raw = load_toml(p)
    else:
        with preset_path(str(path_or_preset)).open("rb") as f:
            raw = tomllib.load(f)
    return ExperimentConfig.from_dict(raw), raw


def expand_sweep(cfg: ExperimentConfig, raw: dict) -> list:
    """Configs for a [sweep] table ``{key = "section.name", values = [...]}``."""
    sweep = raw.get("sweep")
    if not sweep:
        return [cfg]
    key, values = sweep.get("key"), sweep.get("values")
    if not isinstance(key, str) or not isinstance(values, list) or not values:
        raise ConfigError("[sweep] needs a dotted 'key' and a non-empty 'values' list")
    return [cfg.replace(**{key: v}) for v in values]


def parse_seeds(spec: str) -> list:
    """'1..20' (inclusive), '3', or '1,4,9'."""
    try:
        if ".." in spec:
            lo, hi = spec.split("..")
            lo, hi = int(lo), int(hi)
            if hi < lo:
                raise ValueError
            return list(range(lo, hi + 1))
        return [int(s) for s in spec.split(",") if s.strip()]
    except ValueError:
        raise ConfigError(f"bad seed list {spec!r}; use A..B or a comma list") from None


