"""JSON run configuration shared by the command-line commands.

Every section is optional; missing keys take their defaults and unknown keys
are rejected before any computation starts.  :func:`effective_config`
returns the fully populated dictionary that is echoed into output files.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

from .basis import BasisSpec
from .dataset import CsvSchema, PreprocessConfig
from .estimator import EstimatorConfig
from .exceptions import ConfigError, MadmlError
from .penalty import PenaltyConfig
from .simulation import DgpConfig
from .solver import SolverConfig


@dataclass
class DataSection:
    path: Optional[str] = None
    outcome: str = "y"
    treatment: str = "d"
    conditioning: str = "x"
    controls: Optional[list] = None
    include_conditioning: bool = True
    delimiter: str = ","


@dataclass
class InferenceSection:
    eta: float = 0.05
    grid_size: int = 100
    grid: Optional[list] = None
    n_boot: int = 10_000


@dataclass
class SimulationSection:
    dgp: str = "S1"
    n: int = 500
    d_z: int = 100
    reps: int = 200
    sparsity: Optional[int] = None
    gamma_scale: Optional[float] = None
    intercept: Optional[float] = None
    target_prob: float = 0.5


@dataclass
class RunConfig:
    data: DataSection = field(default_factory=DataSection)
    preprocess: dict = field(default_factory=dict)
    basis: dict = field(default_factory=dict)
    solver: dict = field(default_factory=dict)
    penalty: dict = field(default_factory=dict)
    inference: InferenceSection = field(default_factory=InferenceSection)
    simulation: SimulationSection = field(default_factory=SimulationSection)
    seed: int = 0
    single_arm: bool = False

    # typed views ---------------------------------------------------------

    def preprocess_config(self) -> PreprocessConfig:
        return _build(PreprocessConfig, self.preprocess, "preprocess")

    def basis_spec(self) -> BasisSpec:
        return _build(BasisSpec, self.basis, "basis")

    def solver_config(self) -> SolverConfig:
        return _build(SolverConfig, self.solver, "solver")

    def penalty_config(self) -> PenaltyConfig:
        return _build(PenaltyConfig, self.penalty, "penalty")

    def estimator_config(self, style: str = "model_assisted") -> EstimatorConfig:
        pre = self.preprocess_config()
        inf = self.inference
        try:
            return EstimatorConfig(
                basis=self.basis_spec(),
                penalty=self.penalty_config(),
                solver=self.solver_config(),
                style=style,
                eta=inf.eta,
                n_boot_uniform=inf.n_boot,
                grid_size=inf.grid_size,
                grid=None if inf.grid is None else tuple(inf.grid),
                propensity_clip=pre.propensity_clip,
                outcome_clip_frac=pre.outcome_clip_frac,
            )
        except MadmlError as exc:
            raise ConfigError(str(exc)) from exc

    def schema(self, available=None) -> CsvSchema:
        d = self.data
        controls = d.controls
        if controls is None:
            if available is None:
                raise ConfigError("data.controls not given")
            roles = {d.outcome, d.treatment, d.conditioning}
            controls = [c for c in available if c not in roles]
        return CsvSchema(d.outcome, d.treatment, d.conditioning, controls, d.include_conditioning)

    def dgp_config(self) -> DgpConfig:
        s = self.simulation
        try:
            return DgpConfig(dgp=s.dgp, n=s.n, d_z=s.d_z, sparsity=s.sparsity, intercept=s.intercept,
                             gamma_scale=s.gamma_scale, target_prob=s.target_prob)
        except MadmlError as exc:
            raise ConfigError(str(exc)) from exc


_SECTION_TYPES = {
    "preprocess": PreprocessConfig,
    "basis": BasisSpec,
    "solver": SolverConfig,
    "penalty": PenaltyConfig,
}
_TYPED_SECTIONS = {"data": DataSection, "inference": InferenceSection, "simulation": SimulationSection}
_TOP_KEYS = {f.name for f in fields(RunConfig)}


def _check_keys(section: str, given: dict, cls) -> None:
    if not isinstance(given, dict):
        raise ConfigError(f"config section {section!r} must be an object")
    allowed = {f.name for f in fields(cls)}
    unknown = sorted(set(given) - allowed)
    if unknown:
        raise ConfigError(f"unknown key(s) in {section!r}: {', '.join(unknown)}")


def _tupleize(v):
    return tuple(_tupleize(x) for x in v) if isinstance(v, list) else v


def _build(cls, values: dict, section: str):
    try:
        return cls(**{k: _tupleize(v) for k, v in values.items()})
    except MadmlError as exc:
        raise ConfigError(f"{section}: {exc}") from exc
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{section}: {exc}") from exc


def from_dict(raw: dict) -> RunConfig:
    """Validate ``raw`` and return a :class:`RunConfig`."""
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    unknown = sorted(set(raw) - _TOP_KEYS)
    if unknown:
        raise ConfigError(f"unknown top-level config key(s): {', '.join(unknown)}")
    kw = {}
    for name, cls in _TYPED_SECTIONS.items():
        if name in raw:
            _check_keys(name, raw[name], cls)
            kw[name] = cls(**raw[name])
    for name, cls in _SECTION_TYPES.items():
        if name in raw:
            _check_keys(name, raw[name], cls)
            kw[name] = dict(raw[name])
    for name in ("seed", "single_arm"):
        if name in raw:
            kw[name] = raw[name]
    cfg = RunConfig(**kw)
    if not isinstance(cfg.seed, int) or isinstance(cfg.seed, bool) or not 0 <= cfg.seed < 2**64:
        raise ConfigError("seed must be an integer in [0, 2^64)")
    # validate typed views eagerly so bad values fail before any computation
    cfg.estimator_config()
    cfg.preprocess_config()
    return cfg


def load_config(path) -> RunConfig:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    try:
        raw = json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {p} is not valid JSON: {exc}") from exc
    return from_dict(raw)


def effective_config(cfg: RunConfig) -> dict:
    """All settings with defaults filled in; feeding this back through
    :func:`from_dict` reproduces the run."""
    out = {
        "data": asdict(cfg.data),
        "preprocess": _plain(asdict(cfg.preprocess_config())),
        "basis": cfg.basis_spec().to_dict(),
        "solver": _plain(asdict(cfg.solver_config())),
        "penalty": _plain(asdict(cfg.penalty_config())),
        "inference": asdict(cfg.inference),
        "simulation": asdict(cfg.simulation),
        "seed": cfg.seed,
        "single_arm": cfg.single_arm,
    }
    return out


def _plain(v):
    if isinstance(v, dict):
        return {k: _plain(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_plain(x) for x in v]
    return v
