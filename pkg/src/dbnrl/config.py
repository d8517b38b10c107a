"""Experiment configuration read from JSON.

Every section rejects unknown keys so that a misspelt setting fails loudly
instead of silently falling back to a default.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .errors import ConfigError
from .experiment import CASE_STUDY_BOX, CASE_STUDY_OPTIMIZER, FermentationScenario, GibbsConfig
from .kinetics import KineticParams
from .optimize import OptimizerConfig

SCENARIOS = ("fermentation", "integrated")


def _strict(cls, doc, where):
    if not isinstance(doc, dict):
        raise ConfigError(f"{where} must be a JSON object")
    known = {f.name for f in fields(cls)}
    unknown = set(doc) - known
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {sorted(unknown)}")
    try:
        return cls(**doc)
    except TypeError as exc:
        raise ConfigError(f"bad {where}: {exc}") from None


def _parse_kappa(value):
    if isinstance(value, str):
        if value.lower() in ("inf", "infinity"):
            return math.inf
        raise ConfigError(f"kappa must be a positive number or 'inf', got {value!r}")
    try:
        kappa = float(value)
    except (TypeError, ValueError):
        raise ConfigError(f"kappa must be a positive number or 'inf', got {value!r}") from None
    if not kappa > 0:
        raise ConfigError("kappa must be positive")
    return kappa


@dataclass(frozen=True)
class RewardConfig:
    feed_cost: float = 534.52
    titer_price: float = 1.29
    harvest_cost: float = 15.0
    m_c: float = -1000.0
    precipitation_cost: float = 0.05
    product_weight: float = 1.3
    impurity_weight: float = 1.0


@dataclass(frozen=True)
class PriorConfig:
    delta_beta: float = 1.0
    delta_mean: float = 1.0
    shape: float = 2.0
    scale: float = 1.0

    def __post_init__(self):
        if min(self.delta_beta, self.delta_mean, self.shape, self.scale) <= 0:
            raise ConfigError("prior hyperparameters must be positive")


@dataclass(frozen=True)
class PurificationConfig:
    zeta1_range: tuple = (40.0, 50.0)
    zeta2_range: tuple = (60.0, 80.0)
    practice_zeta: tuple = (45.0, 70.0)
    gain_bound: float = 0.5

    def __post_init__(self):
        for name in ("zeta1_range", "zeta2_range", "practice_zeta"):
            value = tuple(float(v) for v in getattr(self, name))
            if len(value) != 2:
                raise ConfigError(f"{name} needs two numbers")
            object.__setattr__(self, name, value)


@dataclass(frozen=True)
class BenchmarkConfig:
    horizons: tuple = (8, 15, 36)
    n: int = 5
    m: int = 1
    repeats: int = 5

    def __post_init__(self):
        object.__setattr__(self, "horizons", tuple(int(h) for h in self.horizons))
        if not self.horizons or min(self.horizons) < 2 or self.repeats < 1:
            raise ConfigError("benchmark needs horizons >= 2 and repeats >= 1")


@dataclass(frozen=True)
class ShapleyConfig:
    h: int = 15
    t: int = 35
    batch: int = 0
    output: str = "C"


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything needed to replay a run: scenario, data, sampler and optimiser."""

    scenario: str = "fermentation"
    R: int = 8
    kappa: float = 10.0
    seed: int = 0
    macro_reps: int = 30
    rollouts: int = 50
    epsilon: float = 0.3
    horizon_steps: int = 36
    kinetics_file: str | None = None
    gibbs: GibbsConfig = field(default_factory=GibbsConfig)
    optimizer: OptimizerConfig = CASE_STUDY_OPTIMIZER
    reward: RewardConfig = field(default_factory=RewardConfig)
    prior: PriorConfig = field(default_factory=PriorConfig)
    box: dict = field(default_factory=lambda: dict(CASE_STUDY_BOX))
    purification: PurificationConfig = field(default_factory=PurificationConfig)
    benchmark: BenchmarkConfig = field(default_factory=BenchmarkConfig)
    shapley: ShapleyConfig = field(default_factory=ShapleyConfig)

    def __post_init__(self):
        if self.scenario not in SCENARIOS:
            raise ConfigError(f"scenario must be one of {SCENARIOS}, got {self.scenario!r}")
        object.__setattr__(self, "kappa", _parse_kappa(self.kappa))
        if self.R < 1 or self.macro_reps < 1 or self.rollouts < 1:
            raise ConfigError("R, macro_reps and rollouts must be positive")
        if not 0 <= self.seed < 2**64:
            raise ConfigError("seed must be an unsigned 64-bit integer")
        box = {}
        for name, bounds in self.box.items():
            lo, hi = (float(b) for b in bounds)
            if lo > hi:
                raise ConfigError(f"box for {name} has lower > upper")
            box[name] = (lo, hi)
        object.__setattr__(self, "box", box)
        if self.kinetics_file is not None and not Path(self.kinetics_file).is_file():
            raise ConfigError(f"kinetics_file {self.kinetics_file!r} does not exist")

    # -- construction ----------------------------------------------------------

    @classmethod
    def from_dict(cls, doc):
        if not isinstance(doc, dict):
            raise ConfigError("configuration must be a JSON object")
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"unknown configuration keys: {sorted(unknown)}")
        doc = dict(doc)
        sections = {"gibbs": GibbsConfig, "reward": RewardConfig, "prior": PriorConfig,
                    "purification": PurificationConfig, "benchmark": BenchmarkConfig,
                    "shapley": ShapleyConfig}
        for key, sub in sections.items():
            if key in doc:
                doc[key] = _strict(sub, doc[key], key)
        if "optimizer" in doc:
            merged = {**CASE_STUDY_OPTIMIZER.to_dict(), **doc["optimizer"]}
            doc["optimizer"] = OptimizerConfig.from_dict(merged)
        return _strict(cls, doc, "configuration")

    @classmethod
    def from_json(cls, path):
        path = Path(path)
        text = path.read_text(encoding="utf-8")
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
        if isinstance(doc, dict) and doc.get("kinetics_file"):
            # relative references are resolved against the configuration file
            doc["kinetics_file"] = str(path.parent / doc["kinetics_file"])
        return cls.from_dict(doc)

    def to_dict(self):
        doc = asdict(self)
        doc["box"] = {k: list(v) for k, v in self.box.items()}
        doc["kappa"] = "inf" if math.isinf(self.kappa) else self.kappa
        return doc

    def digest(self):
        """Short hash identifying the configuration in manifests."""
        text = json.dumps(self.to_dict(), sort_keys=True)
        return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]

    def with_seed(self, seed):
        doc = self.to_dict()
        doc["seed"] = seed
        return ExperimentConfig.from_dict(doc)

    # -- scenario objects ----------------------------------------------------

    def fermentation_scenario(self):
        r, p = self.reward, self.prior
        try:
            params = KineticParams() if self.kinetics_file is None else (
                KineticParams.from_file(self.kinetics_file))
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        return FermentationScenario(
            kappa=self.kappa, horizon_steps=self.horizon_steps, epsilon=self.epsilon,
            feed_cost=r.feed_cost, titer_price=r.titer_price, harvest_cost=r.harvest_cost,
            m_c=r.m_c, box=dict(self.box), prior_delta_beta=p.delta_beta,
            prior_delta_mean=p.delta_mean, prior_shape=p.shape, prior_scale=p.scale,
            params=params)

    def scenario_object(self):
        if self.scenario == "fermentation":
            return self.fermentation_scenario()
        from .integrated import IntegratedScenario

        r, q = self.reward, self.purification
        return IntegratedScenario(
            fermentation=self.fermentation_scenario(), zeta1_range=q.zeta1_range,
            zeta2_range=q.zeta2_range, practice_zeta=q.practice_zeta,
            precipitation_cost=r.precipitation_cost, harvest_cost=r.harvest_cost,
            product_weight=r.product_weight, impurity_weight=r.impurity_weight,
            purification_gain=q.gain_bound, m_c=r.m_c)
