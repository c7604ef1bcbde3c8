"""Monte Carlo experiment runner.

A trial samples a population, applies a defense, anonymizes, attacks and
scores. Every random stream of trial ``i`` is derived from
``(seed, i, role)`` so results never depend on execution order or thread
count. Different sweep cells reuse the same trial seeds, which makes
cells directly comparable on identical populations.
"""

from __future__ import annotations

import dataclasses
import enum
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Optional, Sequence, Union

import numpy as np
from statsmodels.stats.proportion import proportion_confint

from . import adversary, model, ppm
from .model import AssociationStructure, GenerationMode, ModelKind, TransitionGraph, UserProfile

__all__ = [
    "Defense",
    "MSpec",
    "NoiseSpec",
    "ExperimentConfig",
    "TrialResult",
    "SweepRow",
    "SweepTable",
    "ConfigError",
    "derive_rng",
    "build_structure",
    "run_trial",
    "run_trials",
    "sweep",
    "classify_region",
    "TRIAL_FIELDS",
]


class ConfigError(ValueError):
    pass


class Defense(str, enum.Enum):
    NONE = "none"
    INDEPENDENT_OBFUSCATION = "independent_obfuscation"
    DECORRELATION = "decorrelation"
    FULL_PIPELINE = "full_pipeline"


# stream roles
_PROFILES, _STRUCTURE, _TRACES, _DEFENSE, _PERMUTATION = range(5)


def derive_rng(seed: int, *keys: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in keys)))


def _reject_unknown(cls, data: dict, where: str):
    known = {f.name for f in dataclasses.fields(cls)}
    extra = set(data) - known
    if extra:
        raise ConfigError(f"unknown key(s) in {where}: {sorted(extra)}")


@dataclass(frozen=True)
class MSpec:
    """Samples per user: absolute ``value``, ``c * n^power``, or ``c * n^(2/(s*dof) + alpha)``."""

    value: Optional[int] = None
    c: float = 1.0
    power: Optional[float] = None
    alpha: Optional[float] = None

    def __post_init__(self):
        set_ = sum(x is not None for x in (self.value, self.power, self.alpha))
        if set_ != 1:
            raise ConfigError("m spec needs exactly one of value, power, alpha")

    def resolve(self, n: int, s: int, dof: int) -> int:
        if self.value is not None:
            m = int(self.value)
        elif self.power is not None:
            m = math.ceil(self.c * n**self.power)
        else:
            m = math.ceil(self.c * n ** (2.0 / (s * dof) + self.alpha))
        if m < 2:
            raise ConfigError(f"m spec resolves to m={m} < 2")
        return m

    @classmethod
    def coerce(cls, data) -> "MSpec":
        if isinstance(data, MSpec):
            return data
        if isinstance(data, (int, np.integer)):
            return cls(value=int(data))
        if not isinstance(data, dict):
            raise ConfigError(f"invalid m spec: {data!r}")
        _reject_unknown(cls, data, "m spec")
        return cls(**data)

    def to_dict(self) -> dict:
        return {k: v for k, v in dataclasses.asdict(self).items() if v is not None and not (k == "c" and v == 1.0)}


@dataclass(frozen=True)
class NoiseSpec:
    """Noise level: absolute ``a_n`` or ``c * n^-(1/(s*dof) + beta)``."""

    a_n: Optional[float] = None
    c: float = 1.0
    beta: Optional[float] = None

    def __post_init__(self):
        if (self.a_n is None) == (self.beta is None):
            raise ConfigError("noise spec needs exactly one of a_n, beta")

    def resolve(self, n: int, s: int, dof: int) -> float:
        a = self.a_n if self.a_n is not None else self.c * n ** -(1.0 / (s * dof) + self.beta)
        if not 0.0 <= a <= 1.0:
            raise ConfigError(f"noise spec resolves to a_n={a} outside [0,1]")
        return float(a)

    @classmethod
    def coerce(cls, data) -> "NoiseSpec":
        if isinstance(data, NoiseSpec):
            return data
        if isinstance(data, (int, float)):
            return cls(a_n=float(data))
        if not isinstance(data, dict):
            raise ConfigError(f"invalid noise spec: {data!r}")
        _reject_unknown(cls, data, "noise spec")
        return cls(**data)

    def to_dict(self) -> dict:
        return {k: v for k, v in dataclasses.asdict(self).items() if v is not None and not (k == "c" and v == 1.0)}


@dataclass(frozen=True)
class ExperimentConfig:
    """One experiment cell plus optional sweep grid.

    ``group_fractions`` gives the fraction of users in groups of size 1, 2
    and 3; users are laid out largest groups first, so user 0 belongs to
    the first maximal-size group and is the attacked user. ``rho`` is a
    fixed value or a ``[lo, hi]`` range; for two-state pairs it is capped at
    the feasible maximum of the pair.
    """

    model: ModelKind = ModelKind.TWO_STATE
    n: int = 200
    r: int = 2
    markov_edges: Optional[tuple[tuple[int, int], ...]] = None
    group_fractions: tuple[float, float, float] = (0.0, 1.0, 0.0)
    rho: Union[float, tuple[float, float]] = 0.5
    generation_mode: Optional[GenerationMode] = None
    p_range: Optional[tuple[float, float]] = None
    margin: float = 0.05
    m: MSpec = MSpec(alpha=0.3)
    noise: Optional[NoiseSpec] = None
    defense: Defense = Defense.NONE
    trials: int = 100
    seed: int = 0
    alpha: float = 0.3
    beta: float = 0.2
    threshold_exponent: float = 0.45
    matching_mode: adversary.MatchingMode = adversary.MatchingMode.GREEDY_NEAREST
    grid_m: Optional[tuple[MSpec, ...]] = None
    grid_noise: Optional[tuple[Optional[NoiseSpec], ...]] = None

    def __post_init__(self):
        try:
            object.__setattr__(self, "model", ModelKind(self.model))
            object.__setattr__(self, "defense", Defense(self.defense))
            object.__setattr__(self, "matching_mode", adversary.MatchingMode(self.matching_mode))
            if self.generation_mode is not None:
                object.__setattr__(self, "generation_mode", GenerationMode(self.generation_mode))
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        object.__setattr__(self, "m", MSpec.coerce(self.m))
        if self.noise is not None:
            object.__setattr__(self, "noise", NoiseSpec.coerce(self.noise))
        if self.grid_m is not None:
            object.__setattr__(self, "grid_m", tuple(MSpec.coerce(x) for x in self.grid_m))
        if self.grid_noise is not None:
            object.__setattr__(
                self, "grid_noise", tuple(None if x is None else NoiseSpec.coerce(x) for x in self.grid_noise)
            )
        object.__setattr__(self, "group_fractions", tuple(float(f) for f in self.group_fractions))
        if isinstance(self.rho, (list, tuple)):
            object.__setattr__(self, "rho", tuple(float(x) for x in self.rho))
        if self.p_range is not None:
            object.__setattr__(self, "p_range", tuple(float(x) for x in self.p_range))
        if self.markov_edges is not None:
            object.__setattr__(self, "markov_edges", tuple(tuple(int(v) for v in e) for e in self.markov_edges))
        self.validate()

    def validate(self):
        if self.trials < 1:
            raise ConfigError("trials must be >= 1")
        if self.n < 1:
            raise ConfigError("n must be >= 1")
        if len(self.group_fractions) != 3 or any(f < 0 for f in self.group_fractions):
            raise ConfigError("group_fractions must be three non-negative numbers")
        if abs(sum(self.group_fractions) - 1.0) > 1e-9:
            raise ConfigError("group_fractions must sum to 1")
        rho = self.rho if isinstance(self.rho, tuple) else (self.rho, self.rho)
        if len(rho) != 2 or not (0 < rho[0] <= rho[1] <= 1):
            raise ConfigError(f"rho must be in (0,1] (or a range inside it), got {self.rho}")
        if self.model is ModelKind.TWO_STATE and self.r != 2:
            raise ConfigError("two-state model requires r=2")
        if self.defense in (Defense.DECORRELATION, Defense.FULL_PIPELINE) and self.model is not ModelKind.TWO_STATE:
            raise ConfigError(f"defense {self.defense.value} is defined for the two-state model only")
        if self.defense is Defense.INDEPENDENT_OBFUSCATION and self.noise is None and self.grid_noise is None:
            raise ConfigError("independent obfuscation needs a noise spec")
        if self.grid_m is not None and not self.grid_m:
            raise ConfigError("grid_m must not be empty")
        if self.grid_noise is not None and not self.grid_noise:
            raise ConfigError("grid_noise must not be empty")
        try:
            adversary.AttackParams(n=self.n, s=1, alpha=self.alpha, beta=self.beta, threshold_exponent=self.threshold_exponent)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        # resolve once to catch invalid exponent forms early
        s, dof = self.attacked_group_size, self.dof
        for ms in self.grid_m or (self.m,):
            ms.resolve(self.n, s, dof)
        for ns in self.grid_noise or (self.noise,):
            if ns is not None:
                ns.resolve(self.n, s, dof)

    # -- derived quantities ------------------------------------------------

    @property
    def transition_graph(self) -> Optional[TransitionGraph]:
        if self.model is not ModelKind.MARKOV:
            return None
        if self.markov_edges is None:
            return TransitionGraph.complete(self.r)
        return TransitionGraph(self.r, self.markov_edges)

    @property
    def dof(self) -> int:
        if self.model is ModelKind.TWO_STATE:
            return 1
        if self.model is ModelKind.R_STATE:
            return self.r - 1
        return self.transition_graph.dof

    def group_counts(self) -> tuple[int, int, int]:
        f1, f2, f3 = self.group_fractions
        n3 = int(f3 * self.n / 3 + 1e-9)
        n2 = int(f2 * self.n / 2 + 1e-9)
        n2 = min(n2, (self.n - 3 * n3) // 2)
        return self.n - 3 * n3 - 2 * n2, n2, n3

    @property
    def attacked_group_size(self) -> int:
        n1, n2, n3 = self.group_counts()
        return 3 if n3 else 2 if n2 else 1

    def resolved_mode(self) -> GenerationMode:
        if self.generation_mode is not None:
            return self.generation_mode
        if self.model is ModelKind.MARKOV:
            return GenerationMode.COUPLED_MARKOV
        if self.model is ModelKind.TWO_STATE and self.attacked_group_size <= 2:
            return GenerationMode.PAIRWISE_EXACT
        return GenerationMode.LATENT_FACTOR

    def with_(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)

    # -- serialization -----------------------------------------------------

    def to_dict(self) -> dict:
        out: dict[str, Any] = {}
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if isinstance(v, enum.Enum):
                v = v.value
            elif isinstance(v, (MSpec, NoiseSpec)):
                v = v.to_dict()
            elif f.name in ("grid_m", "grid_noise") and v is not None:
                v = [None if x is None else x.to_dict() for x in v]
            elif isinstance(v, tuple):
                v = [list(x) if isinstance(x, tuple) else x for x in v]
            out[f.name] = v
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        if not isinstance(data, dict):
            raise ConfigError("config must be a JSON object")
        _reject_unknown(cls, data, "config")
        try:
            return cls(**data)
        except ConfigError:
            raise
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc


# ---------------------------------------------------------------------------


TRIAL_FIELDS = (
    "seed",
    "graph_edges_true",
    "graph_edges_found",
    "graph_edges_correct",
    "group_identified",
    "members_identified",
    "attacked_user_success",
    "per_sample_error_rate",
    "empirical_A_m",
)


@dataclass(frozen=True)
class TrialResult:
    seed: int
    graph_edges_true: int
    graph_edges_found: int
    graph_edges_correct: int
    group_identified: bool
    members_identified: int
    attacked_user_success: bool
    per_sample_error_rate: float
    empirical_A_m: float
    # not serialized to trials.csv
    group_size: int = field(default=1, compare=True)

    def row(self) -> list:
        return [getattr(self, k) for k in TRIAL_FIELDS]


def build_structure(
    config: ExperimentConfig, profiles: Sequence[UserProfile], rng: np.random.Generator
) -> AssociationStructure:
    n1, n2, n3 = config.group_counts()
    mode = config.resolved_mode()
    groups, edges = [], []
    u = 0

    def draw_rho():
        if isinstance(config.rho, tuple):
            return float(rng.uniform(*config.rho))
        return float(config.rho)

    for _ in range(n3):
        g = (u, u + 1, u + 2)
        lam = draw_rho()
        edges.extend((a, b, lam) for a, b in ((u, u + 1), (u, u + 2), (u + 1, u + 2)))
        groups.append(g)
        u += 3
    for _ in range(n2):
        rho = draw_rho()
        if mode is GenerationMode.PAIRWISE_EXACT:
            rho = min(rho, model.feasible_rho_max(profiles[u].p, profiles[u + 1].p))
        edges.append((u, u + 1, rho))
        groups.append((u, u + 1))
        u += 2
    groups.extend((v,) for v in range(u, config.n))
    return AssociationStructure(config.n, tuple(groups), tuple(edges), mode)


def _cell_values(config: ExperimentConfig, m_spec: MSpec, noise_spec: Optional[NoiseSpec]) -> tuple[int, float]:
    s, dof = config.attacked_group_size, config.dof
    m = m_spec.resolve(config.n, s, dof)
    if noise_spec is not None:
        a_n = noise_spec.resolve(config.n, s, dof)
    elif config.defense is Defense.FULL_PIPELINE:
        a_n = ppm.default_second_stage_noise(config.n)
    else:
        a_n = 0.0
    return m, a_n


def run_trial(
    config: ExperimentConfig,
    trial_index: int,
    m_spec: Optional[MSpec] = None,
    noise_spec: Optional[NoiseSpec] = None,
) -> TrialResult:
    """One seeded trial; identical arguments give identical results."""
    m_spec = m_spec or config.m
    noise_spec = noise_spec if noise_spec is not None else config.noise
    m, a_n = _cell_values(config, m_spec, noise_spec)
    seed = config.seed
    trial_seed = int(np.random.SeedSequence(seed, spawn_key=(trial_index,)).generate_state(1, np.uint32)[0])
    graph = config.transition_graph
    profiles = model.sample_profiles(
        config.n,
        config.model,
        derive_rng(seed, trial_index, _PROFILES),
        r=config.r,
        graph=graph,
        margin=config.margin,
        p_range=config.p_range,
    )
    assoc = build_structure(config, profiles, derive_rng(seed, trial_index, _STRUCTURE))
    X = model.generate_traces(profiles, assoc, m, derive_rng(seed, trial_index, _TRACES))

    rng_def = derive_rng(seed, trial_index, _DEFENSE)
    rng_perm = derive_rng(seed, trial_index, _PERMUTATION)
    defense = config.defense
    if defense is Defense.NONE:
        Z = X
    elif defense is Defense.INDEPENDENT_OBFUSCATION:
        Z = ppm.obfuscate(X, ppm.draw_noise(config.n, a_n, rng_def), rng_def)
    elif defense is Defense.DECORRELATION:
        Z = ppm.apply_decorrelation(X, assoc, ppm.plan_structure(profiles, assoc), rng_def)
    else:
        out = ppm.perfect_privacy_pipeline(X, profiles, assoc, a_n, rng_def)
        Z, Y, perm = out.Z, out.Y, out.permutation
    if defense is not Defense.FULL_PIPELINE:
        perm = ppm.sample_permutation(config.n, rng_perm)
        Y = ppm.anonymize(Z, perm)

    s = config.attacked_group_size
    params = adversary.AttackParams(
        n=config.n,
        s=s,
        alpha=config.alpha,
        beta=config.beta,
        dof=config.dof,
        threshold_exponent=config.threshold_exponent,
        matching_mode=config.matching_mode,
    )
    attacked = 0
    report = adversary.full_attack(Y, profiles, assoc, params, attacked_user=attacked, X=X, permutation=perm)

    true_edges = assoc.effective_edges()
    inv = perm.inverse
    correct = sum(1 for a, b in report.graph.edges if (min(inv[a], inv[b]), max(inv[a], inv[b])) in true_edges)
    members = sum(report.success.values())
    A_m = float(np.count_nonzero(Z.values != X.values)) / (X.m * X.n)
    return TrialResult(
        seed=trial_seed,
        graph_edges_true=len(true_edges),
        graph_edges_found=len(report.graph.edges),
        graph_edges_correct=int(correct),
        group_identified=bool(report.group_identified),
        members_identified=int(members),
        attacked_user_success=bool(report.success[attacked]),
        per_sample_error_rate=report.error_rate(attacked),
        empirical_A_m=A_m,
        group_size=s,
    )


def run_trials(
    config: ExperimentConfig,
    m_spec: Optional[MSpec] = None,
    noise_spec: Optional[NoiseSpec] = None,
    threads: int = 1,
    trials: Optional[int] = None,
) -> list[TrialResult]:
    count = trials or config.trials
    if threads <= 1:
        return [run_trial(config, i, m_spec, noise_spec) for i in range(count)]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(lambda i: run_trial(config, i, m_spec, noise_spec), range(count)))


# ---------------------------------------------------------------------------
# aggregation


RATE_FIELDS = (
    "attacked_user_success",
    "group_identified",
    "member_rate",
    "edge_detection_rate",
    "per_sample_error_rate",
    "empirical_A_m",
)


def _wilson(mean: float, count: int) -> tuple[float, float]:
    # accepts fractional successes, so it also bounds means of [0,1]-valued rates
    lo, hi = proportion_confint(mean * count, count, alpha=0.05, method="wilson")
    return float(min(lo, mean)), float(max(hi, mean))


@dataclass(frozen=True)
class SweepRow:
    n: int
    s: int
    m: int
    a_n: float
    defense: str
    trials: int
    means: dict[str, float]
    intervals: dict[str, tuple[float, float]]

    def header(self) -> list[str]:
        cols = ["n", "s", "m", "a_n", "defense", "trials"]
        for k in RATE_FIELDS:
            cols += [k, f"{k}_lo", f"{k}_hi"]
        return cols

    def values(self) -> list:
        out: list = [self.n, self.s, self.m, self.a_n, self.defense, self.trials]
        for k in RATE_FIELDS:
            out += [self.means[k], *self.intervals[k]]
        return out

    @property
    def success_rate(self) -> float:
        return self.means["attacked_user_success"]


@dataclass(frozen=True)
class SweepTable:
    rows: tuple[SweepRow, ...]
    m_values: tuple[int, ...]
    a_values: tuple[float, ...]

    def __len__(self):
        return len(self.rows)

    def row(self, i_m: int, i_a: int) -> SweepRow:
        return self.rows[i_m * len(self.a_values) + i_a]


def aggregate(results: Sequence[TrialResult], n: int, m: int, a_n: float, defense: str) -> SweepRow:
    k = len(results)
    if k == 0:
        raise ValueError("no trials to aggregate")
    s = results[0].group_size
    true_edges = sum(r.graph_edges_true for r in results)
    means = {
        "attacked_user_success": float(np.mean([r.attacked_user_success for r in results])),
        "group_identified": float(np.mean([r.group_identified for r in results])),
        "member_rate": float(np.mean([r.members_identified / s for r in results])),
        "edge_detection_rate": (sum(r.graph_edges_correct for r in results) / true_edges) if true_edges else 0.0,
        "per_sample_error_rate": float(np.mean([r.per_sample_error_rate for r in results])),
        "empirical_A_m": float(np.mean([r.empirical_A_m for r in results])),
    }
    intervals = {key: _wilson(v, k) for key, v in means.items()}
    return SweepRow(n, s, m, a_n, defense, k, means, intervals)


def sweep(
    config: ExperimentConfig,
    grid_m: Optional[Sequence] = None,
    grid_noise: Optional[Sequence] = None,
    threads: int = 1,
) -> SweepTable:
    """Run ``config.trials`` trials for every ``(m, a_n)`` cell, m-major order."""
    ms = [MSpec.coerce(x) for x in (grid_m if grid_m is not None else config.grid_m or (config.m,))]
    ns = [None if x is None else NoiseSpec.coerce(x) for x in (grid_noise if grid_noise is not None else config.grid_noise or (config.noise,))]
    if not ms or not ns:
        raise ConfigError("sweep grid must not be empty")
    rows = []
    m_vals, a_vals = [], []
    for i, ms_ in enumerate(ms):
        for j, ns_ in enumerate(ns):
            m, a_n = _cell_values(config, ms_, ns_)
            if i == 0:
                a_vals.append(a_n)
            if j == 0:
                m_vals.append(m)
            results = run_trials(config, ms_, ns_, threads=threads)
            rows.append(aggregate(results, config.n, m, a_n, config.defense.value))
    return SweepTable(tuple(rows), tuple(m_vals), tuple(a_vals))


@dataclass(frozen=True)
class RegionResult:
    labels: tuple[str, ...]
    boundary: tuple[int, ...]


NO_PRIVACY = "no-privacy"
PROTECTED = "protected"


def classify_region(table: SweepTable, threshold: float = 0.5) -> RegionResult:
    """Label each cell and list cells adjacent (in the grid) to a differently labelled cell.

    The cutoff maps finite-sample success rates onto the asymptotic
    no-privacy / protected dichotomy and is a convention.
    """
    if not table.rows:
        raise ValueError("empty table")
    labels = tuple(NO_PRIVACY if r.success_rate >= threshold else PROTECTED for r in table.rows)
    n_m, n_a = len(table.m_values), len(table.a_values)
    boundary = []
    for i in range(n_m):
        for j in range(n_a):
            here = labels[i * n_a + j]
            neighbours = [(i + di, j + dj) for di, dj in ((-1, 0), (1, 0), (0, -1), (0, 1))]
            if any(0 <= x < n_m and 0 <= y < n_a and labels[x * n_a + y] != here for x, y in neighbours):
                boundary.append(i * n_a + j)
    return RegionResult(labels, tuple(boundary))
