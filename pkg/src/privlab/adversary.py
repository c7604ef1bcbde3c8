"""Statistical-matching adversary.

The attack runs in three stages on the anonymized (possibly obfuscated)
observations ``Y``:

1. rebuild the association graph by thresholding empirical covariances;
2. among connected components of the attacked group's size, pick the one
   whose estimated profiles are closest (bottleneck distance) to the
   attacked group's known profiles;
3. match pseudonyms to users inside that component.

The adversary is deterministic; all randomness lives upstream.
"""

from __future__ import annotations

import enum
import itertools
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import networkx as nx
import numpy as np

from .model import AssociationStructure, ModelKind, TraceMatrix, TransitionGraph, UserProfile

__all__ = [
    "MatchingMode",
    "AttackParams",
    "ReconstructedGraph",
    "EstimatedProfile",
    "AttackReport",
    "AmbiguousMatch",
    "empirical_cov",
    "covariance_matrix",
    "reconstruct_graph",
    "estimate_profile",
    "bottleneck_distance",
    "identify_group",
    "identify_members",
    "full_attack",
]

MAX_ENUMERATION = 8


class MatchingMode(str, enum.Enum):
    STRICT_THRESHOLD = "strict_threshold"
    GREEDY_NEAREST = "greedy_nearest"


class AmbiguousMatch(Exception):
    """The threshold rule found no candidate or more than one."""


@dataclass(frozen=True)
class AttackParams:
    n: int
    s: int
    alpha: float = 0.3
    beta: float = 0.2
    dof: int = 1
    threshold_exponent: float = 0.2
    matching_mode: MatchingMode = MatchingMode.GREEDY_NEAREST

    def __post_init__(self):
        if self.alpha <= 0 or self.beta <= 0 or self.threshold_exponent <= 0:
            raise ValueError("exponents must be positive")
        if self.dof < 1 or self.s < 1 or self.n < 1:
            raise ValueError("n, s and dof must be >= 1")
        object.__setattr__(self, "matching_mode", MatchingMode(self.matching_mode))

    @property
    def T_n(self) -> float:
        """Group-matching threshold ``n^-(1/(s*dof) + alpha/4)``."""
        return self.n ** -(1.0 / (self.s * self.dof) + self.alpha / 4.0)

    @property
    def Delta_n(self) -> float:
        return self.T_n

    def cov_threshold(self, m: int) -> float:
        return m ** -self.threshold_exponent


@dataclass(frozen=True)
class ReconstructedGraph:
    n: int
    edges: frozenset[tuple[int, int]]

    def components(self) -> list[tuple[int, ...]]:
        g = nx.Graph()
        g.add_nodes_from(range(self.n))
        g.add_edges_from(self.edges)
        comps = [tuple(sorted(c)) for c in nx.connected_components(g)]
        return sorted(comps)

    def has_edge(self, a: int, b: int) -> bool:
        return (min(a, b), max(a, b)) in self.edges


@dataclass(frozen=True, eq=False)
class EstimatedProfile:
    """Estimated free parameters; NaN marks coordinates of unvisited states."""

    kind: ModelKind
    values: np.ndarray
    visits: Optional[np.ndarray] = None

    @property
    def unvisited(self) -> list[int]:
        if self.visits is None:
            return []
        return [int(i) for i in np.flatnonzero(self.visits == 0)]


@dataclass
class AttackReport:
    graph: ReconstructedGraph
    candidate_groups: list[tuple[int, ...]]
    group_index: Optional[int]
    assignment: dict[int, int]
    success: dict[int, bool]
    X_estimate: Optional[np.ndarray]
    sample_errors: dict[int, int]
    m: int
    failure: Optional[str] = None
    extras: dict = field(default_factory=dict)

    @property
    def group_identified(self) -> bool:
        return self.group_index is not None and self.extras.get("group_correct", False)

    def error_rate(self, u: int) -> float:
        return self.sample_errors[u] / self.m if self.m else 0.0


# ---------------------------------------------------------------------------
# graph reconstruction


def empirical_cov(Y: TraceMatrix, u: int, v: int) -> float:
    """Plug-in covariance ``(m*M_uv - M_u*M_v) / m^2`` of two columns.

    For ``r > 2`` the statistic is computed for each pair of indicators of
    symbols ``1..r-1`` and the one with the largest magnitude is returned.
    """
    if Y.m == 0:
        raise ValueError("empty trace")
    if u == v:
        raise ValueError("covariance of a column with itself is not an association statistic")
    m = Y.m
    if Y.r == 2:
        a = Y.values[:, u].astype(np.int64)
        b = Y.values[:, v].astype(np.int64)
        return (m * int(a @ b) - int(a.sum()) * int(b.sum())) / m**2
    best = 0.0
    for i in range(1, Y.r):
        a = (Y.values[:, u] == i).astype(np.int64)
        for l in range(1, Y.r):
            b = (Y.values[:, v] == l).astype(np.int64)
            c = (m * int(a @ b) - int(a.sum()) * int(b.sum())) / m**2
            if abs(c) > abs(best):
                best = c
    return best


def covariance_matrix(Y: TraceMatrix) -> np.ndarray:
    """All-pairs version of :func:`empirical_cov` (diagonal set to 0)."""
    m, n, r = Y.m, Y.n, Y.r
    if m == 0:
        raise ValueError("empty trace")
    ind = np.stack([(Y.values == i) for i in range(1, r)], axis=2).reshape(m, n * (r - 1)).astype(np.float64)
    mean = ind.mean(axis=0)
    cov = ind.T @ ind / m - np.outer(mean, mean)
    if r > 2:
        cov = cov.reshape(n, r - 1, n, r - 1)
        flat = cov.transpose(0, 2, 1, 3).reshape(n, n, -1)
        idx = np.abs(flat).argmax(axis=2)
        cov = np.take_along_axis(flat, idx[..., None], axis=2)[..., 0]
    np.fill_diagonal(cov, 0.0)
    return cov


def reconstruct_graph(Y: TraceMatrix, params: AttackParams) -> ReconstructedGraph:
    """Edge ``(u, v)`` iff ``|cov| > m^-threshold_exponent``."""
    if Y.n < 2:
        return ReconstructedGraph(Y.n, frozenset())
    if Y.m < 2:
        raise ValueError("need at least 2 samples")
    cov = covariance_matrix(Y)
    hits = np.argwhere(np.triu(np.abs(cov) > params.cov_threshold(Y.m), k=1))
    return ReconstructedGraph(Y.n, frozenset((int(a), int(b)) for a, b in hits))


# ---------------------------------------------------------------------------
# profile estimation


def estimate_profile(
    Yu: np.ndarray,
    kind: ModelKind,
    r: int = 2,
    graph: Optional[TransitionGraph] = None,
) -> EstimatedProfile:
    """Empirical counterpart of a user's free parameters."""
    Yu = np.asarray(Yu)
    kind = ModelKind(kind)
    m = len(Yu)
    if m < 1:
        raise ValueError("empty column")
    if kind is ModelKind.TWO_STATE:
        return EstimatedProfile(kind, np.array([Yu.sum() / m]))
    if kind is ModelKind.R_STATE:
        counts = np.bincount(Yu.astype(np.int64), minlength=r)
        return EstimatedProfile(kind, counts[1:] / m)
    if graph is None:
        raise ValueError("Markov estimation requires the transition graph")
    src = Yu[:-1].astype(np.int64)
    dst = Yu[1:].astype(np.int64)
    visits = np.bincount(src, minlength=graph.r)
    trans = np.zeros((graph.r, graph.r))
    np.add.at(trans, (src, dst), 1)
    values = np.array(
        [trans[i, l] / visits[i] if visits[i] > 0 else np.nan for i, l in graph.free_edges]
    )
    return EstimatedProfile(kind, values, visits)


def _estimates_matrix(Y: TraceMatrix, kind: ModelKind, graph: Optional[TransitionGraph]) -> np.ndarray:
    """Estimated free parameters of every pseudonym, shape ``(n, dof)``."""
    kind = ModelKind(kind)
    vals = Y.values
    m = Y.m
    if kind is ModelKind.TWO_STATE:
        return (vals.sum(axis=0) / m)[:, None].astype(float)
    if kind is ModelKind.R_STATE:
        return np.stack([(vals == i).sum(axis=0) / m for i in range(1, Y.r)], axis=1)
    return np.stack([estimate_profile(vals[:, u], kind, Y.r, graph).values for u in range(Y.n)])


# ---------------------------------------------------------------------------
# matching


def _pair_distance(phi: np.ndarray, psi: np.ndarray) -> float:
    """L-infinity distance ignoring NaN (unvisited) coordinates."""
    d = np.abs(np.asarray(phi, dtype=float) - np.asarray(psi, dtype=float))
    d = d[~np.isnan(d)]
    return float(d.max()) if d.size else 0.0


def bottleneck_distance(Phi: Sequence, Psi: Sequence) -> tuple[float, tuple[int, ...]]:
    """``min_sigma max_u ||Phi_u - Psi_sigma(u)||_inf`` by exhaustive enumeration.

    Returns the distance and the minimising ``sigma`` (``sigma[u]`` is the
    index into ``Psi`` matched to ``Phi[u]``); ties go to the
    lexicographically smallest ``sigma``.
    """
    s = len(Phi)
    if len(Psi) != s:
        raise ValueError("Phi and Psi must have the same length")
    if s > MAX_ENUMERATION:
        raise ValueError(f"exhaustive matching limited to s <= {MAX_ENUMERATION}")
    if s == 0:
        return 0.0, ()
    cost = np.array([[_pair_distance(a, b) for b in Psi] for a in Phi])
    best, best_sigma = math.inf, None
    for sigma in itertools.permutations(range(s)):
        val = max(cost[u, sigma[u]] for u in range(s))
        if val < best:
            best, best_sigma = val, sigma
    return float(best), tuple(best_sigma)


def identify_group(
    known_group_profiles: Sequence[np.ndarray],
    candidate_groups: Sequence[Sequence[int]],
    estimates: np.ndarray,
    params: AttackParams,
) -> int:
    """Index into ``candidate_groups`` of the attacked group.

    Raises :class:`AmbiguousMatch` in strict mode when zero or several
    candidates fall within ``T_n``, and when there are no candidates.
    """
    if not candidate_groups:
        raise AmbiguousMatch("no candidate group of the attacked size")
    dists = [bottleneck_distance(known_group_profiles, [estimates[v] for v in g])[0] for g in candidate_groups]
    if params.matching_mode is MatchingMode.GREEDY_NEAREST:
        return int(np.argmin(dists))
    inside = [j for j, d in enumerate(dists) if d <= params.T_n]
    if len(inside) != 1:
        raise AmbiguousMatch(f"{len(inside)} candidate groups within T_n={params.T_n:.4g}")
    return inside[0]


def identify_members(
    group_pseudonyms: Sequence[int],
    known_profiles: Sequence[np.ndarray],
    estimates: np.ndarray,
    params: AttackParams,
) -> dict[int, int]:
    """Map pseudonym -> index into ``known_profiles`` for one matched group.

    Strict mode requires exactly one pseudonym inside the ``Delta_n`` box of
    each user; greedy mode uses the bottleneck-optimal permutation.
    """
    group_pseudonyms = list(group_pseudonyms)
    s = len(known_profiles)
    if len(group_pseudonyms) != s:
        raise ValueError("group size does not match the number of known profiles")
    if s == 1:
        return {group_pseudonyms[0]: 0}
    if params.matching_mode is MatchingMode.GREEDY_NEAREST:
        _, sigma = bottleneck_distance(known_profiles, [estimates[v] for v in group_pseudonyms])
        return {group_pseudonyms[sigma[u]]: u for u in range(s)}
    out: dict[int, int] = {}
    for u, prof in enumerate(known_profiles):
        inside = [v for v in group_pseudonyms if _pair_distance(prof, estimates[v]) <= params.Delta_n]
        if len(inside) != 1:
            raise AmbiguousMatch(f"{len(inside)} pseudonyms within Delta_n of user {u}")
        if inside[0] in out:
            raise AmbiguousMatch(f"pseudonym {inside[0]} matched twice")
        out[inside[0]] = u
    return out


def _fallback_guess(profile: UserProfile, m: int) -> np.ndarray:
    """Best blind guess of a user's samples: the most likely symbol."""
    return np.full(m, int(np.argmax(profile.marginal())), dtype=np.int8)


def full_attack(
    Y: TraceMatrix,
    profiles: Sequence[UserProfile],
    assoc: AssociationStructure,
    params: AttackParams,
    attacked_user: int = 0,
    X: Optional[TraceMatrix] = None,
    permutation=None,
) -> AttackReport:
    """Run graph reconstruction, group matching and member matching.

    ``profiles`` and ``assoc`` are the adversary's knowledge (true
    marginals and association graph). ``X`` and ``permutation`` are ground
    truth used only to score the attack; when ``permutation`` is omitted
    success flags are not computed.
    """
    kind = profiles[0].kind
    graph_t = profiles[0].graph
    group = list(assoc.group_of(attacked_user))
    s = len(group)
    rec = reconstruct_graph(Y, params)
    candidates = [c for c in rec.components() if len(c) == s]
    known = [profiles[u].params for u in group]
    estimates = _estimates_matrix(Y, kind, graph_t)

    group_index: Optional[int] = None
    assignment: dict[int, int] = {}
    failure: Optional[str] = None
    try:
        group_index = identify_group(known, candidates, estimates, params)
        local = identify_members(candidates[group_index], known, estimates, params)
        assignment = {pseud: group[idx] for pseud, idx in local.items()}
    except AmbiguousMatch as exc:
        failure = str(exc)

    pseudonym_of = {u: p for p, u in assignment.items()}
    X_est = None
    if X is not None or permutation is not None:
        X_est = np.empty((Y.m, s), dtype=np.int8)
        for k, u in enumerate(group):
            if u in pseudonym_of:
                X_est[:, k] = Y.values[:, pseudonym_of[u]]
            else:
                X_est[:, k] = _fallback_guess(profiles[u], Y.m)

    success: dict[int, bool] = {}
    extras: dict = {}
    if permutation is not None:
        fwd = permutation.forward
        for u in group:
            success[u] = pseudonym_of.get(u) == int(fwd[u])
        true_group = tuple(sorted(int(fwd[u]) for u in group))
        extras["group_correct"] = group_index is not None and tuple(candidates[group_index]) == true_group
    errors: dict[int, int] = {}
    if X is not None:
        for k, u in enumerate(group):
            errors[u] = int(np.count_nonzero(X_est[:, k] != X.values[:, u]))
    return AttackReport(rec, candidates, group_index, assignment, success, X_est, errors, Y.m, failure, extras)
