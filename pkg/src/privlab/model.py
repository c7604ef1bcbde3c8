"""User profiles, association structures and dependent trace generation.

Users are 0-indexed throughout. A trace matrix holds ``m`` time samples
(rows) for ``n`` users (columns), each symbol in ``{0, ..., r-1}``.

Three data models are supported:

* two-state i.i.d.: ``X_u(k) ~ Bernoulli(p_u)``
* r-state i.i.d.: ``P(X_u(k) = i) = p_u(i)`` for ``i = 1..r-1``, state 0 implied
* Markov: a chain on a shared :class:`TransitionGraph`, parametrised by the
  ``|E| - r`` free transition probabilities

Cross-user dependence is produced by one of three generation modes, see
:class:`GenerationMode`.
"""

from __future__ import annotations

import enum
import functools
import itertools
import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

__all__ = [
    "ModelKind",
    "GenerationMode",
    "TransitionGraph",
    "UserProfile",
    "AssociationStructure",
    "JointPMF2",
    "TraceMatrix",
    "sample_profiles",
    "feasible_rho_max",
    "joint_pmf_from_rho",
    "group_joint_pmf",
    "generate_traces",
]

_PMF_TOL = 1e-12


class ModelKind(str, enum.Enum):
    TWO_STATE = "two_state"
    R_STATE = "r_state"
    MARKOV = "markov"


class GenerationMode(str, enum.Enum):
    """How same-time samples of users in one group are made dependent.

    ``PAIRWISE_EXACT`` draws each pair jointly from a bivariate Bernoulli
    pmf with the requested correlation (two-state, groups of size <= 2).
    ``LATENT_FACTOR`` feeds every group member a shared uniform variate
    (with per-user probability ``w_u``, otherwise a private one) through
    the member's inverse CDF. ``COUPLED_MARKOV`` does the same for the
    per-step transition variate of Markov chains.
    """

    PAIRWISE_EXACT = "pairwise_exact"
    LATENT_FACTOR = "latent_factor"
    COUPLED_MARKOV = "coupled_markov"


@dataclass(frozen=True)
class TransitionGraph:
    """Directed transition structure shared by all users' Markov chains."""

    r: int
    edges: tuple[tuple[int, int], ...]

    def __post_init__(self):
        if self.r < 2:
            raise ValueError(f"r must be >= 2, got {self.r}")
        edges = tuple(sorted({(int(i), int(l)) for i, l in self.edges}))
        for i, l in edges:
            if not (0 <= i < self.r and 0 <= l < self.r):
                raise ValueError(f"edge {(i, l)} outside state range 0..{self.r - 1}")
        object.__setattr__(self, "edges", edges)
        missing = set(range(self.r)) - {i for i, _ in edges}
        if missing:
            raise ValueError(f"states without outgoing edge: {sorted(missing)}")

    @classmethod
    def complete(cls, r: int) -> "TransitionGraph":
        return cls(r, tuple(itertools.product(range(r), repeat=2)))

    @property
    def dof(self) -> int:
        return len(self.edges) - self.r

    def out_edges(self, i: int) -> list[int]:
        return [l for (a, l) in self.edges if a == i]

    def reference_target(self, i: int) -> int:
        """Outgoing edge of ``i`` whose probability is implied by the others.

        The self-loop when present, else the lowest-indexed target.
        """
        outs = self.out_edges(i)
        return i if i in outs else outs[0]

    @property
    def free_edges(self) -> list[tuple[int, int]]:
        return [(i, l) for (i, l) in self.edges if l != self.reference_target(i)]

    def is_ergodic(self) -> bool:
        """Irreducible and aperiodic, i.e. the adjacency matrix is primitive."""
        a = np.zeros((self.r, self.r), dtype=np.int64)
        for i, l in self.edges:
            a[i, l] = 1
        # Wielandt: primitive iff A^((r-1)^2 + 1) > 0
        power = (self.r - 1) ** 2 + 1
        acc = np.eye(self.r, dtype=np.int64)
        for _ in range(power):
            acc = np.minimum(acc @ a, 1)
        return bool(np.all(acc > 0))


@dataclass(frozen=True, eq=False)
class UserProfile:
    """Generative parameters of one user.

    ``params`` holds the free parameters: ``[p_u]`` for two-state, the
    probabilities of symbols ``1..r-1`` for r-state, and the free transition
    probabilities (ordered as ``graph.free_edges``) for Markov.
    """

    kind: ModelKind
    params: np.ndarray
    r: int = 2
    graph: Optional[TransitionGraph] = None

    def __post_init__(self):
        params = np.atleast_1d(np.asarray(self.params, dtype=float))
        params.setflags(write=False)
        object.__setattr__(self, "params", params)
        if np.any(params <= 0) or np.any(params >= 1):
            raise ValueError(f"profile probabilities must lie in (0,1): {params}")
        if self.kind is ModelKind.TWO_STATE:
            if self.r != 2 or params.shape != (1,):
                raise ValueError("two-state profile takes a single probability")
        elif self.kind is ModelKind.R_STATE:
            if self.r < 2 or params.shape != (self.r - 1,):
                raise ValueError(f"r-state profile needs r-1={self.r - 1} probabilities")
            if params.sum() >= 1:
                raise ValueError("r-state probabilities must sum to < 1")
        elif self.kind is ModelKind.MARKOV:
            if self.graph is None:
                raise ValueError("Markov profile requires a transition graph")
            if self.graph.r != self.r:
                object.__setattr__(self, "r", self.graph.r)
            if params.shape != (self.graph.dof,):
                raise ValueError(f"Markov profile needs d={self.graph.dof} parameters")
            if not self.graph.is_ergodic():
                raise ValueError("transition graph is reducible or periodic")
            for i in range(self.graph.r):
                if self.transition_matrix()[i, self.graph.reference_target(i)] <= 0:
                    raise ValueError(f"free probabilities of state {i} sum to >= 1")

    @property
    def p(self) -> float:
        if self.kind is not ModelKind.TWO_STATE:
            raise AttributeError("p is only defined for two-state profiles")
        return float(self.params[0])

    @property
    def dof(self) -> int:
        return int(self.params.shape[0])

    def transition_matrix(self) -> np.ndarray:
        if self.kind is not ModelKind.MARKOV:
            raise AttributeError("transition matrix only defined for Markov profiles")
        g = self.graph
        t = np.zeros((g.r, g.r))
        for value, (i, l) in zip(self.params, g.free_edges):
            t[i, l] = value
        for i in range(g.r):
            t[i, g.reference_target(i)] = 1.0 - t[i].sum()
        return t

    def marginal(self) -> np.ndarray:
        """Per-step probability of each of the ``r`` symbols."""
        if self.kind is ModelKind.TWO_STATE:
            return np.array([1.0 - self.p, self.p])
        if self.kind is ModelKind.R_STATE:
            return np.concatenate([[1.0 - self.params.sum()], self.params])
        return stationary_distribution(self.transition_matrix())

    def __repr__(self):
        return f"UserProfile({self.kind.value}, {np.round(self.params, 4).tolist()})"


def stationary_distribution(t: np.ndarray) -> np.ndarray:
    """Stationary law of an ergodic transition matrix (linear solve)."""
    r = t.shape[0]
    a = np.vstack([t.T - np.eye(r), np.ones(r)])
    b = np.zeros(r + 1)
    b[-1] = 1.0
    pi, *_ = np.linalg.lstsq(a, b, rcond=None)
    pi = np.clip(pi, 0.0, None)
    return pi / pi.sum()


@dataclass(frozen=True)
class AssociationStructure:
    """Partition of users into dependency groups plus per-edge correlations.

    For ``LATENT_FACTOR`` / ``COUPLED_MARKOV`` the edge value is a coupling
    strength: user ``u`` takes the shared variate with probability
    ``w_u = sqrt(max incident edge value)`` unless ``loadings`` are given.
    Those modes make every pair in a group dependent, so the effective
    association graph is the clique on each group.
    """

    n: int
    groups: tuple[tuple[int, ...], ...]
    edges: tuple[tuple[int, int, float], ...] = ()
    mode: GenerationMode = GenerationMode.PAIRWISE_EXACT
    loadings: Optional[tuple[float, ...]] = None

    def __post_init__(self):
        groups = tuple(tuple(sorted(int(u) for u in g)) for g in self.groups)
        object.__setattr__(self, "groups", groups)
        members = sorted(u for g in groups for u in g)
        if members != list(range(self.n)):
            raise ValueError("groups must partition users 0..n-1")
        edges = tuple((min(int(a), int(b)), max(int(a), int(b)), float(rho)) for a, b, rho in self.edges)
        object.__setattr__(self, "edges", edges)
        gid = self.group_index
        for a, b, rho in edges:
            if a == b:
                raise ValueError("self-loop in association structure")
            if gid[a] != gid[b]:
                raise ValueError(f"edge {(a, b)} crosses groups")
            if not (0.0 < rho <= 1.0):
                raise ValueError(f"edge correlation must lie in (0,1], got {rho}")
        if self.mode is GenerationMode.PAIRWISE_EXACT and any(len(g) > 2 for g in groups):
            raise ValueError("PAIRWISE_EXACT supports groups of size <= 2 only")
        if self.loadings is not None:
            if len(self.loadings) != self.n or any(not 0 <= w <= 1 for w in self.loadings):
                raise ValueError("loadings must be n values in [0,1]")

    @classmethod
    def singletons(cls, n: int, mode: GenerationMode = GenerationMode.PAIRWISE_EXACT):
        return cls(n, tuple((u,) for u in range(n)), (), mode)

    @functools.cached_property
    def group_index(self) -> np.ndarray:
        gid = np.empty(self.n, dtype=np.int64)
        for j, g in enumerate(self.groups):
            gid[list(g)] = j
        gid.setflags(write=False)
        return gid

    @functools.cached_property
    def _rho_lookup(self) -> dict[tuple[int, int], float]:
        return {(a, b): rho for a, b, rho in self.edges}

    @property
    def group_sizes(self) -> list[int]:
        return [len(g) for g in self.groups]

    def group_of(self, u: int) -> tuple[int, ...]:
        return self.groups[int(self.group_index[u])]

    def edge_rho(self, a: int, b: int) -> float:
        return self._rho_lookup.get((min(a, b), max(a, b)), 0.0)

    def effective_edges(self) -> set[tuple[int, int]]:
        """Pairs whose same-time samples are dependent under this mode."""
        if self.mode is GenerationMode.PAIRWISE_EXACT:
            return {(a, b) for a, b, _ in self.edges}
        out = set()
        w = self.member_loadings()
        for g in self.groups:
            for a, b in itertools.combinations(g, 2):
                if w[a] > 0 and w[b] > 0:
                    out.add((a, b))
        return out

    def member_loadings(self) -> np.ndarray:
        if self.loadings is not None:
            return np.asarray(self.loadings, dtype=float)
        w = np.zeros(self.n)
        for a, b, rho in self.edges:
            w[a] = max(w[a], math.sqrt(rho))
            w[b] = max(w[b], math.sqrt(rho))
        return w


@dataclass(frozen=True, eq=False)
class JointPMF2:
    """Joint pmf ``q[i][j] = P(X1 = i, X2 = j)`` of two binary samples."""

    q: np.ndarray

    def __post_init__(self):
        q = np.asarray(self.q, dtype=float).reshape(2, 2)
        if np.any(q < -_PMF_TOL) or abs(q.sum() - 1.0) > _PMF_TOL:
            raise ValueError(f"not a pmf: {q.tolist()}")
        q = np.clip(q, 0.0, None)
        q.setflags(write=False)
        object.__setattr__(self, "q", q)
        if not (0 < self.p1 < 1 and 0 < self.p2 < 1):
            raise ValueError("marginals must lie strictly inside (0,1)")

    @property
    def p1(self) -> float:
        return float(self.q[1].sum())

    @property
    def p2(self) -> float:
        return float(self.q[:, 1].sum())

    @property
    def cov(self) -> float:
        return float(self.q[1, 1] - self.p1 * self.p2)

    @property
    def corr(self) -> float:
        p1, p2 = self.p1, self.p2
        return self.cov / math.sqrt(p1 * (1 - p1) * p2 * (1 - p2))

    def transposed(self) -> "JointPMF2":
        return JointPMF2(self.q.T)


@dataclass(frozen=True, eq=False)
class TraceMatrix:
    """``m x n`` matrix of symbols in ``{0..r-1}``."""

    values: np.ndarray
    r: int = 2

    def __post_init__(self):
        values = np.asarray(self.values)
        if values.ndim != 2:
            raise ValueError("trace matrix must be 2-D (m x n)")
        if values.size and (values.min() < 0 or values.max() >= self.r):
            raise ValueError(f"symbols must lie in 0..{self.r - 1}")
        object.__setattr__(self, "values", values.astype(np.int8, copy=False))

    @property
    def m(self) -> int:
        return self.values.shape[0]

    @property
    def n(self) -> int:
        return self.values.shape[1]

    def column(self, u: int) -> np.ndarray:
        return self.values[:, u]

    def __eq__(self, other):
        return isinstance(other, TraceMatrix) and self.r == other.r and np.array_equal(self.values, other.values)


def _check_prob(name: str, p: float):
    if not (0.0 < p < 1.0):
        raise ValueError(f"{name} must lie in (0,1), got {p}")


def feasible_rho_max(p1: float, p2: float) -> float:
    """Largest correlation a pair of Bernoulli(p1), Bernoulli(p2) can have."""
    _check_prob("p1", p1)
    _check_prob("p2", p2)
    a = math.sqrt(p1 * (1 - p2) / (p2 * (1 - p1)))
    return min(a, 1.0 / a, 1.0)


def joint_pmf_from_rho(p1: float, p2: float, rho: float) -> JointPMF2:
    """Bivariate Bernoulli pmf with the given marginals and correlation."""
    if rho < 0:
        raise ValueError("negative correlation is not supported")
    rmax = feasible_rho_max(p1, p2)
    if rho > rmax * (1 + 1e-12):
        raise ValueError(f"rho={rho} exceeds feasible maximum {rmax:.6f} for p=({p1}, {p2})")
    rho = min(rho, rmax)
    p11 = p1 * p2 + rho * math.sqrt(p1 * (1 - p1) * p2 * (1 - p2))
    q = np.array([[1 - p1 - p2 + p11, p2 - p11], [p1 - p11, p11]])
    return JointPMF2(np.clip(q, 0.0, None))


def sample_profiles(
    n: int,
    kind: ModelKind,
    rng: np.random.Generator,
    r: int = 2,
    graph: Optional[TransitionGraph] = None,
    margin: float = 0.05,
    p_range: Optional[tuple[float, float]] = None,
) -> list[UserProfile]:
    """Draw ``n`` i.i.d. profiles from a uniform prior.

    Two-state ``p_u`` is uniform on ``p_range`` (default
    ``[margin, 1-margin]``). r-state vectors and each Markov row are uniform
    on the simplex shrunk so every entry is at least ``margin``.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    kind = ModelKind(kind)
    if kind is ModelKind.TWO_STATE:
        lo, hi = p_range if p_range is not None else (margin, 1 - margin)
        if not (0 < lo <= hi < 1):
            raise ValueError(f"invalid p_range {(lo, hi)}")
        ps = rng.uniform(lo, hi, size=n)
        return [UserProfile(kind, np.array([p])) for p in ps]
    if kind is ModelKind.R_STATE:
        if r < 2:
            raise ValueError("r must be >= 2")
        if margin * r >= 1:
            raise ValueError("margin too large for r")
        full = margin + (1 - r * margin) * rng.dirichlet(np.ones(r), size=n)
        return [UserProfile(kind, row[1:], r=r) for row in full]
    if graph is None:
        raise ValueError("Markov profiles require a transition graph")
    if not graph.is_ergodic():
        raise ValueError("transition graph is reducible or periodic")
    out = []
    for _ in range(n):
        t = np.zeros((graph.r, graph.r))
        for i in range(graph.r):
            outs = graph.out_edges(i)
            k = len(outs)
            if k == 1:
                t[i, outs[0]] = 1.0
                continue
            if margin * k >= 1:
                raise ValueError("margin too large for out-degree")
            t[i, outs] = margin + (1 - k * margin) * rng.dirichlet(np.ones(k))
        params = np.array([t[i, l] for i, l in graph.free_edges])
        out.append(UserProfile(kind, params, r=graph.r, graph=graph))
    return out


# ---------------------------------------------------------------------------
# exact one-step joint law of a group


def _comonotone_law(cdfs: Sequence[np.ndarray]) -> dict[tuple[int, ...], float]:
    """Joint law of ``X_i = F_i^{-1}(U)`` for one shared uniform ``U``."""
    bps = sorted({0.0, 1.0, *(float(c) for cdf in cdfs for c in cdf[:-1])})
    law: dict[tuple[int, ...], float] = {}
    for lo, hi in zip(bps[:-1], bps[1:]):
        if hi <= lo:
            continue
        u = 0.5 * (lo + hi)
        key = tuple(int(np.searchsorted(cdf, u, side="right")) for cdf in cdfs)
        law[key] = law.get(key, 0.0) + (hi - lo)
    return law


def _mixture_law(dists: Sequence[np.ndarray], w: Sequence[float]) -> np.ndarray:
    """Joint law when member i uses the shared variate w.p. ``w[i]``."""
    s = len(dists)
    r = len(dists[0])
    out = np.zeros((r,) * s)
    cdfs = [np.cumsum(d) for d in dists]
    for cdf in cdfs:
        cdf[-1] = 1.0
    for shared in itertools.product((0, 1), repeat=s):
        weight = math.prod(w[i] if shared[i] else 1 - w[i] for i in range(s))
        if weight == 0:
            continue
        idx = [i for i in range(s) if shared[i]]
        com = _comonotone_law([cdfs[i] for i in idx]) if idx else {(): 1.0}
        for x in itertools.product(range(r), repeat=s):
            v = com.get(tuple(x[i] for i in idx), 0.0)
            if v == 0.0:
                continue
            for i in range(s):
                if not shared[i]:
                    v *= dists[i][x[i]]
            out[x] += weight * v
    return out


def _coupled_markov_stationary(profiles: Sequence[UserProfile], w: Sequence[float]) -> np.ndarray:
    """Stationary law of the product chain of a coupled Markov group."""
    s = len(profiles)
    r = profiles[0].r
    mats = [p.transition_matrix() for p in profiles]
    states = list(itertools.product(range(r), repeat=s))
    big = np.zeros((len(states), len(states)))
    for a, x in enumerate(states):
        law = _mixture_law([mats[i][x[i]] for i in range(s)], w)
        big[a] = law.reshape(-1)
    return stationary_distribution(big).reshape((r,) * s)


def group_joint_pmf(profiles: Sequence[UserProfile], assoc: AssociationStructure, group: Sequence[int]) -> np.ndarray:
    """Exact joint law of one time step for the users in ``group``.

    Returns an array of shape ``(r,) * len(group)``; axes follow ``group``.
    For coupled Markov groups this is the stationary law of the joint chain.
    """
    group = list(group)
    gids = {int(assoc.group_index[u]) for u in group}
    if len(gids) > 1:
        # independent blocks
        parts = {}
        for u in group:
            parts.setdefault(int(assoc.group_index[u]), []).append(u)
        out = np.ones(())
        order = []
        for members in parts.values():
            out = np.multiply.outer(out, group_joint_pmf(profiles, assoc, members))
            order.extend(members)
        perm = [order.index(u) for u in group]
        return np.transpose(out, perm)
    if len(group) == 1:
        return profiles[group[0]].marginal()
    if assoc.mode is GenerationMode.PAIRWISE_EXACT:
        a, b = group
        q = joint_pmf_from_rho(profiles[a].p, profiles[b].p, assoc.edge_rho(a, b)).q
        return np.array(q)
    w = assoc.member_loadings()[group]
    if assoc.mode is GenerationMode.COUPLED_MARKOV:
        return _coupled_markov_stationary([profiles[u] for u in group], w)
    return _mixture_law([profiles[u].marginal() for u in group], w)


# ---------------------------------------------------------------------------
# trace generation


def _validate(profiles: Sequence[UserProfile], assoc: AssociationStructure):
    if len(profiles) != assoc.n:
        raise ValueError(f"{len(profiles)} profiles for {assoc.n} users")
    kinds = {p.kind for p in profiles}
    if len(kinds) != 1:
        raise ValueError("all profiles must share one model kind")
    kind = kinds.pop()
    if len({p.r for p in profiles}) != 1:
        raise ValueError("all profiles must share one alphabet size")
    if assoc.mode is GenerationMode.PAIRWISE_EXACT:
        if kind is not ModelKind.TWO_STATE:
            raise ValueError("PAIRWISE_EXACT requires two-state profiles")
        for a, b, rho in assoc.edges:
            rmax = feasible_rho_max(profiles[a].p, profiles[b].p)
            if rho > rmax * (1 + 1e-12):
                raise ValueError(f"edge {(a, b)}: rho={rho} exceeds feasible maximum {rmax:.6f}")
    elif assoc.mode is GenerationMode.COUPLED_MARKOV:
        if kind is not ModelKind.MARKOV:
            raise ValueError("COUPLED_MARKOV requires Markov profiles")
    elif kind is ModelKind.MARKOV and assoc.edges:
        raise ValueError("dependent Markov users require COUPLED_MARKOV")
    return kind


def _shared_uniforms(assoc: AssociationStructure, shape: tuple[int, int], rng: np.random.Generator) -> np.ndarray:
    """Per-(step, user) uniforms, replaced by the group's shared variate w.p. ``w_u``."""
    m, n = shape
    u = rng.random((m, n))
    shared = rng.random((m, len(assoc.groups)))
    use = rng.random((m, n)) < assoc.member_loadings()[None, :]
    gid = assoc.group_index
    return np.where(use, shared[:, gid], u)


def generate_traces(
    profiles: Sequence[UserProfile],
    assoc: AssociationStructure,
    m: int,
    rng: np.random.Generator,
) -> TraceMatrix:
    """Sample an ``m x n`` trace matrix with the configured dependence."""
    kind = _validate(profiles, assoc)
    if m < 1:
        raise ValueError("m must be >= 1")
    n = assoc.n
    r = profiles[0].r
    out = np.empty((m, n), dtype=np.int8)

    if assoc.mode is GenerationMode.PAIRWISE_EXACT:
        u = rng.random((m, n))
        for g in assoc.groups:
            if len(g) == 1:
                (a,) = g
                out[:, a] = u[:, a] < profiles[a].p
                continue
            a, b = g
            rho = assoc.edge_rho(a, b)
            cdf = np.cumsum(joint_pmf_from_rho(profiles[a].p, profiles[b].p, rho).q.reshape(-1))
            cell = np.minimum(np.searchsorted(cdf, u[:, a], side="right"), 3)
            out[:, a] = cell // 2
            out[:, b] = cell % 2
            # u[:, b] left unused so singleton streams do not depend on pairing
        return TraceMatrix(out, r)

    unif = _shared_uniforms(assoc, (m, n), rng)
    if kind is not ModelKind.MARKOV:
        for v in range(n):
            cdf = np.cumsum(profiles[v].marginal())
            cdf[-1] = 1.0
            out[:, v] = np.searchsorted(cdf, unif[:, v], side="right")
        return TraceMatrix(out, r)

    cum = np.stack([np.cumsum(p.transition_matrix(), axis=1) for p in profiles])
    cum[:, :, -1] = 1.0
    init = np.stack([np.cumsum(p.marginal()) for p in profiles])
    init[:, -1] = 1.0
    users = np.arange(n)
    state = (unif[0][:, None] >= init).sum(axis=1)
    out[0] = state
    for k in range(1, m):
        state = (unif[k][:, None] >= cum[users, state]).sum(axis=1)
        out[k] = state
    return TraceMatrix(out, r)
