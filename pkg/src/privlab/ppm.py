"""Privacy-protection mechanisms.

Independent obfuscation passes every symbol through an r-ary symmetric
channel with a per-user flip probability ``R_u ~ U[0, a_n]``. Anonymization
relabels columns with a secret random permutation. The dependency-aware
de-correlation step flips one member of a dependent pair inside a single
joint cell so the pair's per-step joint law becomes a product law.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy import integrate, stats

from .model import (
    AssociationStructure,
    GenerationMode,
    JointPMF2,
    ModelKind,
    TraceMatrix,
    UserProfile,
    group_joint_pmf,
)

__all__ = [
    "NoiseAssignment",
    "Permutation",
    "DecorrelationPlan",
    "draw_noise",
    "obfuscate",
    "sample_permutation",
    "anonymize",
    "deanonymize",
    "plan_decorrelation",
    "plan_group_decorrelation",
    "plan_structure",
    "apply_decorrelation",
    "perfect_privacy_pipeline",
    "PipelineOutput",
    "UnaffectedReport",
    "default_second_stage_noise",
    "unaffected_marginal_density_check",
    "unaffected_density",
]

# covariances below this are treated as already independent
_COV_EPS = 1e-15


@dataclass(frozen=True, eq=False)
class NoiseAssignment:
    a_n: float
    R: np.ndarray

    def __post_init__(self):
        if not 0.0 <= self.a_n <= 1.0:
            raise ValueError(f"noise level must lie in [0,1], got {self.a_n}")
        if np.any(self.R < 0) or np.any(self.R > self.a_n):
            raise ValueError("flip probabilities must lie in [0, a_n]")

    @property
    def n(self) -> int:
        return len(self.R)


@dataclass(frozen=True, eq=False)
class Permutation:
    """Bijection on users; ``forward[u]`` is the pseudonym of user ``u``."""

    forward: np.ndarray

    def __post_init__(self):
        fwd = np.asarray(self.forward, dtype=np.int64)
        if sorted(fwd.tolist()) != list(range(len(fwd))):
            raise ValueError("not a permutation")
        object.__setattr__(self, "forward", fwd)

    @property
    def inverse(self) -> np.ndarray:
        inv = np.empty_like(self.forward)
        inv[self.forward] = np.arange(len(self.forward))
        return inv

    @property
    def n(self) -> int:
        return len(self.forward)

    @classmethod
    def identity(cls, n: int) -> "Permutation":
        return cls(np.arange(n))


@dataclass(frozen=True)
class DecorrelationPlan:
    """Conditional flip rule for one dependent pair.

    Wherever ``(X_target, X_other) == conditioning_cell`` the target's symbol
    is flipped with probability ``upsilon``.
    """

    pair: tuple[int, int]
    target_user: int
    conditioning_cell: tuple[int, int]
    upsilon: float
    predicted_noise_level: float
    resulting_q: float

    @property
    def other_user(self) -> int:
        a, b = self.pair
        return b if self.target_user == a else a


def draw_noise(n: int, a_n: float, rng: np.random.Generator) -> NoiseAssignment:
    if not 0.0 <= a_n <= 1.0:
        raise ValueError(f"noise level must lie in [0,1], got {a_n}")
    return NoiseAssignment(float(a_n), rng.uniform(0.0, 1.0, size=n) * a_n)


def obfuscate(X: TraceMatrix, noise: NoiseAssignment, rng: np.random.Generator) -> TraceMatrix:
    """r-ary symmetric channel: keep w.p. ``1-R_u``, else a uniform other symbol."""
    if noise.n != X.n:
        raise ValueError(f"noise for {noise.n} users, traces for {X.n}")
    flip = rng.random((X.m, X.n)) < noise.R[None, :]
    if X.r == 2:
        return TraceMatrix(np.where(flip, 1 - X.values, X.values), X.r)
    offset = rng.integers(1, X.r, size=(X.m, X.n))
    return TraceMatrix(np.where(flip, (X.values + offset) % X.r, X.values), X.r)


def sample_permutation(n: int, rng: np.random.Generator) -> Permutation:
    return Permutation(rng.permutation(n))


def anonymize(Z: TraceMatrix, perm: Permutation) -> TraceMatrix:
    """Column ``perm.forward[u]`` of the result is column ``u`` of ``Z``."""
    if perm.n != Z.n:
        raise ValueError(f"permutation over {perm.n} users, traces for {Z.n}")
    return TraceMatrix(Z.values[:, perm.inverse], Z.r)


def deanonymize(Y: TraceMatrix, perm: Permutation) -> TraceMatrix:
    if perm.n != Y.n:
        raise ValueError(f"permutation over {perm.n} users, traces for {Y.n}")
    return TraceMatrix(Y.values[:, perm.forward], Y.r)


# ---------------------------------------------------------------------------
# de-correlation


def plan_decorrelation(
    joint: JointPMF2,
    pair: tuple[int, int] = (0, 1),
    allow_negative: bool = False,
) -> DecorrelationPlan:
    """Flip rule making a dependent binary pair exactly independent.

    The member whose marginal is nearer 1/2 is flipped (ties go to the
    first member). Its symbol is changed only when the other member shows
    its less likely value, which moves ``|Cov| / max(p1, p2, 1-p1, 1-p2)``
    probability mass. The canonical case ``max = 1 - p2`` conditions on
    ``X2 = 1`` and flips ``X1: 1 -> 0``; the other cases follow by symmetry.
    """
    cov = joint.cov
    if cov < -1e-12 and not allow_negative:
        raise ValueError(f"negative covariance {cov:.3g}; only non-negative dependence is supported")
    p1, p2 = joint.p1, joint.p2
    if abs(p1 - 0.5) <= abs(p2 - 0.5):
        target, other, q = pair[0], pair[1], joint.q
    else:
        target, other, q = pair[1], pair[0], joint.q.T
    p_t, p_o = q[1].sum(), q[:, 1].sum()
    rare = 1 if p_o <= 0.5 else 0
    p_rare = q[:, rare].sum()
    # P(T=1 | O=rare) - P(T=1 | O=frequent)
    gap = q[1, rare] / p_rare - q[1, 1 - rare] / (1 - p_rare)
    moved = p_rare * abs(gap)
    if abs(cov) <= _COV_EPS or moved == 0.0:
        return DecorrelationPlan(tuple(pair), target, (1, rare), 0.0, 0.0, float(p_t))
    x_t = 1 if gap > 0 else 0
    cell_mass = q[x_t, rare]
    assert cell_mass > 0, "zero-probability conditioning cell with nonzero covariance"
    upsilon = min(moved / cell_mass, 1.0)
    noise = upsilon * cell_mass
    resulting_q = p_t - noise if x_t == 1 else p_t + noise
    return DecorrelationPlan(tuple(pair), target, (x_t, rare), float(upsilon), float(noise), float(resulting_q))


def _apply_plan_to_pmf(pmf: np.ndarray, axes: dict[int, int], plan: DecorrelationPlan) -> np.ndarray:
    """Exact effect of a plan on a joint pmf over several binary users."""
    out = pmf.copy()
    t_ax, o_ax = axes[plan.target_user], axes[plan.other_user]
    src = [slice(None)] * pmf.ndim
    src[t_ax], src[o_ax] = plan.conditioning_cell
    dst = list(src)
    dst[t_ax] = 1 - plan.conditioning_cell[0]
    moved = out[tuple(src)] * plan.upsilon
    out[tuple(src)] -= moved
    out[tuple(dst)] += moved
    return out


def _pair_pmf(pmf: np.ndarray, i: int, j: int) -> np.ndarray:
    rest = tuple(k for k in range(pmf.ndim) if k not in (i, j))
    q = pmf.sum(axis=rest) if rest else pmf
    return q if i < j else q.T


def _pair_cov(q: np.ndarray) -> float:
    return float(q[1, 1] - q[1].sum() * q[:, 1].sum())


def plan_group_decorrelation(
    pmf: np.ndarray,
    group: Sequence[int],
    edges: Optional[set[tuple[int, int]]] = None,
    tol: float = 1e-13,
    max_steps: int = 200,
) -> list[DecorrelationPlan]:
    """Sequence of plans making every pair in a group of <= 3 users uncorrelated.

    ``pmf`` is the exact joint law over ``group`` (one binary axis per
    member). The first break follows the edge order for three users (path:
    the pair not containing the first member; triangle: first and last
    member), then the pair with the largest remaining ``|Cov|`` is broken
    next. The joint law is recomputed exactly after every break.
    """
    group = list(group)
    s = len(group)
    if s > 3:
        raise ValueError(f"groups of size {s} > 3 are not supported")
    if s < 2:
        return []
    pmf = np.asarray(pmf, dtype=float)
    axes = {u: k for k, u in enumerate(group)}
    pairs = list(itertools.combinations(range(s), 2))
    plans: list[DecorrelationPlan] = []

    first: Optional[tuple[int, int]] = None
    if s == 3 and edges is not None:
        present = [(i, j) for i, j in pairs if (group[i], group[j]) in edges]
        if len(present) == 3:
            first = (0, 2)
        elif len(present) == 2:
            first = (1, 2) if (1, 2) in present else present[-1]

    for step in range(max_steps):
        covs = {ij: _pair_cov(_pair_pmf(pmf, *ij)) for ij in pairs}
        worst = max(pairs, key=lambda ij: abs(covs[ij]))
        if abs(covs[worst]) <= tol:
            return plans
        ij = first if (step == 0 and first is not None and abs(covs[first]) > tol) else worst
        i, j = ij
        plan = plan_decorrelation(JointPMF2(_pair_pmf(pmf, i, j)), (group[i], group[j]), allow_negative=True)
        plans.append(plan)
        pmf = _apply_plan_to_pmf(pmf, axes, plan)
    raise RuntimeError(f"de-correlation of group {group} did not converge in {max_steps} steps")


def plan_structure(profiles: Sequence[UserProfile], assoc: AssociationStructure) -> list[DecorrelationPlan]:
    """Stage-1 plans for every dependent group, in group order."""
    if any(p.kind is not ModelKind.TWO_STATE for p in profiles):
        raise ValueError("de-correlation is defined for the two-state model only")
    if any(len(g) > 3 for g in assoc.groups):
        raise ValueError("groups larger than 3 are not supported by the de-correlation pipeline")
    edges = assoc.effective_edges()
    plans = []
    for g in assoc.groups:
        if len(g) < 2:
            continue
        pmf = group_joint_pmf(profiles, assoc, g)
        if len(g) == 2:
            plan = plan_decorrelation(JointPMF2(pmf), (g[0], g[1]), allow_negative=assoc.mode is not GenerationMode.PAIRWISE_EXACT)
            if plan.upsilon > 0:
                plans.append(plan)
        else:
            plans.extend(plan_group_decorrelation(pmf, g, edges))
    return plans


def apply_decorrelation(
    X: TraceMatrix,
    assoc: AssociationStructure,
    plans: Sequence[DecorrelationPlan],
    rng: np.random.Generator,
) -> TraceMatrix:
    """Apply plans in order; later plans see the output of earlier ones."""
    if X.r != 2:
        raise ValueError("de-correlation requires binary traces")
    if X.n != assoc.n:
        raise ValueError("trace/structure size mismatch")
    gid = assoc.group_index
    values = X.values.copy()
    for plan in plans:
        a, b = plan.pair
        if gid[a] != gid[b] or plan.target_user not in plan.pair:
            raise ValueError(f"plan for {plan.pair} does not match a dependent pair")
        draws = rng.random(X.m)
        if plan.upsilon == 0.0:
            continue
        t, o = plan.target_user, plan.other_user
        ct, co = plan.conditioning_cell
        hit = (values[:, t] == ct) & (values[:, o] == co) & (draws < plan.upsilon)
        values[hit, t] = 1 - ct
    return TraceMatrix(values, X.r)


def default_second_stage_noise(n: int, c: float = 1.0, exponent: float = 0.9) -> float:
    """``c * n^-exponent``: vanishing, yet large compared with ``1/n``."""
    return float(min(1.0, c * n ** (-exponent)))


@dataclass(frozen=True, eq=False)
class PipelineOutput:
    Y: TraceMatrix
    permutation: Permutation
    noise: NoiseAssignment
    plans: list[DecorrelationPlan]
    decorrelated: TraceMatrix
    Z: TraceMatrix


def perfect_privacy_pipeline(
    X: TraceMatrix,
    profiles: Sequence[UserProfile],
    assoc: AssociationStructure,
    second_stage_a_n: Optional[float],
    rng: np.random.Generator,
) -> PipelineOutput:
    """De-correlate every group, then obfuscate independently and anonymize.

    ``second_stage_a_n=None`` uses :func:`default_second_stage_noise`.
    """
    if any(len(g) > 3 for g in assoc.groups):
        raise ValueError("groups larger than 3 are not supported by the de-correlation pipeline")
    if X.r != 2:
        raise ValueError("the pipeline is defined for the two-state model only")
    a_n = default_second_stage_noise(X.n) if second_stage_a_n is None else second_stage_a_n
    plans = plan_structure(profiles, assoc)
    stage1 = apply_decorrelation(X, assoc, plans, rng)
    noise = draw_noise(X.n, a_n, rng)
    Z = obfuscate(stage1, noise, rng)
    perm = sample_permutation(X.n, rng)
    return PipelineOutput(anonymize(Z, perm), perm, noise, plans, stage1, Z)


# ---------------------------------------------------------------------------
# density of the parameters of users left untouched by de-correlation


def unaffected_density(q: np.ndarray, lo: float = 0.0, hi: float = 1.0) -> np.ndarray:
    """Density of an untouched user's ``p`` under a uniform prior on ``[lo, hi]``.

    ``2 f(q) * integral_{min(q,1-q)}^{max(q,1-q)} f(x) dx``, evaluated by
    numerical quadrature.
    """
    width = hi - lo

    def f(x):
        return 1.0 / width if lo <= x <= hi else 0.0

    out = []
    for x in np.atleast_1d(q):
        a, b = min(x, 1 - x), max(x, 1 - x)
        mass, _ = integrate.quad(f, a, b, points=[p for p in (lo, hi) if a < p < b] or None)
        out.append(2.0 * f(x) * mass)
    return np.array(out)


@dataclass
class UnaffectedReport:
    unaffected: list[int]
    n: int
    all_pairs: bool
    enough_unaffected: bool
    chi2_statistic: Optional[float] = None
    chi2_pvalue: Optional[float] = None


def unaffected_marginal_density_check(
    profiles: Sequence[UserProfile],
    assoc: AssociationStructure,
    plans: Sequence[DecorrelationPlan],
    prior_range: tuple[float, float] = (0.0, 1.0),
    bins: int = 20,
) -> UnaffectedReport:
    """Find users no plan touches and test their ``p`` against the untouched-user density.

    The histogram of untouched users' ``p`` is compared (chi-square) with
    the bin masses of :func:`unaffected_density` integrated numerically.
    Only pairs for which a zero-noise plan was skipped count as touching
    nobody; the prior is assumed uniform on ``prior_range``.
    """
    if any(len(g) > 2 for g in assoc.groups):
        raise ValueError("density check is defined for groups of size <= 2")
    if any(p.kind is not ModelKind.TWO_STATE for p in profiles):
        raise ValueError("density check is defined for the two-state model only")
    touched = {pl.target_user for pl in plans if pl.upsilon > 0}
    unaffected = [u for u in range(assoc.n) if u not in touched]
    all_pairs = all(len(g) == 2 for g in assoc.groups)
    report = UnaffectedReport(unaffected, assoc.n, all_pairs, len(unaffected) >= assoc.n / 2)
    paired = [u for u in unaffected if len(assoc.group_of(u)) == 2]
    if len(paired) >= 5 * bins:
        lo, hi = prior_range
        edges = np.linspace(lo, hi, bins + 1)
        mass = np.array(
            [integrate.quad(lambda x: unaffected_density(x, lo, hi)[0], a, b, points=[0.5] if a < 0.5 < b else None)[0] for a, b in zip(edges[:-1], edges[1:])]
        )
        observed, _ = np.histogram([profiles[u].p for u in paired], bins=edges)
        expected = mass / mass.sum() * len(paired)
        keep = expected > 0
        chi2, pvalue = stats.chisquare(observed[keep], expected[keep])
        report.chi2_statistic = float(chi2)
        report.chi2_pvalue = float(pvalue)
    return report
