"""Finite probabilistic models that make the information-conservation
claims executable.

The observation space Y is a small grid {0..nu-1} x {0..nn-1} embedded in
R^2; the projector P keeps the first coordinate (so P o P = P and its range
is the u-axis), and B is an arbitrary relabeling injective on that range.
With everything finite, "E[f(x)|y] = E[f(x)|B(P y)] for all f" is exactly
equality of the conditional pmfs, which enumeration can check to rounding.

Claims checked:

* sufficiency: p(x|y) = p(x|B(P y)) for all y  <=>  x independent of the
  null-space component (y - P y) given P y;
* corollary: if additionally z and y are conditionally independent given
  x, then p(z|y) = p(z|B(P y)).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "DiscreteJointModel", "SufficiencyReport", "CorollaryReport",
    "conditional", "check_sufficiency", "check_corollary",
    "make_conserving_model", "make_correlated_null_model",
    "make_leaky_model", "run_theory_suite", "TOLERANCE",
]

TOLERANCE = 1e-12


@dataclass(frozen=True)
class DiscreteJointModel:
    """Joint pmf p(z, x, y) with y factored over a (u, n) grid.

    ``table`` has shape (|Z|, |X|, nu, nn); index u is the projected
    component (range of the projector), n the null-space component.
    ``b_labels`` gives B on the range of the projector and must be
    injective.
    """

    table: np.ndarray
    b_labels: tuple[int, ...] | None = None

    def __post_init__(self):
        t = np.asarray(self.table, np.float64)
        if t.ndim != 4:
            raise ValueError("table must be (|Z|, |X|, nu, nn)")
        if np.any(t < 0) or not np.isclose(t.sum(), 1.0, atol=1e-9):
            raise ValueError("table must be a probability distribution")
        object.__setattr__(self, "table", t)
        nu = t.shape[2]
        labels = self.b_labels if self.b_labels is not None else \
            tuple(range(nu))
        if len(labels) != nu or len(set(labels)) != nu:
            raise ValueError(
                "B must assign one distinct label per projected value "
                f"(got {labels} for {nu} values)")
        object.__setattr__(self, "b_labels", tuple(labels))

    @property
    def sizes(self) -> tuple[int, int, int, int]:
        return self.table.shape


_AXES = {"z": 0, "x": 1, "y": (2, 3)}


def conditional(model: DiscreteJointModel, condition_variable: str,
                value) -> np.ndarray:
    """Exact conditional pmf table given one variable's value.

    ``condition_variable`` is "z", "x", or "y" (value (u, n) for y); the
    result keeps the remaining axes in (z, x, y) order.  Conditioning on a
    zero-probability event is rejected.
    """
    t = model.table
    if condition_variable == "z":
        slab = t[value]
    elif condition_variable == "x":
        slab = t[:, value]
    elif condition_variable == "y":
        u, n = value
        slab = t[:, :, u, n]
    else:
        raise ValueError(f"unknown variable {condition_variable!r}")
    mass = slab.sum()
    if mass <= 0:
        raise ValueError(
            f"conditioning event {condition_variable}={value} has "
            "zero probability")
    return slab / mass


def _tv(p: np.ndarray, q: np.ndarray) -> float:
    return 0.5 * float(np.abs(p - q).sum())


@dataclass(frozen=True)
class SufficiencyReport:
    equality_deviation: float  # max TV of p(x|y) vs p(x|B(P y))
    independence_deviation: float  # max TV of p(x, n|u) vs product
    tolerance: float = TOLERANCE

    @property
    def equality_holds(self) -> bool:
        return self.equality_deviation < self.tolerance

    @property
    def independence_holds(self) -> bool:
        return self.independence_deviation < self.tolerance

    @property
    def iff_consistent(self) -> bool:
        return self.equality_holds == self.independence_holds

    @property
    def max_deviation(self) -> float:
        return max(self.equality_deviation, self.independence_deviation)


def check_sufficiency(model: DiscreteJointModel) -> SufficiencyReport:
    """Enumerate both sides of the sufficiency equivalence.

    Since B is injective on the range of the projector, conditioning on
    B(P y) is conditioning on u; equality of conditional expectations for
    all f over a finite X reduces to equality of the conditional pmfs.
    """
    p_xy = model.table.sum(axis=0)  # (|X|, nu, nn)
    p_u = p_xy.sum(axis=(0, 2))  # (nu,)
    p_x_given_u = np.zeros_like(p_xy.sum(axis=2))  # (|X|, nu)
    np.divide(p_xy.sum(axis=2), p_u, out=p_x_given_u, where=p_u > 0)

    eq_dev = 0.0
    for u in range(p_xy.shape[1]):
        for n in range(p_xy.shape[2]):
            mass = p_xy[:, u, n].sum()
            if mass <= 0:
                continue
            eq_dev = max(eq_dev, _tv(p_xy[:, u, n] / mass, p_x_given_u[:, u]))

    ind_dev = 0.0
    for u in range(p_xy.shape[1]):
        if p_u[u] <= 0:
            continue
        q = p_xy[:, u, :] / p_u[u]  # p(x, n | u)
        prod = np.outer(q.sum(axis=1), q.sum(axis=0))
        ind_dev = max(ind_dev, _tv(q, prod))
    return SufficiencyReport(eq_dev, ind_dev)


@dataclass(frozen=True)
class CorollaryReport:
    hypothesis_task_ci: bool  # z and y conditionally independent given x
    hypothesis_sufficiency: bool  # p(x|y) = p(x|B(P y))
    task_ci_deviation: float
    sufficiency_deviation: float
    conclusion_deviation: float | None  # None when a hypothesis failed
    tolerance: float = TOLERANCE

    @property
    def hypotheses_hold(self) -> bool:
        return self.hypothesis_task_ci and self.hypothesis_sufficiency

    @property
    def holds(self) -> bool:
        return (self.hypotheses_hold and
                self.conclusion_deviation is not None and
                self.conclusion_deviation < self.tolerance)


def check_corollary(model: DiscreteJointModel) -> CorollaryReport:
    """Verify p(z|y) = p(z|B(P y)) under the corollary's hypotheses.

    Hypotheses are asserted first by enumeration; if either fails the
    report names it and carries no conclusion.
    """
    t = model.table  # (|Z|, |X|, nu, nn)
    # hypothesis 1: p(z, y | x) factorizes as p(z|x) p(y|x)
    p_x = t.sum(axis=(0, 2, 3))
    ci_dev = 0.0
    for x in range(t.shape[1]):
        if p_x[x] <= 0:
            continue
        q = t[:, x] / p_x[x]  # p(z, y | x), shape (|Z|, nu, nn)
        qz = q.sum(axis=(1, 2))
        qy = q.sum(axis=0)
        ci_dev = max(ci_dev, _tv(q, qz[:, None, None] * qy[None]))
    suff = check_sufficiency(model)

    hyp_ci = ci_dev < TOLERANCE
    hyp_suff = suff.equality_holds
    if not (hyp_ci and hyp_suff):
        return CorollaryReport(hyp_ci, hyp_suff, ci_dev,
                               suff.equality_deviation, None)

    p_zy = t.sum(axis=1)  # (|Z|, nu, nn)
    p_u = p_zy.sum(axis=(0, 2))
    p_z_given_u = np.zeros_like(p_zy.sum(axis=2))
    np.divide(p_zy.sum(axis=2), p_u, out=p_z_given_u, where=p_u > 0)
    dev = 0.0
    for u in range(p_zy.shape[1]):
        for n in range(p_zy.shape[2]):
            mass = p_zy[:, u, n].sum()
            if mass <= 0:
                continue
            dev = max(dev, _tv(p_zy[:, u, n] / mass, p_z_given_u[:, u]))
    return CorollaryReport(hyp_ci, hyp_suff, ci_dev,
                           suff.equality_deviation, dev)


# ---------------------------------------------------------------------------
# model generators


def _rand_pmf(rng, *shape) -> np.ndarray:
    """Random strictly positive pmf over axis 0."""
    p = rng.gamma(1.5, size=shape) + 1e-3
    return p / p.sum(axis=0, keepdims=True)


def _rand_sizes(rng, max_size: int) -> tuple[int, int, int, int]:
    nz = int(rng.integers(1, max_size + 1))
    nx = int(rng.integers(2, max_size + 1))
    nu = int(rng.integers(2, max_size // 2 + 2))
    nn = int(rng.integers(2, max_size // 2 + 2))
    return nz, nx, nu, nn


def _rand_b_labels(rng, nu: int) -> tuple[int, ...]:
    # any injective relabeling of the projector's range
    return tuple(int(v) for v in rng.permutation(nu) * 3 + 1)


def make_conserving_model(seed: int, max_size: int = 8) -> DiscreteJointModel:
    """Hypotheses hold: p(z) p(x|z) p(u|x) p(n|u); the null-space noise
    depends only on the projected component."""
    rng = np.random.Generator(np.random.PCG64(seed))
    nz, nx, nu, nn = _rand_sizes(rng, max_size)
    pz = _rand_pmf(rng, nz)
    px_z = _rand_pmf(rng, nx, nz)
    pu_x = _rand_pmf(rng, nu, nx)
    pn_u = _rand_pmf(rng, nn, nu)
    table = np.einsum("z,xz,ux,nu->zxun", pz, px_z, pu_x, pn_u)
    return DiscreteJointModel(table, _rand_b_labels(rng, nu))


def make_correlated_null_model(seed: int,
                               max_size: int = 8) -> DiscreteJointModel:
    """Sufficiency fails: the null-space noise is tied to x given u."""
    rng = np.random.Generator(np.random.PCG64(seed))
    nz, nx, nu, nn = _rand_sizes(rng, max_size)
    pz = _rand_pmf(rng, nz)
    px_z = _rand_pmf(rng, nx, nz)
    pu_x = _rand_pmf(rng, nu, nx)
    pn_ux = _rand_pmf(rng, nn, nu, nx)
    # force visibly distinct conditionals across x so the dependence
    # cannot cancel
    pn_ux[:, :, 0] = 0.0
    pn_ux[0, :, 0] = 1.0
    pn_ux[:, :, 1:] = pn_ux[:, :, 1:] * 0.5 + 0.5 / nn
    pn_ux /= pn_ux.sum(axis=0, keepdims=True)
    table = np.einsum("z,xz,ux,nux->zxun", pz, px_z, pu_x, pn_ux)
    return DiscreteJointModel(table, _rand_b_labels(rng, nu))


def make_leaky_model(seed: int, max_size: int = 8) -> DiscreteJointModel:
    """Task conditional independence fails: y leaks z directly."""
    rng = np.random.Generator(np.random.PCG64(seed))
    nz, nx, nu, nn = _rand_sizes(rng, max_size)
    nz = max(nz, 2)
    pz = _rand_pmf(rng, nz)
    px_z = _rand_pmf(rng, nx, nz)
    pu_x = _rand_pmf(rng, nu, nx)
    pn_uz = _rand_pmf(rng, nn, nu, nz)
    pn_uz[:, :, 0] = 0.0
    pn_uz[0, :, 0] = 1.0
    pn_uz[:, :, 1:] = pn_uz[:, :, 1:] * 0.5 + 0.5 / nn
    pn_uz /= pn_uz.sum(axis=0, keepdims=True)
    table = np.einsum("z,xz,ux,nuz->zxun", pz, px_z, pu_x, pn_uz)
    return DiscreteJointModel(table, _rand_b_labels(rng, nu))


def run_theory_suite(num_models: int = 1000, max_size: int = 8,
                     seed: int = 0) -> tuple[list[dict], bool]:
    """Randomized audit of the proposition and corollary.

    Generates conserving and hypothesis-violating models in proportion
    2:1:1, checks both directions of the equivalence on every model, and
    returns (per-model rows, overall pass flag).
    """
    rows = []
    all_ok = True
    ss = np.random.SeedSequence(seed)
    child_seeds = ss.generate_state(num_models)
    for i in range(num_models):
        s = int(child_seeds[i])
        family = ("conserving", "conserving", "correlated",
                  "leaky")[i % 4]
        if family == "conserving":
            model = make_conserving_model(s, max_size)
        elif family == "correlated":
            model = make_correlated_null_model(s, max_size)
        else:
            model = make_leaky_model(s, max_size)
        suff = check_sufficiency(model)
        cor = check_corollary(model)
        if family == "conserving":
            ok = (suff.equality_holds and suff.independence_holds
                  and cor.hypotheses_hold and cor.holds)
        elif family == "correlated":
            ok = (not suff.equality_holds and not suff.independence_holds
                  and not cor.hypothesis_sufficiency)
        else:  # leaky: task CI must fail and be reported as such
            ok = (not cor.hypothesis_task_ci
                  and cor.conclusion_deviation is None)
        ok = ok and suff.iff_consistent
        all_ok = all_ok and ok
        rows.append({
            "seed": s, "family": family, "sizes": "x".join(
                str(v) for v in model.sizes),
            "task_ci_holds": cor.hypothesis_task_ci,
            "sufficiency_holds": cor.hypothesis_sufficiency,
            "equality_deviation": suff.equality_deviation,
            "independence_deviation": suff.independence_deviation,
            "conclusion_deviation": (cor.conclusion_deviation
                                     if cor.conclusion_deviation is not None
                                     else ""),
            "ok": ok,
        })
    return rows, all_ok
