"""Exact mutual information on small discrete joints and checks of the variational bounds.

Every quantity is in nats. Joints are dense probability tables with one named
axis per variable, e.g. ``("s", "z1", "z2")`` or ``("s", "y", "z1", "z2")``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import kernels
from .numerics import ConfigurationError

MAX_CARDINALITY = 8


@dataclass
class DiscreteJoint:
    probs: np.ndarray
    names: tuple[str, ...]

    def __post_init__(self):
        self.probs = np.asarray(self.probs, dtype=np.float64)
        self.names = tuple(self.names)
        if self.probs.ndim != len(self.names) or len(set(self.names)) != len(self.names):
            raise ConfigurationError("one distinct name per axis required")
        if np.any(self.probs < 0) or abs(self.probs.sum() - 1.0) > 1e-12:
            raise ConfigurationError("probabilities must be non-negative and sum to 1")

    def axis(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise ConfigurationError(f"unknown variable {name!r}; have {self.names}") from None

    def size(self, name: str) -> int:
        return self.probs.shape[self.axis(name)]

    def marginal(self, names) -> np.ndarray:
        """Marginal table with axes in the order of ``names``."""
        names = tuple(names)
        keep = [self.axis(n) for n in names]
        drop = tuple(i for i in range(self.probs.ndim) if i not in keep)
        m = self.probs.sum(axis=drop) if drop else self.probs
        remaining = [i for i in range(self.probs.ndim) if i in keep]
        return np.transpose(m, [remaining.index(i) for i in keep])

    def entropy(self, names) -> float:
        p = self.marginal(names).ravel()
        p = p[p > 0]
        return float(-np.sum(p * np.log(p)))


def _as_names(v) -> tuple[str, ...]:
    return (v,) if isinstance(v, str) else tuple(v)


def exact_mi(joint: DiscreteJoint, vars_a, vars_b, cond_vars=()) -> float:
    """``I(A; B | C)`` by enumeration, with ``0 log 0 = 0``."""
    a, b, c = _as_names(vars_a), _as_names(vars_b), _as_names(cond_vars)
    if set(a) & set(b) or set(a) & set(c) or set(b) & set(c):
        raise ConfigurationError("variable sets must be disjoint")
    if not a or not b:
        raise ConfigurationError("both variable sets must be non-empty")
    p = joint.marginal(a + b + c)
    na = int(np.prod([joint.size(n) for n in a]))
    nb = int(np.prod([joint.size(n) for n in b]))
    p = p.reshape(na, nb, -1)
    p_ac = p.sum(axis=1, keepdims=True)
    p_bc = p.sum(axis=0, keepdims=True)
    p_c = p.sum(axis=(0, 1), keepdims=True)
    nz = p > 0
    ratio = (p * p_c)[nz] / (p_ac * p_bc * np.ones_like(p))[nz]
    return max(float(np.sum(p[nz] * np.log(ratio))), 0.0)


# -- joint construction -----------------------------------------------------

def random_joint(rng: np.random.Generator, sizes, names=("s", "z1", "z2"),
                 concentration: float = 1.0) -> DiscreteJoint:
    sizes = tuple(int(s) for s in sizes)
    if any(s < 1 or s > MAX_CARDINALITY for s in sizes):
        raise ConfigurationError(f"cardinalities must lie in [1, {MAX_CARDINALITY}]")
    p = rng.dirichlet(np.full(int(np.prod(sizes)), concentration)).reshape(sizes)
    return DiscreteJoint(p / p.sum(), names)


def label_skew_joint(p_s, p_y_given_s, p_z_given_y) -> DiscreteJoint:
    """``p(s) p(y|s) p(z1, z2|y)`` over axes ``(s, y, z1, z2)``.

    ``p_z_given_y`` is either ``(Y, Z1, Z2)`` or a pair of ``(Y, Z)`` tables
    for views that are conditionally independent given the label.
    """
    p_s = np.asarray(p_s, float)
    p_ys = np.asarray(p_y_given_s, float)
    if isinstance(p_z_given_y, (tuple, list)):
        a, b = (np.asarray(t, float) for t in p_z_given_y)
        pz = a[:, :, None] * b[:, None, :]
    else:
        pz = np.asarray(p_z_given_y, float)
    p = p_s[:, None, None, None] * p_ys[:, :, None, None] * pz[None]
    return DiscreteJoint(p / p.sum(), ("s", "y", "z1", "z2"))


def random_label_skew_joint(rng: np.random.Generator, n_s=3, n_y=3, n_z=4,
                            concentration: float = 0.5) -> DiscreteJoint:
    p_s = rng.dirichlet(np.ones(n_s))
    p_ys = rng.dirichlet(np.full(n_y, concentration), size=n_s)
    p_z = rng.dirichlet(np.full(n_z * n_z, concentration), size=n_y).reshape(n_y, n_z, n_z)
    return label_skew_joint(p_s, p_ys, p_z)


def random_classifier(rng: np.random.Generator, n_inputs: int, n_outputs: int,
                      concentration: float = 1.0) -> np.ndarray:
    """Row-stochastic table ``r[input, output]``."""
    return rng.dirichlet(np.full(n_outputs, concentration), size=n_inputs)


def posterior(joint: DiscreteJoint, target: str, given: str) -> np.ndarray:
    """``p(target | given)`` as a ``(given, target)`` table."""
    m = joint.marginal((given, target))
    z = m.sum(axis=1, keepdims=True)
    uniform = np.full_like(m, 1.0 / m.shape[1])
    return np.where(z > 0, m / np.where(z > 0, z, 1.0), uniform)


def optimal_critic(joint: DiscreteJoint, floor: float = 1e-300) -> np.ndarray:
    """Pointwise conditional MI ``log p(z1,z2|s) - log p(z1|s) - log p(z2|s)``.

    Equal to ``log p(z1|z2,s)`` up to a term depending on ``z1`` only through
    ``p(z1|s)``, i.e. the density-ratio critic that makes InfoNCE tightest.
    """
    p = joint.marginal(("s", "z1", "z2"))
    ps = p.sum(axis=(1, 2), keepdims=True)
    cond = p / np.maximum(ps, floor)
    p1 = cond.sum(axis=2, keepdims=True)
    p2 = cond.sum(axis=1, keepdims=True)
    return np.log(np.maximum(cond, floor)) - np.log(np.maximum(p1, floor)) - np.log(np.maximum(p2, floor))


# -- bound checks -----------------------------------------------------------

@dataclass
class BoundCheck:
    name: str
    true_value: float
    bound_value: float
    slack: float           # distance to violation; negative means violated
    passed: bool


def chain_rule_residual(joint: DiscreteJoint) -> float:
    """``I(z1;z2) - [I(z1;z2|s) + I(z1;s) - I(z1;s|z2)]``."""
    lhs = exact_mi(joint, "z1", "z2")
    rhs = (exact_mi(joint, "z1", "z2", "s") + exact_mi(joint, "z1", "s")
           - exact_mi(joint, "z1", "s", "z2"))
    return lhs - rhs


@dataclass
class InfoNCEEstimate:
    bound: float
    stderr: float
    true_mi: float
    max_term: float
    log_k: float
    holds: bool


def sample_pairs(joint: DiscreteJoint, k: int, num_samples: int, rng: np.random.Generator):
    """``num_samples`` draws of ``s`` and, per draw, ``k`` i.i.d. pairs from p(z1,z2|s)."""
    p = joint.marginal(("s", "z1", "z2"))
    n_s, _, n2 = p.shape
    ps = p.sum(axis=(1, 2))
    s = rng.choice(n_s, size=num_samples, p=ps / ps.sum())
    flat = np.empty((num_samples, k), dtype=np.int64)
    for si in range(n_s):
        rows = np.flatnonzero(s == si)
        if rows.size:
            cond = p[si].ravel() / ps[si]
            flat[rows] = rng.choice(cond.size, size=(rows.size, k), p=cond)
    return s.astype(np.int64), flat // n2, flat % n2


def validate_infonce_bound(joint: DiscreteJoint, critic_table, k: int, num_samples: int,
                           rng: np.random.Generator) -> InfoNCEEstimate:
    """Monte-Carlo value of the K-sample conditional InfoNCE bound vs exact I(z1;z2|s).

    ``critic_table`` is ``(Z1, Z2)`` (shared by all clients) or ``(S, Z1, Z2)``.
    """
    if k < 1:
        raise ConfigurationError("K must be >= 1")
    critic = np.asarray(critic_table, dtype=np.float64)
    n_s = joint.size("s")
    if critic.ndim == 2:
        critic = np.broadcast_to(critic, (n_s,) + critic.shape)
    if not np.all(np.isfinite(critic)):
        raise ConfigurationError("critic table must be finite")
    s, i1, i2 = sample_pairs(joint, k, num_samples, rng)
    terms = kernels.infonce_table_terms(np.ascontiguousarray(critic), s, i1, i2)
    bound = float(np.mean(terms))
    se = float(np.std(terms, ddof=1) / math.sqrt(num_samples)) if num_samples > 1 else 0.0
    true = exact_mi(joint, "z1", "z2", "s")
    log_k = math.log(k)
    max_term = float(np.max(terms))
    holds = bound <= true + 3.0 * se and max_term <= log_k + 1e-12
    return InfoNCEEstimate(bound, se, true, max_term, log_k, holds)


def expected_log_classifier(joint: DiscreteJoint, classifier, target: str, given: str) -> float:
    """``E_{p(target, given)}[log r(target | given)]`` with ``r`` as a (given, target) table."""
    m = joint.marginal((given, target))
    r = np.asarray(classifier, float)
    if r.shape != m.shape:
        raise ConfigurationError(f"classifier table has shape {r.shape}, expected {m.shape} "
                                 f"({given} x {target})")
    nz = m > 0
    with np.errstate(divide="ignore"):
        return float(np.sum(m[nz] * np.log(r[nz])))


@dataclass
class UVReport:
    entropy_s: float
    i_z1_s: float
    marginal_bound: float          # E[log r(s|z1)] + H(s), lower bound on I(z1;s)
    i_z1_s_given_z2: float
    conditional_bound: float          # -E[log r(s|z2)], upper bound on I(z1;s|z2)

    @property
    def marginal_holds(self) -> bool:
        return self.marginal_bound <= self.i_z1_s + 1e-12

    @property
    def conditional_holds(self) -> bool:
        return self.conditional_bound >= self.i_z1_s_given_z2 - 1e-12

    @property
    def marginal_gap(self) -> float:
        return self.i_z1_s - self.marginal_bound


def validate_uv_bounds(joint: DiscreteJoint, classifier_z1, classifier_z2=None) -> UVReport:
    """Exact check of the client-ID lower bound (on z1) and upper bound (via z2).

    Classifiers are ``(Z, S)`` row-stochastic tables; the z1 table is reused
    for z2 when no second one is given.
    """
    r1 = np.asarray(classifier_z1, float)
    r2 = r1 if classifier_z2 is None else np.asarray(classifier_z2, float)
    for r in (r1, r2):
        if np.any(r < 0) or not np.allclose(r.sum(axis=1), 1.0, atol=1e-12):
            raise ConfigurationError("classifier rows must be distributions")
    h_s = joint.entropy(("s",))
    return UVReport(
        entropy_s=h_s,
        i_z1_s=exact_mi(joint, "z1", "s"),
        marginal_bound=expected_log_classifier(joint, r1, "s", "z1") + h_s,
        i_z1_s_given_z2=exact_mi(joint, "z1", "s", "z2"),
        conditional_bound=-expected_log_classifier(joint, r2, "s", "z2"),
    )


@dataclass
class Prop2Report:
    lhs: float                    # I(z1;y) + I(z2;y)
    rhs: float                    # E[log r(s|z1) + log r(s|z2)] + 2 H(s)

    @property
    def holds(self) -> bool:
        return self.lhs >= self.rhs - 1e-12


def validate_prop2(joint: DiscreteJoint, classifier_z1, classifier_z2=None,
                   tol: float = 1e-12) -> Prop2Report:
    """Label-MI vs client-classification bound under the label-skew structure.

    Requires ``s`` independent of ``(z1, z2)`` given ``y``.
    """
    if set(joint.names) != {"s", "y", "z1", "z2"}:
        raise ConfigurationError("joint must be over (s, y, z1, z2)")
    leak = exact_mi(joint, "s", ("z1", "z2"), "y")
    if leak > tol:
        raise ConfigurationError(f"s is not independent of the views given y (I = {leak:.3g})")
    r1 = np.asarray(classifier_z1, float)
    r2 = r1 if classifier_z2 is None else np.asarray(classifier_z2, float)
    h_s = joint.entropy(("s",))
    lhs = exact_mi(joint, "z1", "y") + exact_mi(joint, "z2", "y")
    rhs = (expected_log_classifier(joint, r1, "s", "z1")
           + expected_log_classifier(joint, r2, "s", "z2") + 2 * h_s)
    return Prop2Report(lhs, rhs)


def format_report(checks: list[BoundCheck]) -> str:
    lines = [f"{'check':<44} {'true':>14} {'bound':>14} {'slack':>12}  result"]
    for c in checks:
        lines.append(f"{c.name:<44} {c.true_value:>14.8g} {c.bound_value:>14.8g} "
                     f"{c.slack:>12.4g}  {'PASS' if c.passed else 'FAIL'}")
    n_fail = sum(not c.passed for c in checks)
    lines.append(f"{len(checks) - n_fail}/{len(checks)} checks passed")
    return "\n".join(lines) + "\n"


def write_report(checks: list[BoundCheck], path) -> None:
    Path(path).write_text(format_report(checks))
