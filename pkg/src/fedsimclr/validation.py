"""Bound and gradient validation suite.

Every check becomes a named :class:`BoundCheck` row so that a failure points
at the offending family and instance. ``run_validation_suite`` is what the
``validate`` subcommand runs.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import gradcheck
from .mi_oracle import (BoundCheck, DiscreteJoint, chain_rule_residual, format_report,
                        optimal_critic, posterior, random_classifier, random_joint,
                        random_label_skew_joint, validate_infonce_bound, validate_prop2,
                        validate_uv_bounds, write_report)
from .numerics import ConfigurationError, derive_rng

CHAIN_RULE_TOL = 1e-10
EQUALITY_TOL = 1e-12
GRADIENT_TOL = 1e-4
GAP_STUDY_K = (2, 8, 32, 128)


@dataclass
class ValidationResult:
    checks: list[BoundCheck] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def failures(self) -> list[BoundCheck]:
        return [c for c in self.checks if not c.passed]

    def family(self, prefix: str) -> list[BoundCheck]:
        return [c for c in self.checks if c.name.startswith(prefix)]


def _random_sizes(rng, n_vars=3, lo=2, hi=4):
    return tuple(int(v) for v in rng.integers(lo, hi + 1, size=n_vars))


def chain_rule_checks(num_joints: int = 100, seed: int = 0) -> list[BoundCheck]:
    out = []
    for i in range(num_joints):
        rng = derive_rng(seed, "chain_rule", i)
        joint = random_joint(rng, _random_sizes(rng), concentration=float(rng.uniform(0.2, 2.0)))
        r = abs(chain_rule_residual(joint))
        out.append(BoundCheck(f"chain_rule[{i:03d}]", 0.0, r, CHAIN_RULE_TOL - r, r <= CHAIN_RULE_TOL))
    return out


def infonce_checks(num_critics: int = 50, num_samples: int = 2000, seed: int = 0) -> list[BoundCheck]:
    """Random critics on random joints, plus the optimal-critic gap study."""
    out = []
    for i in range(num_critics):
        rng = derive_rng(seed, "infonce", i)
        joint = random_joint(rng, _random_sizes(rng))
        n_s, n1, n2 = joint.probs.shape
        critic = rng.normal(0.0, float(rng.uniform(0.5, 3.0)), size=(n_s, n1, n2))
        k = int(rng.choice([1, 2, 4, 8, 16, 32]))
        est = validate_infonce_bound(joint, critic, k, num_samples, rng)
        slack = min(est.true_mi + 3 * est.stderr - est.bound, est.log_k - est.max_term)
        out.append(BoundCheck(f"infonce/random_critic[{i:02d}] K={k}", est.true_mi, est.bound,
                              slack, est.holds))

    rng = derive_rng(seed, "infonce", "optimal")
    joint = random_joint(rng, (2, 3, 3))
    critic = optimal_critic(joint)
    prev = None
    for k in GAP_STUDY_K:
        est = validate_infonce_bound(joint, critic, k, 2 * num_samples, derive_rng(seed, "gap", k))
        slack = min(est.true_mi + 3 * est.stderr - est.bound, est.log_k - est.max_term)
        out.append(BoundCheck(f"infonce/optimal_critic K={k}", est.true_mi, est.bound, slack, est.holds))
        if prev is not None:
            gap, prev_gap = est.true_mi - est.bound, prev.true_mi - prev.bound
            tol = 3 * math.hypot(est.stderr, prev.stderr)
            out.append(BoundCheck(f"infonce/optimal_gap_shrinks K={k}", prev_gap, gap,
                                  prev_gap + tol - gap, gap <= prev_gap + tol))
        prev = est
    # at the largest K the optimal critic should be nearly tight
    tol = 3 * prev.stderr
    gap = prev.true_mi - prev.bound
    out.append(BoundCheck(f"infonce/optimal_tight K={GAP_STUDY_K[-1]}", prev.true_mi, prev.bound,
                          tol - gap, gap <= tol))
    return out


def uv_checks(num_cases: int = 50, seed: int = 0) -> list[BoundCheck]:
    out = []
    for i in range(num_cases):
        rng = derive_rng(seed, "uv", i)
        joint = random_joint(rng, _random_sizes(rng), concentration=float(rng.uniform(0.2, 2.0)))
        n_s, n1, n2 = joint.probs.shape
        r1 = random_classifier(rng, n1, n_s, float(rng.uniform(0.3, 3.0)))
        r2 = random_classifier(rng, n2, n_s, float(rng.uniform(0.3, 3.0)))
        rep = validate_uv_bounds(joint, r1, r2)
        out.append(BoundCheck(f"uv_marginal/random[{i:02d}]", rep.i_z1_s, rep.marginal_bound,
                              rep.marginal_gap, rep.marginal_holds))
        out.append(BoundCheck(f"uv_conditional/random[{i:02d}]", rep.i_z1_s_given_z2, rep.conditional_bound,
                              rep.conditional_bound - rep.i_z1_s_given_z2, rep.conditional_holds))
        exact = validate_uv_bounds(joint, posterior(joint, "s", "z1"), r2)
        g = abs(exact.marginal_gap)
        out.append(BoundCheck(f"uv_marginal/posterior_equality[{i:02d}]", exact.i_z1_s,
                              exact.marginal_bound, EQUALITY_TOL - g, g <= EQUALITY_TOL))
    return out


def label_skew_checks(num_cases: int = 50, seed: int = 0) -> list[BoundCheck]:
    out = []
    for i in range(num_cases):
        rng = derive_rng(seed, "label_skew_bound", i)
        n_s, n_y, n_z = (int(v) for v in rng.integers(2, 5, size=3))
        joint = random_label_skew_joint(rng, n_s, n_y, n_z, float(rng.uniform(0.2, 2.0)))
        r1 = random_classifier(rng, n_z, n_s, float(rng.uniform(0.3, 3.0)))
        r2 = random_classifier(rng, n_z, n_s, float(rng.uniform(0.3, 3.0)))
        rep = validate_prop2(joint, r1, r2)
        out.append(BoundCheck(f"label_skew/random[{i:02d}]", rep.lhs, rep.rhs, rep.lhs - rep.rhs, rep.holds))

    # a single label with z1 copying s: the views leak s beyond y and must be refused
    leaky = np.zeros((2, 1, 2, 2))
    leaky[0, 0, 0, 0] = leaky[1, 0, 1, 0] = 0.5
    try:
        validate_prop2(DiscreteJoint(leaky, ("s", "y", "z1", "z2")), np.full((2, 2), 0.5))
        refused = False
    except ConfigurationError:
        refused = True
    out.append(BoundCheck("label_skew/precondition_enforced", 1.0, float(refused), float(refused) - 1.0,
                          refused))
    return out


def gradient_checks(num_seeds: int = 20, variants=gradcheck.GRADIENT_VARIANTS) -> list[BoundCheck]:
    out = []
    for label, errs in gradcheck.gradient_suite(num_seeds, variants).items():
        worst = max(errs)
        out.append(BoundCheck(f"gradient/{label}", 0.0, worst, GRADIENT_TOL - worst,
                              worst < GRADIENT_TOL))
    return out


def run_validation_suite(report_path=None, *, gradient_seeds: int = 20,
                         include_gradients: bool = True, seed: int = 0) -> ValidationResult:
    """Run every bound family and the gradient suite; optionally write the report."""
    res = ValidationResult()
    res.checks += chain_rule_checks(seed=seed)
    res.checks += infonce_checks(seed=seed)
    res.checks += uv_checks(seed=seed)
    res.checks += label_skew_checks(seed=seed)
    if include_gradients:
        res.checks += gradient_checks(gradient_seeds)
    if report_path is not None:
        write_report(res.checks, report_path)
    return res


__all__ = ["ValidationResult", "run_validation_suite", "chain_rule_checks", "infonce_checks",
           "uv_checks", "label_skew_checks", "gradient_checks", "format_report"]
