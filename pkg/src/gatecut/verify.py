"""One-shot invariant battery: re-runs the analytic cross-checks that anchor
the engine (gradient correctness, multilinearity, vertex optimality of the
gate objective, masked/compacted equivalence, the schedule matching
identity, and the closed-form gate math) on freshly drawn random instances.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import complexity
from .gates import GateState, j_flat, j_penalty, pi_star, flattening_pdf
from .model import (
    BlockSpec,
    NetworkSpec,
    forward,
    init_weights,
    loss,
)
from .numerics import Rng, finite_diff_grad
from .trainer import (
    _mean_sample,
    compact,
    prune_pass,
    theta_grad_exact_all,
    vertex_losses,
    gate_probs,
    expected_cost,
    vertex_verify,
)


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str


def _tiny_instance(rng: Rng, theta_lo: float = 0.2, theta_hi: float = 0.9):
    spec = NetworkSpec(
        [
            BlockSpec(2, 2, 2, activation="tanh", skip="dense", gate_2=False),
            BlockSpec(2, 2, 2, activation="tanh", skip="identity", gate_2=True),
        ],
        task="regression",
    )
    spec.validate()
    w = init_weights(spec, rng)
    state = GateState.from_spec(spec, 0.5)
    for g in state.blocks:
        if g.theta_b is not None:
            g.theta_b = theta_lo + (theta_hi - theta_lo) * float(rng.uniform(1)[0])
        if g.theta1 is not None:
            g.theta1[:] = theta_lo + (theta_hi - theta_lo) * rng.uniform(g.theta1.size)
        if g.theta2 is not None:
            g.theta2[:] = theta_lo + (theta_hi - theta_lo) * rng.uniform(g.theta2.size)
    x = rng.standard_normal(2 * 12).reshape(12, 2)
    y = rng.standard_normal(2 * 12).reshape(12, 2)
    return spec, w, state, x, y


def check_gate_closed_forms(rng: Rng) -> CheckResult:
    """pi_star/j_flat vs brute-force grid minimization; pdf normalization."""
    worst_gap = 0.0
    grid = np.linspace(1e-3, 1.0 - 1e-3, 999)
    for _ in range(50):
        theta = float(rng.uniform(1)[0])
        gamma = 0.05 + 0.9 * float(rng.uniform(1)[0])
        vals = [j_penalty(p, theta, gamma) for p in grid]
        best = grid[int(np.argmin(vals))]
        worst_gap = max(worst_gap, abs(best - pi_star(theta, gamma)))
        ps = pi_star(theta, gamma)
        if 0.0 < ps < 1.0 and abs(j_penalty(ps, theta, gamma) - j_flat(theta, gamma)) > 1e-9:
            return CheckResult("gate closed forms", False, "collapsed penalty mismatch")
        if min(vals) < j_flat(theta, gamma) - 1e-12:
            return CheckResult("gate closed forms", False, "grid point beat the closed form")
    quad_err = 0.0
    for _ in range(20):
        gamma = 0.05 + 0.9 * float(rng.uniform(1)[0])
        ps = np.linspace(0.0, 1.0, 20001)
        dens = np.array([flattening_pdf(p, gamma) for p in ps])
        quad_err = max(quad_err, abs(np.trapezoid(dens, ps) - 1.0))
    ok = worst_gap <= 2e-3 and quad_err <= 1e-6
    return CheckResult(
        "gate closed forms", ok, f"grid gap {worst_gap:.2e}, quadrature error {quad_err:.2e}"
    )


def check_weight_gradients(rng: Rng) -> CheckResult:
    """Backprop weight gradients vs central finite differences."""
    from .model import backward

    worst = 0.0
    for _ in range(3):
        spec, w, state, x, y = _tiny_instance(rng)
        xi = _mean_sample(state, spec)  # real-valued multipliers stress the chain rule
        yhat, trace = forward(spec, w, xi, x)
        grads = backward(spec, w, trace, y)
        for l, bw in enumerate(w.blocks):
            for name in ("w1", "w2", "w3"):
                mat = getattr(bw, name)
                if mat is None:
                    continue

                def f(v, mat=mat, name=name, l=l):
                    saved = mat.copy()
                    mat[:] = v.reshape(mat.shape)
                    out, _ = forward(spec, w, xi, x)
                    mat[:] = saved
                    return loss(out, y, spec.task)

                fd = finite_diff_grad(f, mat.ravel().copy(), 1e-5).reshape(mat.shape)
                an = getattr(grads[l], name)
                denom = max(float(np.abs(fd).max()), 1e-8)
                worst = max(worst, float(np.abs(fd - an).max()) / denom)
    return CheckResult("weight gradients", worst <= 1e-5, f"max rel err {worst:.2e}")


def check_exact_theta_gradients(rng: Rng) -> CheckResult:
    """Enumerated cost derivative vs finite differences of the enumerated
    expectation (exact: the expectation is affine in each probability)."""
    worst = 0.0
    for _ in range(3):
        spec, w, state, x, y = _tiny_instance(rng)
        exact = theta_grad_exact_all(spec, w, state, x, y)
        ids, losses = vertex_losses(spec, w, state, x, y)
        p0 = gate_probs(state, ids)
        fd = finite_diff_grad(lambda p: expected_cost(losses, p), p0, 1e-5)
        for j, gid in enumerate(ids):
            worst = max(worst, abs(exact[gid] - fd[j]))
    return CheckResult("exact gate gradients", worst <= 1e-9, f"max abs err {worst:.2e}")


def check_index_gradients(rng: Rng) -> CheckResult:
    """Analytic complexity-index gradients vs finite differences."""
    spec, w, state, x, y = _tiny_instance(rng)
    consts = complexity.derive_consts(spec)
    alpha, beta = 0.3, 0.6
    worst = 0.0
    view = complexity.theta_view(state, spec)
    reg = complexity.grad_jfp(view, consts, alpha, beta)
    for l, g in enumerate(state.blocks):
        if g.theta_b is not None:

            def fb(v, l=l):
                vv = complexity.theta_view(state, spec)
                vv.tb[l] = v[0]
                return complexity.j_fp_view(vv, consts, alpha, beta)

            fd = finite_diff_grad(fb, np.array([g.theta_b]))[0]
            worst = max(worst, abs(fd - reg.db[l]))
        if g.theta1 is not None:

            def f1(v, l=l):
                vv = complexity.theta_view(state, spec)
                vv.n1[l] = float(np.sum(v))
                return complexity.j_fp_view(vv, consts, alpha, beta)

            fd = finite_diff_grad(f1, g.theta1.copy())
            worst = max(worst, float(np.abs(fd - reg.d1[l]).max()))
        if g.theta2 is not None:

            def f2(v, l=l):
                vv = complexity.theta_view(state, spec)
                vv.n2[l] = float(np.sum(v))
                return complexity.j_fp_view(vv, consts, alpha, beta)

            fd = finite_diff_grad(f2, g.theta2.copy())
            worst = max(worst, float(np.abs(fd - reg.d2[l]).max()))
    return CheckResult("index gradients", worst <= 1e-8, f"max abs err {worst:.2e}")


def check_vertex_optimum(rng: Rng) -> CheckResult:
    """The full gate objective attains its minimum at a binary vertex."""
    worst_resid = 0.0
    for _ in range(5):
        spec, w, state, x, y = _tiny_instance(rng)
        consts = complexity.derive_consts(spec)
        rep = vertex_verify(
            spec, w, state, x, y, consts, 0.1, 0.2, 0.5, 1e-3, 50, rng
        )
        worst_resid = max(worst_resid, rep["midpoint_residual"])
        if not rep["deterministic_optimum"]:
            return CheckResult("vertex optimum", False, "interior point beat every vertex")
    ok = worst_resid <= 1e-10
    return CheckResult("vertex optimum", ok, f"midpoint residual {worst_resid:.2e}")


def check_schedule_identity(rng: Rng) -> CheckResult:
    """The per-block regularization strengths reproduce the weighted
    complexity index exactly.

    Calls complexity.gamma_schedule through the module attribute so a
    fault-injected replacement is exercised by this check.
    """
    worst = 0.0
    for _ in range(50):
        spec, w, state, x, y = _tiny_instance(rng, theta_lo=0.05, theta_hi=0.95)
        consts = complexity.derive_consts(spec)
        nu = 0.05 + float(rng.uniform(1)[0])
        alpha = float(rng.uniform(1)[0])
        beta = float(rng.uniform(1)[0])
        n = 1 + int(rng.uniform(1)[0] * 1e4)
        view = complexity.theta_view(state, spec)
        sched = complexity.gamma_schedule(view, consts, nu, alpha, beta, n)
        worst = max(
            worst,
            complexity.schedule_identity_gap(view, consts, sched, nu, alpha, beta, n),
        )
    return CheckResult("schedule identity", worst <= 1e-10, f"max rel gap {worst:.2e}")


def check_masked_compact_equivalence(rng: Rng) -> CheckResult:
    """Physically compacted network equals the masked network."""
    spec, w, state, x, y = _tiny_instance(rng)
    # drive some structures under the tolerance and prune
    state.blocks[0].theta1[0] = 0.01
    state.blocks[1].theta2[1] = 0.02
    prune_pass(spec, w, state, 0.1, epoch=1)
    cspec, cw, cstate = compact(spec, w, state)
    ym, _ = forward(spec, w, _mean_sample(state, spec), x)
    yc, _ = forward(cspec, cw, _mean_sample(cstate, cspec), x)
    diff = float(np.abs(ym - yc).max())
    return CheckResult("masked/compacted equivalence", diff <= 1e-6, f"max abs diff {diff:.2e}")


def check_cross_term_bound(rng: Rng) -> CheckResult:
    """R >= R_m > 0 for random gate configurations."""
    ok = True
    margin = math.inf
    for _ in range(20):
        spec, w, state, x, y = _tiny_instance(rng)
        consts = complexity.derive_consts(spec)
        nu = 0.05 + float(rng.uniform(1)[0])
        beta = float(rng.uniform(1)[0])
        view = complexity.theta_view(state, spec)
        for l, b in enumerate(spec.blocks):
            if not b.nonlinear:
                continue
            r = complexity.cross_term(view, consts, nu, beta, l)
            rm = complexity.cross_term_lower_bound(consts, nu, beta, l)
            margin = min(margin, r - rm, rm)
            ok = ok and r >= rm > 0
    return CheckResult("pruning pressure bound", ok, f"min margin {margin:.2e}")


ALL_CHECKS = (
    check_gate_closed_forms,
    check_weight_gradients,
    check_exact_theta_gradients,
    check_index_gradients,
    check_vertex_optimum,
    check_schedule_identity,
    check_masked_compact_equivalence,
    check_cross_term_bound,
)


def run_all(seed: int = 0) -> list[CheckResult]:
    results = []
    for i, check in enumerate(ALL_CHECKS):
        results.append(check(Rng(seed + 1000 * i)))
    return results
