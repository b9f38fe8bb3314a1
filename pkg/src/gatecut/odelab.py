"""Continuous-time stability laboratory: integrates the coupled dynamics of
one block's weights and gate probabilities under the exact (enumerated)
expected cost, evaluates the block- and unit-level Lyapunov functions, and
empirically certifies convergence of trajectories started inside the
attraction regions.

The host is a frozen one-block network with a regression dataset small
enough for exact enumeration over its gate configurations. Conditional
costs and expected weight gradients are computed here with a vectorized
config-batch forward/backward, independent of the trainer's oracle code
path (the test suite cross-checks the two).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import complexity
from .complexity import ComplexityConsts, ThetaView
from .model import NetworkSpec, WeightSet, activate, activate_deriv

GATE_LIMIT = 16


@dataclass
class HostContext:
    """Immutable surroundings of the simulated subsystem: the one-block
    architecture, its frozen skip weights, the dataset, and the
    regularization constants."""

    spec: NetworkSpec
    weights: WeightSet  # only the skip matrix stays authoritative
    x: np.ndarray
    y: np.ndarray
    nu: float
    alpha: float
    beta: float
    lam: float
    consts: ComplexityConsts
    x_aug: np.ndarray = None
    skip_out: np.ndarray = None
    xi_b: np.ndarray = None  # (C,) config values of the block gate
    xi1: np.ndarray = None  # (C, K) config values of the unit gates

    def __post_init__(self):
        b = self.spec.blocks[0]
        if len(self.spec.blocks) != 1 or not b.nonlinear:
            raise ValueError("host must be a single nonlinear block")
        if b.gate_2:
            raise ValueError("host input gates are out of scope")
        if b.hidden + 1 > GATE_LIMIT:
            raise ValueError(f"host has too many gates ({b.hidden + 1} > {GATE_LIMIT})")
        if b.activation == "relu":
            import warnings

            warnings.warn("relu host violates the smoothness assumption of the theory")
        self.x = np.atleast_2d(np.asarray(self.x, dtype=np.float64))
        self.y = np.atleast_2d(np.asarray(self.y, dtype=np.float64))
        self.x_aug = np.concatenate([self.x, np.ones((self.x.shape[0], 1))], axis=1)
        bw = self.weights.blocks[0]
        if b.skip == "dense":
            self.skip_out = self.x_aug @ bw.w3.T
        else:
            self.skip_out = self.x
        k = b.hidden
        n_cfg = 2 ** (k + 1)
        bits = (np.arange(n_cfg)[:, None] >> np.arange(k + 1)[None, :]) & 1
        self.xi_b = bits[:, 0].astype(np.float64)
        self.xi1 = bits[:, 1:].astype(np.float64)

    @property
    def k(self) -> int:
        return self.spec.blocks[0].hidden


def make_host(
    spec: NetworkSpec,
    weights: WeightSet,
    x: np.ndarray,
    y: np.ndarray,
    nu: float,
    alpha: float,
    beta: float,
    lam: float,
) -> HostContext:
    return HostContext(spec, weights, x, y, nu, alpha, beta, lam, complexity.derive_consts(spec))


@dataclass
class SubsystemState:
    w1: np.ndarray  # (K, in+1), bias column included
    w2: np.ndarray  # (out, K)
    theta1: np.ndarray  # (K,)
    theta_b: float

    def copy(self) -> "SubsystemState":
        return SubsystemState(
            self.w1.copy(), self.w2.copy(), self.theta1.copy(), float(self.theta_b)
        )

    def clamp(self) -> "SubsystemState":
        np.clip(self.theta1, 0.0, 1.0, out=self.theta1)
        self.theta_b = min(max(self.theta_b, 0.0), 1.0)
        return self


def config_losses_and_grads(host: HostContext, state: SubsystemState):
    """Per-configuration data cost and weight gradients, vectorized over all
    binary gate configurations of the host block."""
    n = host.x.shape[0]
    act = host.spec.blocks[0].activation
    u = host.x_aug @ state.w1.T  # (N, K), shared across configs
    s = activate(act, u)
    ds = activate_deriv(act, u)
    gated = host.xi1[:, None, :] * s[None, :, :]  # (C, N, K)
    v = gated @ state.w2.T  # (C, N, out)
    out = host.xi_b[:, None, None] * v + host.skip_out[None, :, :]
    d = out - host.y[None, :, :]
    losses = 0.5 * np.sum(d * d, axis=(1, 2)) / n
    g = (host.xi_b[:, None, None] * d) / n  # dC/dv per config
    gw2 = np.einsum("cno,cnk->cok", g, gated)
    gu = np.einsum("cno,ok->cnk", g, state.w2) * host.xi1[:, None, :] * ds[None, :, :]
    gw1 = np.einsum("cnk,nj->ckj", gu, host.x_aug)
    return losses, gw1, gw2


def config_probs(host: HostContext, state: SubsystemState) -> np.ndarray:
    pb = np.where(host.xi_b > 0.5, state.theta_b, 1.0 - state.theta_b)
    p1 = np.where(host.xi1 > 0.5, state.theta1[None, :], 1.0 - state.theta1[None, :])
    return pb * np.prod(p1, axis=1)


def conditional_cost(
    host: HostContext, losses: np.ndarray, state: SubsystemState, cond: dict
) -> float:
    """E[C | fixed gate values]; cond maps "b" or unit index to 0/1."""
    w = np.ones(losses.size)
    if "b" in cond:
        w = w * (host.xi_b == cond["b"])
    else:
        w = w * np.where(host.xi_b > 0.5, state.theta_b, 1.0 - state.theta_b)
    for i in range(host.k):
        if i in cond:
            w = w * (host.xi1[:, i] == cond[i])
        else:
            w = w * np.where(host.xi1[:, i] > 0.5, state.theta1[i], 1.0 - state.theta1[i])
    return float(np.sum(w * losses))


def _view(host: HostContext, state: SubsystemState) -> ThetaView:
    b = host.spec.blocks[0]
    return ThetaView(
        np.array([state.theta_b]),
        np.array([float(np.sum(state.theta1))]),
        np.array([float(b.in_width), float(b.out_width)]),
    )


def cross_r(host: HostContext, state: SubsystemState) -> float:
    return complexity.cross_term(_view(host, state), host.consts, host.nu, host.beta, 0)


def cross_r_lower(host: HostContext) -> float:
    return complexity.cross_term_lower_bound(host.consts, host.nu, host.beta, 0)


def rhs(host: HostContext, state: SubsystemState) -> SubsystemState:
    """Time derivatives of the subsystem.

    Weights follow the negative expected data gradient plus decay; gate
    probabilities follow the negative exact cost differences plus the
    regularizer terms, with boundary projection holding them inside [0, 1].
    """
    losses, gw1, gw2 = config_losses_and_grads(host, state)
    probs = config_probs(host, state)
    dw1 = -np.einsum("c,ckj->kj", probs, gw1) - host.lam * state.w1
    dw2 = -np.einsum("c,cok->ok", probs, gw2) - host.lam * state.w2

    r = cross_r(host, state)
    dtheta1 = np.empty(host.k)
    for i in range(host.k):
        c1 = conditional_cost(host, losses, state, {"b": 1, i: 1})
        c0 = conditional_cost(host, losses, state, {"b": 1, i: 0})
        dtheta1[i] = -state.theta_b * (c1 - c0 + r)
    cb1 = conditional_cost(host, losses, state, {"b": 1})
    cb0 = conditional_cost(host, losses, state, {"b": 0})
    alpha_term = 0.0
    if host.consts.L_alpha:
        alpha_term = host.nu * host.alpha / host.consts.L_alpha
    dtheta_b = -(cb1 - cb0 + float(np.sum(state.theta1)) * r) - alpha_term

    # boundary projection: hold theta inside the box
    for i in range(host.k):
        if state.theta1[i] <= 0.0:
            dtheta1[i] = max(dtheta1[i], 0.0)
        elif state.theta1[i] >= 1.0:
            dtheta1[i] = min(dtheta1[i], 0.0)
    if state.theta_b <= 0.0:
        dtheta_b = max(dtheta_b, 0.0)
    elif state.theta_b >= 1.0:
        dtheta_b = min(dtheta_b, 0.0)
    return SubsystemState(dw1, dw2, dtheta1, dtheta_b)


def lyapunov_B(state: SubsystemState) -> float:
    return 0.5 * (
        float(np.sum(state.w1 * state.w1))
        + float(np.sum(state.w2 * state.w2))
        + state.theta_b**2
    )


def lyapunov_U(state: SubsystemState, i: int) -> float:
    return 0.5 * (
        float(np.sum(state.w1[i] * state.w1[i]))
        + float(np.sum(state.w2[:, i] * state.w2[:, i]))
        + state.theta1[i] ** 2
    )


@dataclass
class StabilityConsts:
    r: float
    r_m: float
    eta: float
    kappa: float

    @property
    def radius(self) -> float:
        return self.r_m / (4.0 * (self.eta + self.kappa))

    @property
    def threshold(self) -> float:
        return 0.5 * self.radius**2

    def validate(self) -> None:
        if not self.r >= self.r_m > 0:
            raise ValueError("need R >= R_m > 0")
        if self.eta <= 0 or self.kappa <= 0:
            raise ValueError("eta and kappa must be positive")


def estimate_eta_kappa(
    host: HostContext, samples: int, rng, scale: float = 1.0
) -> tuple[float, float]:
    """Empirical Lipschitz-type constants: eta bounds the per-unit weight
    gradient projected on the weights, kappa bounds the unit on/off cost
    difference, both maximized over random (weights, theta) draws.

    These are running maxima, hence lower estimates of the true constants;
    regions built from them are optimistic.
    """
    b = host.spec.blocks[0]
    eta = 0.0
    kappa = 0.0
    for _ in range(samples):
        w1 = scale * (rng.uniform(b.hidden * (b.in_width + 1)) * 2 - 1).reshape(
            b.hidden, b.in_width + 1
        )
        w2 = scale * (rng.uniform(b.out_width * b.hidden) * 2 - 1).reshape(
            b.out_width, b.hidden
        )
        state = SubsystemState(w1, w2, rng.uniform(b.hidden), float(rng.uniform(1)[0]))
        losses, gw1, gw2 = config_losses_and_grads(host, state)
        probs = config_probs(host, state)
        eg1 = np.einsum("c,ckj->kj", probs, gw1)
        eg2 = np.einsum("c,cok->ok", probs, gw2)
        for i in range(b.hidden):
            w = np.concatenate([w1[i], w2[:, i]])
            norm = float(np.linalg.norm(w))
            if norm == 0.0:
                continue
            g = np.concatenate([eg1[i], eg2[:, i]])
            eta = max(eta, abs(float(w @ g)) / norm)
            c1 = conditional_cost(host, losses, state, {"b": 1, i: 1})
            c0 = conditional_cost(host, losses, state, {"b": 1, i: 0})
            denom = float(np.linalg.norm(w1[i]) + np.linalg.norm(w2[:, i]))
            if denom > 0.0:
                kappa = max(kappa, abs(c1 - c0) / denom)
    return eta, kappa


def stability_consts(host: HostContext, eta: float, kappa: float) -> StabilityConsts:
    state = SubsystemState(
        np.zeros((host.k, host.spec.blocks[0].in_width + 1)),
        np.zeros((host.spec.blocks[0].out_width, host.k)),
        np.ones(host.k),
        1.0,
    )
    sc = StabilityConsts(cross_r(host, state), cross_r_lower(host), eta, kappa)
    sc.validate()
    return sc


def in_region(
    state: SubsystemState, sc: StabilityConsts, which: str = "B", i: int = 0
) -> bool:
    if which == "B":
        return lyapunov_B(state) <= sc.threshold
    if which == "U":
        return lyapunov_U(state, i) <= sc.threshold
    raise ValueError(f"unknown region {which!r}")


@dataclass
class Trajectory:
    t: np.ndarray
    theta_b: np.ndarray
    theta1: np.ndarray  # (T, K)
    lam_b: np.ndarray
    lam_u: np.ndarray  # (T, K)
    w1_norm: np.ndarray
    w2_norm: np.ndarray
    final: SubsystemState
    blew_up: bool = False

    def to_csv(self) -> str:
        k = self.theta1.shape[1]
        cols = ["t", "lambda_b"] + [f"lambda_u{i}" for i in range(k)]
        cols += ["theta_b"] + [f"theta1_{i}" for i in range(k)] + ["w1_norm", "w2_norm"]
        lines = [",".join(cols)]
        for j in range(self.t.size):
            row = [repr(float(self.t[j])), repr(float(self.lam_b[j]))]
            row += [repr(float(v)) for v in self.lam_u[j]]
            row += [repr(float(self.theta_b[j]))]
            row += [repr(float(v)) for v in self.theta1[j]]
            row += [repr(float(self.w1_norm[j])), repr(float(self.w2_norm[j]))]
            lines.append(",".join(row))
        return "\n".join(lines) + "\n"


BLOWUP_NORM = 1e6


def integrate(
    host: HostContext,
    state0: SubsystemState,
    dt: float,
    t_end: float,
    method: str = "rk4",
) -> Trajectory:
    """Fixed-step integration with theta clamped to [0, 1] after each step."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    if method not in ("euler", "rk4"):
        raise ValueError(f"unknown method {method!r}")
    steps = int(round(t_end / dt))
    state = state0.copy().clamp()
    k = host.k
    t = np.empty(steps + 1)
    tb = np.empty(steps + 1)
    t1 = np.empty((steps + 1, k))
    lb = np.empty(steps + 1)
    lu = np.empty((steps + 1, k))
    n1 = np.empty(steps + 1)
    n2 = np.empty(steps + 1)
    blew_up = False

    def record(j, s):
        t[j] = j * dt
        tb[j] = s.theta_b
        t1[j] = s.theta1
        lb[j] = lyapunov_B(s)
        lu[j] = [lyapunov_U(s, i) for i in range(k)]
        n1[j] = np.linalg.norm(s.w1)
        n2[j] = np.linalg.norm(s.w2)

    record(0, state)
    last = 0
    for j in range(1, steps + 1):
        if method == "euler":
            d = rhs(host, state)
            state.w1 += dt * d.w1
            state.w2 += dt * d.w2
            state.theta1 += dt * d.theta1
            state.theta_b += dt * d.theta_b
        else:
            k1 = rhs(host, state)
            s2 = _axpy(state, k1, 0.5 * dt)
            k2 = rhs(host, s2)
            s3 = _axpy(state, k2, 0.5 * dt)
            k3 = rhs(host, s3)
            s4 = _axpy(state, k3, dt)
            k4 = rhs(host, s4)
            state.w1 += dt / 6.0 * (k1.w1 + 2 * k2.w1 + 2 * k3.w1 + k4.w1)
            state.w2 += dt / 6.0 * (k1.w2 + 2 * k2.w2 + 2 * k3.w2 + k4.w2)
            state.theta1 += dt / 6.0 * (k1.theta1 + 2 * k2.theta1 + 2 * k3.theta1 + k4.theta1)
            state.theta_b += dt / 6.0 * (
                k1.theta_b + 2 * k2.theta_b + 2 * k3.theta_b + k4.theta_b
            )
        state.clamp()
        record(j, state)
        last = j
        if n1[j] + n2[j] > BLOWUP_NORM:
            blew_up = True
            break
    end = last + 1
    return Trajectory(
        t[:end], tb[:end], t1[:end], lb[:end], lu[:end], n1[:end], n2[:end], state, blew_up
    )


def _axpy(s: SubsystemState, d: SubsystemState, h: float) -> SubsystemState:
    out = SubsystemState(
        s.w1 + h * d.w1, s.w2 + h * d.w2, s.theta1 + h * d.theta1, s.theta_b + h * d.theta_b
    )
    return out.clamp()


@dataclass
class Verdict:
    status: str  # PASS | FAIL | OUT_OF_SCOPE
    which: str
    unit: int
    max_lyapunov_increase: float
    terminal_w_norm: float
    terminal_gate_product: float
    vanished_factor: str
    trajectory: Trajectory


def certify(
    host: HostContext,
    state0: SubsystemState,
    sc: StabilityConsts,
    dt: float = 1e-2,
    t_end: float = 25.0,
    tol: float = 1e-3,
    method: str = "rk4",
    which: str = "B",
    unit: int = 0,
) -> Verdict:
    """Empirical convergence check of one trajectory.

    PASS means the Lyapunov value never increased beyond integrator slack
    and the terminal state reached the invariant set within tol. Starting
    outside the attraction region yields OUT_OF_SCOPE (the theory makes no
    claim there), never FAIL.
    """
    inside = in_region(state0, sc, which, unit)
    traj = integrate(host, state0, dt, t_end, method)
    f = traj.final
    if which == "B":
        lam = traj.lam_b
        w_norm = max(float(np.linalg.norm(f.w1)), float(np.linalg.norm(f.w2)))
        factors = {"theta1_mass": float(np.sum(f.theta1)), "theta_b": f.theta_b}
    else:
        lam = traj.lam_u[:, unit]
        w_norm = max(
            float(np.linalg.norm(f.w1[unit])), float(np.linalg.norm(f.w2[:, unit]))
        )
        factors = {"theta1_i": float(f.theta1[unit]), "theta_b": f.theta_b}
    increases = np.diff(lam)
    max_inc = float(increases.max()) if increases.size else 0.0
    slack = max(10.0 * dt * dt if method == "euler" else 10.0 * dt**4, 1e-12)
    gate_product = float(np.prod(list(factors.values())))
    vanished = min(factors, key=factors.get)
    converged = (
        not traj.blew_up
        and max_inc <= slack
        and w_norm <= tol
        and min(factors.values()) <= tol
    )
    if not inside:
        status = "OUT_OF_SCOPE"
    else:
        status = "PASS" if converged else "FAIL"
    return Verdict(status, which, unit, max_inc, w_norm, gate_product, vanished, traj)


def random_state_in_region(
    host: HostContext, sc: StabilityConsts, rng, which: str = "B", unit: int = 0
) -> SubsystemState:
    """Draw a random subsystem state with Lyapunov value uniformly below the
    region threshold (components scaled onto a random sublevel set)."""
    b = host.spec.blocks[0]
    w1 = (rng.uniform(b.hidden * (b.in_width + 1)) * 2 - 1).reshape(b.hidden, b.in_width + 1)
    w2 = (rng.uniform(b.out_width * b.hidden) * 2 - 1).reshape(b.out_width, b.hidden)
    theta1 = rng.uniform(b.hidden)
    theta_b = float(rng.uniform(1)[0])
    state = SubsystemState(w1, w2, theta1, theta_b)
    target = float(rng.uniform(1)[0]) * sc.threshold
    lam = lyapunov_B(state) if which == "B" else lyapunov_U(state, unit)
    if lam > 0:
        c = math.sqrt(target / lam)
        if which == "B":
            state.w1 *= c
            state.w2 *= c
            state.theta_b *= c
        else:
            state.w1[unit] *= c
            state.w2[:, unit] *= c
            state.theta1[unit] *= c
    return state.clamp()
