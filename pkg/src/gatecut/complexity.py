"""Complexity-aware regularization: per-block expected FLOPS and parameter
counts, the weighted complexity index, the automatic per-block gamma
schedule, analytic gradients of the index, baseline totals, and the
pruning-ratio metrics.

Conventions (documented in every report header): one multiply-accumulate is
one FLOP; dense layers use unit factors with f_a = p_a = 1 for the hidden
bias and activation; conv layers use f = H*W*K^2 and p = K^2 with the
output spatial size, no conv biases, and BN / pooling excluded. Middle
convs of M>1 descriptor blocks are folded into the f_a/p_a factors, which
is exact for the all-ones baseline the analyzer reports.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .gates import GateState
from .model import NetworkSpec


@dataclass
class BlockConsts:
    f1: float
    f2: float
    f3: float
    fa: float
    p1: float
    p2: float
    p3: float
    pa: float
    in_width: int
    hidden: int
    out_width: int
    nonlinear: bool
    m: int
    in_alpha: bool
    layer_count: int  # weight layers this block contributes when alive


@dataclass
class ComplexityConsts:
    blocks: list[BlockConsts]
    F: float
    P: float
    L: int
    L_alpha: int


@dataclass
class ThetaView:
    """Scalar summary of a gate configuration: per-block theta_B, ||theta1||_1
    and ||theta2^l||_1 with boundary conventions applied (n2 has L+1 entries,
    the last being the ungated output width)."""

    tb: np.ndarray
    n1: np.ndarray
    n2: np.ndarray


@dataclass
class GammaSchedule:
    log_gamma_b: np.ndarray
    log_gamma1: np.ndarray
    log_gamma2: np.ndarray


def derive_consts(spec: NetworkSpec) -> ComplexityConsts:
    spec.validate()
    blocks = []
    for b in spec.blocks:
        if b.kind == "dense":
            if b.nonlinear:
                f1 = f2 = fa = 1.0
                p1 = p2 = pa = 1.0
            else:
                f1 = f2 = fa = p1 = p2 = pa = 0.0
            f3 = p3 = 1.0 if b.skip == "dense" else 0.0
        else:
            layers = b.conv.layers
            if b.nonlinear:
                k1, h1, w1 = layers[0]
                km, hm, wm = layers[-1]
                f1, p1 = float(k1 * k1 * h1 * w1), float(k1 * k1)
                f2, p2 = float(km * km * hm * wm), float(km * km)
                fa = sum(float(k * k * h * w) * b.hidden for k, h, w in layers[1:-1])
                pa = sum(float(k * k) * b.hidden for k, _, _ in layers[1:-1])
            else:
                f1 = f2 = fa = p1 = p2 = pa = 0.0
            if b.conv.skip is not None:
                ks, hs, ws = b.conv.skip
                f3, p3 = float(ks * ks * hs * ws), float(ks * ks)
            else:
                f3 = p3 = 0.0
        if b.nonlinear:
            layer_count = b.m + 1
        elif b.skip == "identity" or (b.kind == "conv" and b.conv.skip is None):
            layer_count = 0
        else:
            layer_count = 1
        blocks.append(
            BlockConsts(
                f1,
                f2,
                f3,
                fa,
                p1,
                p2,
                p3,
                pa,
                b.in_width,
                b.hidden,
                b.out_width,
                b.nonlinear,
                b.m,
                in_alpha=b.nonlinear,
                layer_count=layer_count,
            )
        )
    consts = ComplexityConsts(blocks, 0.0, 0.0, len(blocks), sum(c.in_alpha for c in blocks))
    ones = ones_view(spec)
    consts.F = sum(j_f_block_view(ones, consts, l) for l in range(consts.L))
    consts.P = sum(j_p_block_view(ones, consts, l) for l in range(consts.L))
    if consts.F <= 0 or consts.P <= 0:
        raise ValueError("network has zero baseline FLOPS or parameters")
    return consts


def ones_view(spec: NetworkSpec) -> ThetaView:
    L = len(spec.blocks)
    tb = np.array([1.0 if b.nonlinear else 0.0 for b in spec.blocks])
    n1 = np.array([float(b.hidden) if b.nonlinear else 0.0 for b in spec.blocks])
    n2 = np.empty(L + 1)
    for l, b in enumerate(spec.blocks):
        n2[l] = float(np.sum(b.input_mask)) if b.input_mask is not None else float(b.in_width)
    n2[L] = float(spec.blocks[-1].out_width)
    return ThetaView(tb, n1, n2)


def theta_view(state: GateState, spec: NetworkSpec) -> ThetaView:
    L = len(spec.blocks)
    tb = np.empty(L)
    n1 = np.empty(L)
    n2 = np.empty(L + 1)
    for l, b in enumerate(spec.blocks):
        tb[l] = state.theta_b_eff(l)
        t1 = state.theta1_eff(l)
        n1[l] = float(np.sum(t1)) if t1 is not None else (float(b.hidden) if b.nonlinear else 0.0)
        t2 = state.theta2_eff(l)
        vec = t2 if t2 is not None else np.ones(b.in_width)
        if b.input_mask is not None:
            vec = vec * b.input_mask
        n2[l] = float(np.sum(vec))
    n2[L] = float(spec.blocks[-1].out_width)
    return ThetaView(tb, n1, n2)


def alive_view(state: GateState, spec: NetworkSpec) -> ThetaView:
    """Binary view: surviving structures count 1, pruned ones 0. This is the
    accounting the pruning-ratio metrics use."""
    L = len(spec.blocks)
    tb = np.empty(L)
    n1 = np.empty(L)
    n2 = np.empty(L + 1)
    for l, b in enumerate(spec.blocks):
        g = state.blocks[l]
        if g.theta_b is None:
            tb[l] = g.const_b
        else:
            tb[l] = 1.0 if g.alive_b else 0.0
        if g.theta1 is None:
            n1[l] = float(b.hidden) if b.nonlinear else 0.0
        else:
            n1[l] = float(np.sum(g.alive1))
        if g.theta2 is None:
            vec = np.ones(b.in_width)
        else:
            vec = g.alive2.astype(np.float64)
        if b.input_mask is not None:
            vec = vec * b.input_mask
        n2[l] = float(np.sum(vec))
    n2[L] = float(spec.blocks[-1].out_width)
    return ThetaView(tb, n1, n2)


def j_f_block_view(view: ThetaView, consts: ComplexityConsts, l: int) -> float:
    c = consts.blocks[l]
    return c.fa * view.tb[l] * view.n1[l] + _bilinear(view, c, l, c.f1, c.f2, c.f3)


def j_p_block_view(view: ThetaView, consts: ComplexityConsts, l: int) -> float:
    c = consts.blocks[l]
    return c.pa * view.tb[l] * view.n1[l] + _bilinear(view, c, l, c.p1, c.p2, c.p3)


def _bilinear(view: ThetaView, c: BlockConsts, l: int, c1: float, c2: float, c3: float) -> float:
    return (
        view.tb[l] * view.n1[l] * (c1 * view.n2[l] + c2 * view.n2[l + 1])
        + c3 * view.n2[l] * view.n2[l + 1]
    )


def j_f_block(state: GateState, spec: NetworkSpec, consts: ComplexityConsts, l: int) -> float:
    return j_f_block_view(theta_view(state, spec), consts, l)


def j_p_block(state: GateState, spec: NetworkSpec, consts: ComplexityConsts, l: int) -> float:
    return j_p_block_view(theta_view(state, spec), consts, l)


def j_fp_view(view: ThetaView, consts: ComplexityConsts, alpha: float, beta: float) -> float:
    if alpha < 0:
        raise ValueError("alpha must be >= 0")
    if beta > 1.0 or beta < 0.0:
        warnings.warn(f"beta={beta} outside [0,1]; the index may lose monotonicity")
    jf = sum(j_f_block_view(view, consts, l) for l in range(consts.L))
    jp = sum(j_p_block_view(view, consts, l) for l in range(consts.L))
    layer_term = 0.0
    if consts.L_alpha:
        layer_term = (
            sum(view.tb[l] for l in range(consts.L) if consts.blocks[l].in_alpha)
            / consts.L_alpha
        )
    return beta * jf / consts.F + (1.0 - beta) * jp / consts.P + alpha * layer_term


def j_fp(
    state: GateState, spec: NetworkSpec, consts: ComplexityConsts, alpha: float, beta: float
) -> float:
    return j_fp_view(theta_view(state, spec), consts, alpha, beta)


def unit_reg_density(view: ThetaView, consts: ComplexityConsts, beta: float, l: int) -> float:
    """d J_FP / d theta1_i for block l divided by theta_B: the per-unit
    regularization weight (f1 n2 + fa + f2 n2') b/F + (p1 n2 + pa + p2 n2') (1-b)/P."""
    c = consts.blocks[l]
    return (
        beta / consts.F * (c.f1 * view.n2[l] + c.fa + c.f2 * view.n2[l + 1])
        + (1.0 - beta) / consts.P * (c.p1 * view.n2[l] + c.pa + c.p2 * view.n2[l + 1])
    )


def cross_term(
    view: ThetaView, consts: ComplexityConsts, nu: float, beta: float, l: int
) -> float:
    """R = nu * d^2 J_FP / (d theta_B d theta1_i) for block l."""
    return nu * unit_reg_density(view, consts, beta, l)


def cross_term_lower_bound(consts: ComplexityConsts, nu: float, beta: float, l: int) -> float:
    """R_m = nu (fa * beta / F + pa * (1-beta) / P), positive whenever nu > 0
    and beta is in [0,1] for blocks with bias/activation cost."""
    c = consts.blocks[l]
    return nu * (c.fa * beta / consts.F + c.pa * (1.0 - beta) / consts.P)


@dataclass
class JfpGrads:
    """Per-block partials of J_FP. d1 and d2 are scalars: the index depends
    on theta1/theta2 only through their l1 norms, so all coordinates of a
    block share the same partial."""

    db: np.ndarray
    d1: np.ndarray
    d2: np.ndarray


def grad_jfp(
    view: ThetaView, consts: ComplexityConsts, alpha: float, beta: float
) -> JfpGrads:
    L = consts.L
    db = np.zeros(L)
    d1 = np.zeros(L)
    d2 = np.zeros(L)
    for l in range(L):
        c = consts.blocks[l]
        fsum = c.f1 * view.n2[l] + c.fa + c.f2 * view.n2[l + 1]
        psum = c.p1 * view.n2[l] + c.pa + c.p2 * view.n2[l + 1]
        db[l] = view.n1[l] * (beta / consts.F * fsum + (1.0 - beta) / consts.P * psum)
        if c.in_alpha and consts.L_alpha:
            db[l] += alpha / consts.L_alpha
        d1[l] = view.tb[l] * (beta / consts.F * fsum + (1.0 - beta) / consts.P * psum)
        # theta2^l appears in block l (f1, f3 side) and in block l-1 (f2, f3 side)
        d2[l] = beta / consts.F * (
            view.tb[l] * c.f1 * view.n1[l] + c.f3 * view.n2[l + 1]
        ) + (1.0 - beta) / consts.P * (
            view.tb[l] * c.p1 * view.n1[l] + c.p3 * view.n2[l + 1]
        )
        if l > 0:
            cp = consts.blocks[l - 1]
            d2[l] += beta / consts.F * (
                view.tb[l - 1] * cp.f2 * view.n1[l - 1] + cp.f3 * view.n2[l - 1]
            ) + (1.0 - beta) / consts.P * (
                view.tb[l - 1] * cp.p2 * view.n1[l - 1] + cp.p3 * view.n2[l - 1]
            )
    return JfpGrads(db, d1, d2)


def gamma_schedule(
    view: ThetaView,
    consts: ComplexityConsts,
    nu: float,
    alpha: float,
    beta: float,
    n_samples: int,
) -> GammaSchedule:
    """Per-block regularization strengths that make the statistical objective
    match nu * J_FP.

    The layer strength is -nu * alpha * N / L_alpha: the 1/L_alpha carries the
    layer-count normalization of the index, so the matching identity holds
    exactly for any depth.
    """
    if nu <= 0:
        raise ValueError("nu must be positive")
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    L = consts.L
    lg_b = np.zeros(L)
    lg1 = np.zeros(L)
    lg2 = np.zeros(L)
    for l in range(L):
        c = consts.blocks[l]
        if c.in_alpha and consts.L_alpha:
            lg_b[l] = -nu * alpha * n_samples / consts.L_alpha
        lg1[l] = -nu * view.tb[l] * unit_reg_density(view, consts, beta, l) * n_samples
        lg2[l] = -nu * (
            beta / consts.F * c.f3 * view.n2[l + 1]
            + (1.0 - beta) / consts.P * c.p3 * view.n2[l + 1]
        ) * n_samples
    return GammaSchedule(lg_b, lg1, lg2)


def schedule_identity_gap(
    view: ThetaView,
    consts: ComplexityConsts,
    sched: GammaSchedule,
    nu: float,
    alpha: float,
    beta: float,
    n_samples: int,
) -> float:
    """Relative gap between nu*J_FP and the statistical-form regularizer
    -(1/N) sum(theta * log gamma). Zero up to round-off by construction."""
    lhs = nu * j_fp_view(view, consts, alpha, beta)
    rhs = 0.0
    for l in range(consts.L):
        rhs += view.tb[l] * sched.log_gamma_b[l]
        rhs += view.n1[l] * sched.log_gamma1[l]
        rhs += view.n2[l] * sched.log_gamma2[l]
    rhs = -rhs / n_samples
    scale = max(abs(lhs), abs(rhs), 1e-300)
    return abs(lhs - rhs) / scale


def ratios(
    consts: ComplexityConsts, after: ThetaView
) -> tuple[float, float, int]:
    """FLOPS and parameter pruning ratios plus surviving weight-layer count
    for a binary (alive/pruned) configuration."""
    f_after = sum(j_f_block_view(after, consts, l) for l in range(consts.L))
    p_after = sum(j_p_block_view(after, consts, l) for l in range(consts.L))
    layers = 0
    for l, c in enumerate(consts.blocks):
        if c.nonlinear:
            if after.tb[l] > 0.0 and after.n1[l] > 0.0:
                layers += c.layer_count
        else:
            layers += c.layer_count
    return 1.0 - f_after / consts.F, 1.0 - p_after / consts.P, layers


@dataclass
class BlockReport:
    index: int
    kind: str
    m: int
    in_width: int
    hidden: int
    out_width: int
    flops: float
    params: float


@dataclass
class ComplexityReport:
    blocks: list[BlockReport]
    total_flops: float
    total_params: float
    layer_count: int
    warning: str | None = None

    def to_csv(self) -> str:
        lines = ["block,kind,m,in,hidden,out,flops,params"]
        for b in self.blocks:
            lines.append(
                f"{b.index},{b.kind},{b.m},{b.in_width},{b.hidden},{b.out_width},"
                f"{b.flops:.0f},{b.params:.0f}"
            )
        lines.append(f"total,,,,,,{self.total_flops:.0f},{self.total_params:.0f}")
        return "\n".join(lines) + "\n"

    def to_text(self) -> str:
        rows = [
            "FLOPS convention: 1 multiply-accumulate = 1 FLOP; conv f = H*W*K^2 at the",
            "output spatial size; BN and pooling excluded; dense bias+activation = 1.",
            "",
            f"{'block':>5} {'kind':>6} {'in':>6} {'hidden':>6} {'out':>6} "
            f"{'FLOPS':>14} {'params':>14}",
        ]
        for b in self.blocks:
            rows.append(
                f"{b.index:>5} {b.kind:>6} {b.in_width:>6} {b.hidden:>6} {b.out_width:>6} "
                f"{b.flops:>14.0f} {b.params:>14.0f}"
            )
        rows.append(
            f"{'total':>5} {'':>6} {'':>6} {'':>6} {'':>6} "
            f"{self.total_flops:>14.0f} {self.total_params:>14.0f}"
        )
        rows.append(f"weight layers: {self.layer_count}")
        if self.warning:
            rows.append(f"warning: {self.warning}")
        return "\n".join(rows) + "\n"


def analyze_static(spec: NetworkSpec) -> ComplexityReport:
    """Baseline complexity of an architecture at all-ones gates."""
    if not spec.blocks:
        return ComplexityReport([], 0.0, 0.0, 0, warning="empty network")
    consts = derive_consts(spec)
    view = ones_view(spec)
    blocks = []
    layers = 0
    for l, (b, c) in enumerate(zip(spec.blocks, consts.blocks)):
        blocks.append(
            BlockReport(
                l + 1,
                b.kind,
                b.m,
                b.in_width,
                b.hidden if b.nonlinear else 0,
                b.out_width,
                j_f_block_view(view, consts, l),
                j_p_block_view(view, consts, l),
            )
        )
        layers += c.layer_count
    return ComplexityReport(blocks, consts.F, consts.P, layers)
