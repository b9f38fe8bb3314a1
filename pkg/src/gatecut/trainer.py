"""Joint training and pruning: projected stochastic gradient descent on
weights and gate probabilities, epoch-end pruning, compaction, rounding,
checkpointing, and the exact enumeration oracles used to verify the
straight-through gradient and the determinism of optimal gate settings.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from . import complexity
from .complexity import ComplexityConsts, derive_consts, grad_jfp
from .data import Dataset, sample_batch
from .gates import BlockGates, GateState, deserialize, project_theta, sample, serialize
from .model import (
    BlockSpec,
    GateSample,
    NetworkSpec,
    WeightSet,
    BlockWeights,
    backward,
    forward,
    init_weights,
    loss,
)
from .numerics import Rng

ENUM_GATE_LIMIT = 16
VERIFY_GATE_LIMIT = 12

W_SCHEDULES = ("constant", "piecewise", "cosine", "cosine-restarts")


class DivergenceError(RuntimeError):
    """Raised when the training loss becomes non-finite."""


@dataclass
class Hyperparams:
    nu: float = 0.1
    alpha: float = 0.0
    beta: float = 0.5
    lam: float = 1e-4
    theta_tol: float = 0.1
    batch_size: int = 32
    epochs: int = 10
    w_lr: float = 0.05
    w_momentum: float = 0.9
    w_schedule: str = "constant"
    w_milestones: tuple[int, ...] = ()
    w_decay_factor: float = 0.1
    w_restart_period: int = 0  # 0 means one cosine cycle over all epochs
    theta_lr: float = 0.005
    theta_beta1: float = 0.9
    theta_beta2: float = 0.999
    theta_eps: float = 1e-8
    theta_init: float = 0.75
    finalize_epoch: int | None = None
    seed: int = 0
    init_scale: float = 1.0

    def validate(self) -> None:
        if self.nu < 0:
            raise ValueError("nu must be >= 0")
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")
        if not 0.0 < self.theta_tol < 0.5:
            raise ValueError("theta_tol must lie in (0, 0.5)")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch size and epochs must be >= 1")
        if self.w_lr <= 0 or self.theta_lr <= 0:
            raise ValueError("learning rates must be positive")
        if not 0.0 <= self.w_momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        if self.w_schedule not in W_SCHEDULES:
            raise ValueError(f"unknown schedule {self.w_schedule!r}")
        if not 0.0 <= self.theta_init <= 1.0:
            raise ValueError("theta_init must lie in [0, 1]")
        if self.finalize_epoch is not None and self.finalize_epoch < 1:
            raise ValueError("finalize_epoch must be >= 1")


def lr_at_epoch(hyper: Hyperparams, epoch: int) -> float:
    """Weight learning rate for a 1-based epoch index."""
    base = hyper.w_lr
    if hyper.w_schedule == "constant":
        return base
    if hyper.w_schedule == "piecewise":
        passed = sum(1 for m in hyper.w_milestones if epoch > m)
        return base * hyper.w_decay_factor**passed
    period = hyper.w_restart_period or hyper.epochs
    if hyper.w_schedule == "cosine":
        period = hyper.epochs
    t = ((epoch - 1) % period) / max(period, 1)
    return 0.5 * base * (1.0 + math.cos(math.pi * t))


# --------------------------------------------------------------------------
# Gradient assembly


@dataclass
class ThetaGrads:
    gb: list[float | None]
    g1: list[np.ndarray | None]
    g2: list[np.ndarray | None]


def theta_grad_st(
    block_grads,
    state: GateState,
    spec: NetworkSpec,
    consts: ComplexityConsts,
    nu: float,
    alpha: float,
    beta: float,
) -> ThetaGrads:
    """Straight-through gradient: the per-sample gate gradient from backward
    plus the analytic regularizer gradient, zeroed on dead structures."""
    view = complexity.theta_view(state, spec)
    reg = grad_jfp(view, consts, alpha, beta)
    gb, g1, g2 = [], [], []
    for l, g in enumerate(state.blocks):
        if g.theta_b is None or not g.alive_b:
            gb.append(None)
        else:
            gb.append(block_grads[l].xi_b + nu * reg.db[l])
        if g.theta1 is None:
            g1.append(None)
        else:
            grad = block_grads[l].xi1 + nu * reg.d1[l]
            g1.append(np.where(g.alive1, grad, 0.0))
        if g.theta2 is None:
            g2.append(None)
        else:
            grad = block_grads[l].xi2 + nu * reg.d2[l]
            g2.append(np.where(g.alive2, grad, 0.0))
    return ThetaGrads(gb, g1, g2)


# --------------------------------------------------------------------------
# Exact enumeration oracles


@dataclass(frozen=True)
class GateId:
    kind: str  # "b" | "1" | "2"
    block: int
    unit: int = -1


def live_gates(spec: NetworkSpec, state: GateState) -> list[GateId]:
    ids = []
    for l, g in enumerate(state.blocks):
        if g.theta_b is not None and g.alive_b:
            ids.append(GateId("b", l))
        if g.theta1 is not None:
            ids.extend(GateId("1", l, i) for i in np.flatnonzero(g.alive1))
        if g.theta2 is not None:
            ids.extend(GateId("2", l, i) for i in np.flatnonzero(g.alive2))
    return ids


def _const_sample(spec: NetworkSpec, state: GateState) -> GateSample:
    """Gate sample with every live gate at 1 and everything else at its
    deterministic value (constants for absent gates, 0 for dead ones)."""
    xi_b, xi1, xi2 = [], [], []
    for l, (g, b) in enumerate(zip(state.blocks, spec.blocks)):
        if g.theta_b is None:
            xi_b.append(g.const_b)
        else:
            xi_b.append(1.0 if g.alive_b else 0.0)
        xi1.append(np.ones(b.hidden) if g.theta1 is None else g.alive1.astype(np.float64))
        xi2.append(np.ones(b.in_width) if g.theta2 is None else g.alive2.astype(np.float64))
    return GateSample(xi_b, xi1, xi2)


def vertex_losses(
    spec: NetworkSpec,
    weights: WeightSet,
    state: GateState,
    x: np.ndarray,
    y: np.ndarray,
    limit: int = ENUM_GATE_LIMIT,
) -> tuple[list[GateId], np.ndarray]:
    """Data cost at every binary configuration of the live gates.

    The cost is multilinear in the gate values, so this table determines the
    expected cost at any interior gate-probability vector as a weighted sum.
    """
    ids = live_gates(spec, state)
    G = len(ids)
    if G > limit:
        raise ValueError(f"{G} live gates exceed the enumeration limit {limit}")
    losses = np.empty(2**G)
    for mask in range(2**G):
        xi = _const_sample(spec, state)
        for bit, gid in enumerate(ids):
            v = float((mask >> bit) & 1)
            if gid.kind == "b":
                xi.xi_b[gid.block] = v
            elif gid.kind == "1":
                xi.xi1[gid.block][gid.unit] = v
            else:
                xi.xi2[gid.block][gid.unit] = v
        yhat, _ = forward(spec, weights, xi, x)
        losses[mask] = loss(yhat, y, spec.task)
    return ids, losses


def gate_probs(state: GateState, ids: list[GateId]) -> np.ndarray:
    p = np.empty(len(ids))
    for j, gid in enumerate(ids):
        g = state.blocks[gid.block]
        if gid.kind == "b":
            p[j] = g.theta_b
        elif gid.kind == "1":
            p[j] = g.theta1[gid.unit]
        else:
            p[j] = g.theta2[gid.unit]
    return p


def expected_cost(
    losses: np.ndarray, probs: np.ndarray, cond: dict[int, int] | None = None
) -> float:
    """Expectation of the vertex-cost table under independent Bernoulli gates,
    optionally conditioning some gates to fixed binary values."""
    idx = np.arange(losses.size)
    w = np.ones(losses.size)
    for j, p in enumerate(probs):
        bit = (idx >> j) & 1
        if cond is not None and j in cond:
            w = w * (bit == cond[j])
        else:
            w = w * np.where(bit, p, 1.0 - p)
    return float(np.sum(w * losses))


def theta_grad_exact(
    spec: NetworkSpec,
    weights: WeightSet,
    state: GateState,
    x: np.ndarray,
    y: np.ndarray,
    gid: GateId,
) -> float:
    """Exact partial derivative of the expected data cost for one gate,
    computed as a difference of conditional expectations.

    For a block gate: E[C | xi_B=1] - E[C | xi_B=0].  For a hidden unit:
    theta_B * (E[C | xi_B=1, xi_1i=1] - E[C | xi_B=1, xi_1i=0]).  For an
    input channel: E[C | xi_2i=1] - E[C | xi_2i=0].
    """
    ids, losses = vertex_losses(spec, weights, state, x, y)
    probs = gate_probs(state, ids)
    lookup = {g: j for j, g in enumerate(ids)}
    if gid not in lookup:
        raise ValueError(f"gate {gid} is not live")
    j = lookup[gid]
    if gid.kind == "1":
        theta_b = state.theta_b_eff(gid.block)
        cond1 = {j: 1}
        cond0 = {j: 0}
        bid = GateId("b", gid.block)
        if bid in lookup:
            cond1[lookup[bid]] = 1
            cond0[lookup[bid]] = 1
        return theta_b * (
            expected_cost(losses, probs, cond1) - expected_cost(losses, probs, cond0)
        )
    return expected_cost(losses, probs, {j: 1}) - expected_cost(losses, probs, {j: 0})


def theta_grad_exact_all(
    spec: NetworkSpec, weights: WeightSet, state: GateState, x: np.ndarray, y: np.ndarray
) -> dict[GateId, float]:
    ids, losses = vertex_losses(spec, weights, state, x, y)
    probs = gate_probs(state, ids)
    lookup = {g: j for j, g in enumerate(ids)}
    out = {}
    for j, gid in enumerate(ids):
        if gid.kind == "1":
            theta_b = state.theta_b_eff(gid.block)
            cond1, cond0 = {j: 1}, {j: 0}
            bid = GateId("b", gid.block)
            if bid in lookup:
                cond1[lookup[bid]] = 1
                cond0[lookup[bid]] = 1
            out[gid] = theta_b * (
                expected_cost(losses, probs, cond1) - expected_cost(losses, probs, cond0)
            )
        else:
            out[gid] = expected_cost(losses, probs, {j: 1}) - expected_cost(
                losses, probs, {j: 0}
            )
    return out


def vertex_verify(
    spec: NetworkSpec,
    weights: WeightSet,
    state: GateState,
    x: np.ndarray,
    y: np.ndarray,
    consts: ComplexityConsts,
    nu: float,
    alpha: float,
    beta: float,
    lam: float,
    trials: int,
    rng: Rng,
) -> dict:
    """Check that the full objective (expected data cost + weight decay +
    complexity index), a multilinear function of the gate probabilities,
    attains its minimum at a binary vertex.

    Returns the vertex minimum, the minimum over random interior points, and
    the worst per-coordinate midpoint-affineness residual.
    """
    ids, losses = vertex_losses(spec, weights, state, x, y, limit=VERIFY_GATE_LIMIT)
    G = len(ids)
    decay = 0.5 * lam * weights.sq_norm()

    def objective(p: np.ndarray) -> float:
        st = state.copy()
        for j, gid in enumerate(ids):
            g = st.blocks[gid.block]
            if gid.kind == "b":
                g.theta_b = float(p[j])
            elif gid.kind == "1":
                g.theta1[gid.unit] = float(p[j])
            else:
                g.theta2[gid.unit] = float(p[j])
        cost = expected_cost(losses, p)
        return cost + decay + nu * complexity.j_fp(st, spec, consts, alpha, beta)

    vertex_vals = np.empty(2**G)
    for mask in range(2**G):
        p = np.array([float((mask >> j) & 1) for j in range(G)])
        vertex_vals[mask] = objective(p)
    interior_vals = np.array([objective(rng.uniform(G)) for _ in range(trials)])

    worst_resid = 0.0
    p = rng.uniform(G)
    for j in range(G):
        lo, mid, hi = p.copy(), p.copy(), p.copy()
        lo[j], mid[j], hi[j] = 0.0, 0.5, 1.0
        resid = abs(objective(mid) - 0.5 * (objective(lo) + objective(hi)))
        worst_resid = max(worst_resid, resid)

    return {
        "gates": G,
        "min_vertex": float(vertex_vals.min()),
        "argmin_vertex": int(vertex_vals.argmin()),
        "min_interior": float(interior_vals.min()) if trials else math.inf,
        "midpoint_residual": worst_resid,
        "deterministic_optimum": bool(
            vertex_vals.min() <= (interior_vals.min() if trials else math.inf) + 1e-9
        ),
    }


# --------------------------------------------------------------------------
# Optimizers


def zeros_like_weights(weights: WeightSet) -> WeightSet:
    return WeightSet(
        [
            BlockWeights(
                None if b.w1 is None else np.zeros_like(b.w1),
                None if b.w2 is None else np.zeros_like(b.w2),
                None if b.w3 is None else np.zeros_like(b.w3),
            )
            for b in weights.blocks
        ]
    )


def step_w(
    weights: WeightSet,
    momenta: WeightSet,
    block_grads,
    lam: float,
    lr: float,
    momentum: float,
) -> None:
    """Momentum SGD on the data gradient plus weight decay, in place.

    Dead rows and columns carry zero data gradient and zero weight, so the
    decay term keeps them at exactly zero.
    """
    for l, (bw, bm) in enumerate(zip(weights.blocks, momenta.blocks)):
        for name in ("w1", "w2", "w3"):
            w = getattr(bw, name)
            if w is None:
                continue
            g = getattr(block_grads[l], name)
            if g is None:
                g = np.zeros_like(w)
            update = g + lam * w
            buf = getattr(bm, name)
            buf *= momentum
            buf += update
            if not np.all(np.isfinite(buf)):
                raise DivergenceError(f"non-finite weight update in block {l + 1}")
            w -= lr * buf


@dataclass
class ThetaMoments:
    m: list[BlockGates]  # reuse the container shape: theta_b/theta1/theta2 slots
    v: list[BlockGates]
    step: int = 0

    @classmethod
    def for_state(cls, state: GateState) -> "ThetaMoments":
        def zeros() -> list[BlockGates]:
            return [
                BlockGates(
                    0.0 if g.theta_b is not None else None,
                    None if g.theta1 is None else np.zeros_like(g.theta1),
                    None if g.theta2 is None else np.zeros_like(g.theta2),
                )
                for g in state.blocks
            ]

        return cls(zeros(), zeros())


def step_theta(
    state: GateState, moments: ThetaMoments, grads: ThetaGrads, hyper: Hyperparams
) -> None:
    """Adam update on the gate probabilities followed by projection onto
    [0, 1]; dead structures are untouched."""
    b1, b2, eps, lr = hyper.theta_beta1, hyper.theta_beta2, hyper.theta_eps, hyper.theta_lr
    moments.step += 1
    t = moments.step
    bias1 = 1.0 - b1**t
    bias2 = 1.0 - b2**t

    def adam(theta, m, v, g):
        m_new = b1 * m + (1.0 - b1) * g
        v_new = b2 * v + (1.0 - b2) * g * g
        return theta - lr * (m_new / bias1) / (np.sqrt(v_new / bias2) + eps), m_new, v_new

    for l, g in enumerate(state.blocks):
        gm, gv = moments.m[l], moments.v[l]
        if g.theta_b is not None and g.alive_b and grads.gb[l] is not None:
            g.theta_b, gm.theta_b, gv.theta_b = adam(
                g.theta_b, gm.theta_b, gv.theta_b, grads.gb[l]
            )
            g.theta_b = float(g.theta_b)
        if g.theta1 is not None and grads.g1[l] is not None:
            theta, gm.theta1, gv.theta1 = adam(g.theta1, gm.theta1, gv.theta1, grads.g1[l])
            g.theta1[:] = np.where(g.alive1, theta, 0.0)
            gm.theta1[~g.alive1] = 0.0
            gv.theta1[~g.alive1] = 0.0
        if g.theta2 is not None and grads.g2[l] is not None:
            theta, gm.theta2, gv.theta2 = adam(g.theta2, gm.theta2, gv.theta2, grads.g2[l])
            g.theta2[:] = np.where(g.alive2, theta, 0.0)
            gm.theta2[~g.alive2] = 0.0
            gv.theta2[~g.alive2] = 0.0
    project_theta(state)


# --------------------------------------------------------------------------
# Pruning


@dataclass
class PruneEvent:
    epoch: int
    kind: str  # "unit" | "block" | "channel"
    block: int  # 1-based
    unit: int | None
    theta: float

    def line(self) -> str:
        unit = "-" if self.unit is None else str(self.unit)
        return f"{self.epoch},{self.kind},{self.block},{unit},{self.theta:.6f}"


def _zero(w: np.ndarray | None, sl) -> None:
    if w is not None:
        w[sl] = 0.0


def _kill_unit(weights: WeightSet, momenta: WeightSet | None, g: BlockGates, l: int, i: int) -> None:
    g.alive1[i] = False
    g.theta1[i] = 0.0
    for ws in (weights, momenta):
        if ws is not None:
            _zero(ws.blocks[l].w1, np.s_[i, :])
            _zero(ws.blocks[l].w2, np.s_[:, i])


def _kill_block(weights: WeightSet, momenta: WeightSet | None, g: BlockGates, l: int) -> None:
    if g.theta_b is not None:
        g.alive_b = False
        g.theta_b = 0.0
    if g.theta1 is not None:
        g.alive1[:] = False
        g.theta1[:] = 0.0
    for ws in (weights, momenta):
        if ws is not None:
            _zero(ws.blocks[l].w1, np.s_[:])
            _zero(ws.blocks[l].w2, np.s_[:])


def _kill_channel(
    weights: WeightSet, momenta: WeightSet | None, state: GateState, l: int, i: int
) -> None:
    g = state.blocks[l]
    g.alive2[i] = False
    g.theta2[i] = 0.0
    for ws in (weights, momenta):
        if ws is None:
            continue
        _zero(ws.blocks[l].w1, np.s_[:, i])
        _zero(ws.blocks[l].w3, np.s_[:, i])
        if l > 0:
            _zero(ws.blocks[l - 1].w2, np.s_[i, :])
            _zero(ws.blocks[l - 1].w3, np.s_[i, :])


def prune_pass(
    spec: NetworkSpec,
    weights: WeightSet,
    state: GateState,
    theta_tol: float,
    epoch: int,
    momenta: WeightSet | None = None,
) -> list[PruneEvent]:
    """Epoch-boundary pruning: every live gate probability at or below the
    tolerance kills its structure; a block also dies when its block gate
    falls below tolerance or it has no live hidden units left. Associated
    weights (and optimizer momenta) are zeroed in place."""
    events = []
    for l, g in enumerate(state.blocks):
        was_alive = (g.alive_b if g.theta_b is not None else g.const_b == 1.0) and (
            g.theta1 is None or bool(np.any(g.alive1))
        )
        if g.theta1 is not None:
            for i in np.flatnonzero(g.alive1):
                if g.theta1[i] <= theta_tol:
                    events.append(PruneEvent(epoch, "unit", l + 1, int(i), float(g.theta1[i])))
                    _kill_unit(weights, momenta, g, l, int(i))
        starved = g.theta1 is not None and not np.any(g.alive1)
        gate_low = g.theta_b is not None and g.alive_b and g.theta_b <= theta_tol
        if was_alive and (gate_low or starved):
            theta = g.theta_b if g.theta_b is not None else 0.0
            events.append(PruneEvent(epoch, "block", l + 1, None, float(theta)))
            _kill_block(weights, momenta, g, l)
        if g.theta2 is not None:
            for i in np.flatnonzero(g.alive2):
                if g.theta2[i] <= theta_tol:
                    events.append(
                        PruneEvent(epoch, "channel", l + 1, int(i), float(g.theta2[i]))
                    )
                    _kill_channel(weights, momenta, state, l, int(i))
    return events


def finalize_round(state: GateState) -> GateState:
    """Round every surviving gate probability to the nearer of 0 and 1 (ties
    at exactly 0.5 round to 1)."""
    for g in state.blocks:
        if g.theta_b is not None and g.alive_b:
            g.theta_b = 1.0 if g.theta_b >= 0.5 else 0.0
        if g.theta1 is not None:
            g.theta1[:] = np.where(g.alive1 & (g.theta1 >= 0.5), 1.0, 0.0)
        if g.theta2 is not None:
            g.theta2[:] = np.where(g.alive2 & (g.theta2 >= 0.5), 1.0, 0.0)
    return state


def compact(
    spec: NetworkSpec, weights: WeightSet, state: GateState
) -> tuple[NetworkSpec, WeightSet, GateState]:
    """Materialize the pruning masks as smaller matrices.

    Dead hidden units are physically removed (rows of W1, columns of W2);
    blocks whose nonlinear path died become skip-only blocks; dead input
    channels are baked into the block's input mask, since width reduction
    across an identity skip would cascade through the whole trunk.
    """
    new_blocks, new_weights, new_gates = [], [], []
    for l, (b, bw, g) in enumerate(zip(spec.blocks, weights.blocks, state.blocks)):
        alive_b = g.alive_b if g.theta_b is not None else b.nonlinear
        keep = g.alive1 if g.theta1 is not None else np.ones(b.hidden, dtype=bool)
        path_alive = b.nonlinear and alive_b and bool(np.any(keep))
        mask = b.input_mask.copy() if b.input_mask is not None else None
        if g.theta2 is not None and not np.all(g.alive2):
            mask = (mask if mask is not None else np.ones(b.in_width)) * g.alive2
        if path_alive:
            hidden = int(np.count_nonzero(keep))
            nb = BlockSpec(
                b.in_width,
                hidden,
                b.out_width,
                activation=b.activation,
                input_activation=b.input_activation,
                skip=b.skip,
                nonlinear=True,
                gate_b=g.theta_b is not None,
                gate_1=g.theta1 is not None,
                gate_2=g.theta2 is not None,
                input_mask=mask,
            )
            nw = BlockWeights(
                bw.w1[keep, :].copy(),
                bw.w2[:, keep].copy(),
                None if bw.w3 is None else bw.w3.copy(),
            )
            ng = BlockGates(
                g.theta_b,
                None if g.theta1 is None else g.theta1[keep].copy(),
                None if g.theta2 is None else g.theta2.copy(),
                g.alive_b,
                None if g.theta1 is None else np.ones(hidden, dtype=bool),
                None if g.theta2 is None else g.alive2.copy(),
                g.const_b,
            )
        else:
            nb = BlockSpec(
                b.in_width,
                0,
                b.out_width,
                input_activation=b.input_activation,
                skip=b.skip,
                nonlinear=False,
                gate_b=False,
                gate_1=False,
                gate_2=g.theta2 is not None,
                input_mask=mask,
            )
            nw = BlockWeights(None, None, None if bw.w3 is None else bw.w3.copy())
            ng = BlockGates(
                None,
                None,
                None if g.theta2 is None else g.theta2.copy(),
                True,
                None,
                None if g.theta2 is None else g.alive2.copy(),
                0.0,
            )
        new_blocks.append(nb)
        new_weights.append(nw)
        new_gates.append(ng)
    if any(not b.nonlinear and b.skip == "descriptor" for b in new_blocks):
        raise ValueError("compaction disconnected the network")
    out_spec = NetworkSpec(new_blocks, spec.output_activation, spec.task)
    out_spec.validate()
    return out_spec, WeightSet(new_weights), GateState(new_gates)


# --------------------------------------------------------------------------
# Train state, checkpointing, metrics


@dataclass
class TrainState:
    weights: WeightSet
    gates: GateState
    w_momenta: WeightSet
    theta_moments: ThetaMoments
    rng: Rng
    iteration: int = 0
    epoch: int = 0
    frozen: bool = False


@dataclass
class MetricsRecord:
    epoch: int
    train_loss: float
    train_acc: float
    test_acc: float
    fpr: float
    ppr: float
    layers_left: int
    theta1_mass: float
    theta_undecided: int
    wall_time: float = 0.0  # informational only; excluded from metrics.csv

    CSV_HEADER = (
        "epoch,train_loss,train_acc,test_acc,fpr,ppr,layers_left,"
        "theta1_mass,theta_undecided"
    )

    def csv_row(self) -> str:
        return (
            f"{self.epoch},{float(self.train_loss)!r},{float(self.train_acc)!r},"
            f"{float(self.test_acc)!r},{float(self.fpr)!r},{float(self.ppr)!r},"
            f"{self.layers_left},{float(self.theta1_mass)!r},{self.theta_undecided}"
        )


def metrics_csv(records: list[MetricsRecord]) -> str:
    lines = [MetricsRecord.CSV_HEADER]
    lines.extend(r.csv_row() for r in records)
    return "\n".join(lines) + "\n"


def _mean_sample(state: GateState, spec: NetworkSpec) -> GateSample:
    """Deterministic evaluation gates: each multiplier set to its expected
    value (the gate probability)."""
    xi_b, xi1, xi2 = [], [], []
    for l, (g, b) in enumerate(zip(state.blocks, spec.blocks)):
        xi_b.append(state.theta_b_eff(l))
        t1 = state.theta1_eff(l)
        xi1.append(np.ones(b.hidden) if t1 is None else t1)
        t2 = state.theta2_eff(l)
        xi2.append(np.ones(b.in_width) if t2 is None else t2)
    return GateSample(xi_b, xi1, xi2)


def evaluate(
    spec: NetworkSpec, weights: WeightSet, state: GateState, x: np.ndarray, y: np.ndarray
) -> tuple[float, float]:
    """(loss, accuracy) of the mean network. Accuracy is NaN for regression."""
    yhat, _ = forward(spec, weights, _mean_sample(state, spec), x)
    val = loss(yhat, y, spec.task)
    if spec.task == "classification":
        acc = float(np.mean(np.argmax(yhat, axis=1) == np.asarray(y)))
    else:
        acc = float("nan")
    return val, acc


def _theta_stats(state: GateState, tol: float) -> tuple[float, int]:
    mass = 0.0
    undecided = 0
    for l, g in enumerate(state.blocks):
        if g.theta1 is not None:
            live = g.theta1[g.alive1]
            mass += float(np.sum(live))
            undecided += int(np.sum((live > tol) & (live < 1.0 - tol)))
        if g.theta_b is not None and g.alive_b:
            undecided += int(tol < g.theta_b < 1.0 - tol)
        if g.theta2 is not None:
            live = g.theta2[g.alive2]
            undecided += int(np.sum((live > tol) & (live < 1.0 - tol)))
    return mass, undecided


CHECKPOINT_VERSION = 1


def save_checkpoint(path: str, state: TrainState) -> None:
    """Bit-exact snapshot: every float64 array lands in an npz verbatim, the
    structure goes into an embedded JSON document."""
    arrays: dict[str, np.ndarray] = {}

    def put_weights(prefix: str, ws: WeightSet):
        for l, b in enumerate(ws.blocks):
            for name in ("w1", "w2", "w3"):
                w = getattr(b, name)
                if w is not None:
                    arrays[f"{prefix}.{l}.{name}"] = w

    put_weights("w", state.weights)
    put_weights("mom", state.w_momenta)

    def put_gates(prefix: str, gs: list[BlockGates]):
        for l, g in enumerate(gs):
            if g.theta_b is not None:
                arrays[f"{prefix}.{l}.tb"] = np.float64(g.theta_b)
            if g.theta1 is not None:
                arrays[f"{prefix}.{l}.t1"] = g.theta1
            if g.theta2 is not None:
                arrays[f"{prefix}.{l}.t2"] = g.theta2

    put_gates("g", state.gates.blocks)
    put_gates("am", state.theta_moments.m)
    put_gates("av", state.theta_moments.v)

    meta = {
        "version": CHECKPOINT_VERSION,
        "gates": serialize(state.gates),
        "rng": state.rng.state(),
        "iteration": state.iteration,
        "epoch": state.epoch,
        "frozen": state.frozen,
        "adam_step": state.theta_moments.step,
        "weight_blocks": [
            {n: getattr(b, n) is not None for n in ("w1", "w2", "w3")}
            for b in state.weights.blocks
        ],
    }
    arrays["meta"] = np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path: str) -> TrainState:
    with np.load(path) as z:
        meta = json.loads(bytes(z["meta"]).decode())
        if meta["version"] != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {meta['version']}")
        gates = deserialize(meta["gates"])
        # restore exact float64 payloads over the JSON round-trip
        for l, g in enumerate(gates.blocks):
            if g.theta_b is not None:
                g.theta_b = float(z[f"g.{l}.tb"])
            if g.theta1 is not None:
                g.theta1 = z[f"g.{l}.t1"].copy()
            if g.theta2 is not None:
                g.theta2 = z[f"g.{l}.t2"].copy()

        def get_weights(prefix: str) -> WeightSet:
            blocks = []
            for l, present in enumerate(meta["weight_blocks"]):
                blocks.append(
                    BlockWeights(
                        *(
                            z[f"{prefix}.{l}.{n}"].copy() if present[n] else None
                            for n in ("w1", "w2", "w3")
                        )
                    )
                )
            return WeightSet(blocks)

        def get_moments(prefix: str) -> list[BlockGates]:
            out = []
            for l, g in enumerate(gates.blocks):
                out.append(
                    BlockGates(
                        float(z[f"{prefix}.{l}.tb"]) if g.theta_b is not None else None,
                        z[f"{prefix}.{l}.t1"].copy() if g.theta1 is not None else None,
                        z[f"{prefix}.{l}.t2"].copy() if g.theta2 is not None else None,
                    )
                )
            return out

        moments = ThetaMoments(get_moments("am"), get_moments("av"), meta["adam_step"])
        return TrainState(
            get_weights("w"),
            gates,
            get_weights("mom"),
            moments,
            Rng.from_state(meta["rng"]),
            meta["iteration"],
            meta["epoch"],
            meta["frozen"],
        )


# --------------------------------------------------------------------------
# The training loop


@dataclass
class TrainResult:
    spec: NetworkSpec
    state: TrainState
    compact_spec: NetworkSpec
    compact_weights: WeightSet
    compact_gates: GateState
    metrics: list[MetricsRecord]
    events: list[PruneEvent]
    consts: ComplexityConsts


def train(
    spec: NetworkSpec,
    dataset: Dataset,
    hyper: Hyperparams,
    checkpoint_path: str | None = None,
    on_epoch=None,
) -> TrainResult:
    """Run the full learning/pruning loop.

    Each iteration draws a with-replacement mini-batch and one binary gate
    sample, takes a momentum-SGD step on the weights (data gradient plus
    weight decay) and an Adam step on the gate probabilities (straight-through
    gradient plus the complexity-index gradient), then projects the
    probabilities onto [0, 1]. Structures are pruned once per epoch; with
    nu = 0 the regularizer is off and the gate probabilities stay fixed.
    """
    hyper.validate()
    spec.validate()
    if spec.task != dataset.task:
        raise ValueError(f"network task {spec.task!r} != dataset task {dataset.task!r}")
    consts = derive_consts(spec)
    if hyper.nu > 0:
        for l, b in enumerate(spec.blocks):
            if b.nonlinear:
                if complexity.cross_term_lower_bound(consts, hyper.nu, hyper.beta, l) <= 0:
                    raise ValueError(f"nonpositive pruning pressure bound in block {l + 1}")

    rng = Rng(hyper.seed)
    weights = init_weights(spec, rng, hyper.init_scale)
    gates = GateState.from_spec(spec, hyper.theta_init)
    state = TrainState(
        weights, gates, zeros_like_weights(weights), ThetaMoments.for_state(gates), rng
    )
    iters = max(1, math.ceil(dataset.n_train / hyper.batch_size))
    metrics: list[MetricsRecord] = []
    events: list[PruneEvent] = []
    last_good: TrainState | None = None

    for epoch in range(1, hyper.epochs + 1):
        state.epoch = epoch
        lr = lr_at_epoch(hyper, epoch)
        epoch_loss = 0.0
        for _ in range(iters):
            x, y = sample_batch(dataset, hyper.batch_size, rng)
            xi = sample(gates, spec, rng)
            try:
                yhat, trace = forward(spec, weights, xi, x)
                batch_loss = loss(yhat, y, spec.task)
            except FloatingPointError:
                batch_loss = float("nan")
            if not math.isfinite(batch_loss):
                if checkpoint_path and last_good is not None:
                    save_checkpoint(checkpoint_path, last_good)
                raise DivergenceError(f"non-finite loss at epoch {epoch}")
            epoch_loss += batch_loss
            grads = backward(spec, weights, trace, y)
            step_w(weights, state.w_momenta, grads, hyper.lam, lr, hyper.w_momentum)
            if hyper.nu > 0 and not state.frozen:
                tg = theta_grad_st(
                    grads, gates, spec, consts, hyper.nu, hyper.alpha, hyper.beta
                )
                step_theta(gates, state.theta_moments, tg, hyper)
            state.iteration += 1
        events.extend(
            prune_pass(spec, weights, gates, hyper.theta_tol, epoch, state.w_momenta)
        )
        if hyper.finalize_epoch is not None and epoch == hyper.finalize_epoch:
            finalize_round(gates)
            events.extend(
                prune_pass(spec, weights, gates, hyper.theta_tol, epoch, state.w_momenta)
            )
            state.frozen = True

        train_loss = epoch_loss / iters
        _, train_acc = evaluate(spec, weights, gates, dataset.train_inputs(), dataset.train_targets())
        if dataset.test_idx.size:
            _, test_acc = evaluate(spec, weights, gates, dataset.test_inputs(), dataset.test_targets())
        else:
            test_acc = float("nan")
        fpr, ppr, layers = complexity.ratios(consts, complexity.alive_view(gates, spec))
        mass, undecided = _theta_stats(gates, hyper.theta_tol)
        metrics.append(
            MetricsRecord(
                epoch, train_loss, train_acc, test_acc, fpr, ppr, layers, mass, undecided
            )
        )
        last_good = TrainState(
            weights.copy(),
            gates.copy(),
            state.w_momenta.copy(),
            ThetaMoments(
                [BlockGates(m.theta_b, None if m.theta1 is None else m.theta1.copy(),
                            None if m.theta2 is None else m.theta2.copy())
                 for m in state.theta_moments.m],
                [BlockGates(v.theta_b, None if v.theta1 is None else v.theta1.copy(),
                            None if v.theta2 is None else v.theta2.copy())
                 for v in state.theta_moments.v],
                state.theta_moments.step,
            ),
            Rng.from_state(rng.state()),
            state.iteration,
            epoch,
            state.frozen,
        )
        if on_epoch is not None:
            on_epoch(epoch, spec, weights, gates)

    if checkpoint_path:
        save_checkpoint(checkpoint_path, state)
    cspec, cweights, cgates = compact(spec, weights, gates)
    return TrainResult(spec, state, cspec, cweights, cgates, metrics, events, consts)
