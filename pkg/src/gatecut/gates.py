"""Bernoulli-gate mathematics: the flattening hyper-prior and its collapsed
penalty, the trainable gate state with alive masks, sampling, and the box
projection onto [0, 1].
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .model import GateSample, NetworkSpec
from .numerics import Rng, bernoulli_vector


def flattening_pdf(pi: float, gamma: float) -> float:
    """Density of the flattening hyper-prior
    p(pi | gamma) = (gamma-1)/log(gamma) * 1 / (1 + (gamma-1)(1-pi))."""
    if not 0.0 < gamma < 1.0:
        raise ValueError(f"gamma must be in (0,1), got {gamma}")
    if not 0.0 <= pi <= 1.0:
        raise ValueError(f"pi must be in [0,1], got {pi}")
    return (gamma - 1.0) / math.log(gamma) / (1.0 + (gamma - 1.0) * (1.0 - pi))


def pi_star(theta: float, gamma: float) -> float:
    """Closed-form minimizer of the KL-plus-hyperprior penalty J(pi; theta)."""
    if not 0.0 < gamma < 1.0:
        raise ValueError(f"gamma must be in (0,1), got {gamma}")
    if not 0.0 <= theta <= 1.0:
        raise ValueError(f"theta must be in [0,1], got {theta}")
    return gamma * theta / (1.0 + theta * (gamma - 1.0))


def j_flat(theta: float, gamma: float) -> float:
    """Collapsed penalty J(pi*(theta); theta) = (1 - theta) log(gamma).

    Its theta-derivative is the constant -log(gamma): pruning pressure does
    not depend on where theta currently sits.
    """
    if not 0.0 < gamma < 1.0:
        raise ValueError(f"gamma must be in (0,1), got {gamma}")
    if not 0.0 <= theta <= 1.0:
        raise ValueError(f"theta must be in [0,1], got {theta}")
    return (1.0 - theta) * math.log(gamma)


def j_penalty(pi: float, theta: float, gamma: float) -> float:
    """Uncollapsed J(pi; theta): Bernoulli KL plus the hyper-prior term.
    Exposed for the brute-force checks against pi_star / j_flat."""
    if not 0.0 < pi < 1.0:
        raise ValueError("pi must be interior for direct evaluation")
    kl = 0.0
    if theta > 0.0:
        kl += theta * math.log(theta / pi)
    if theta < 1.0:
        kl += (1.0 - theta) * math.log((1.0 - theta) / (1.0 - pi))
    return kl + math.log(1.0 + (gamma - 1.0) * (1.0 - pi))


@dataclass
class BlockGates:
    """Gate parameters of one block. A None theta means the gate is absent
    and the corresponding multiplier is constant (1, or 0 for the nonlinear
    path of a skip-only block)."""

    theta_b: float | None
    theta1: np.ndarray | None
    theta2: np.ndarray | None
    alive_b: bool = True
    alive1: np.ndarray | None = None
    alive2: np.ndarray | None = None
    const_b: float = 1.0

    def __post_init__(self):
        if self.theta1 is not None and self.alive1 is None:
            self.alive1 = np.ones(self.theta1.size, dtype=bool)
        if self.theta2 is not None and self.alive2 is None:
            self.alive2 = np.ones(self.theta2.size, dtype=bool)


@dataclass
class GateState:
    blocks: list[BlockGates]

    @classmethod
    def from_spec(cls, spec: NetworkSpec, theta_init: float = 0.75) -> "GateState":
        blocks = []
        for b in spec.blocks:
            theta_b = theta_init if (b.nonlinear and b.gate_b) else None
            theta1 = np.full(b.hidden, theta_init) if (b.nonlinear and b.gate_1) else None
            theta2 = np.full(b.in_width, theta_init) if b.gate_2 else None
            const_b = 1.0 if b.nonlinear else 0.0
            blocks.append(BlockGates(theta_b, theta1, theta2, const_b=const_b))
        return cls(blocks)

    def copy(self) -> "GateState":
        out = []
        for g in self.blocks:
            out.append(
                BlockGates(
                    g.theta_b,
                    None if g.theta1 is None else g.theta1.copy(),
                    None if g.theta2 is None else g.theta2.copy(),
                    g.alive_b,
                    None if g.alive1 is None else g.alive1.copy(),
                    None if g.alive2 is None else g.alive2.copy(),
                    g.const_b,
                )
            )
        return GateState(out)

    # Effective values with alive masks and boundary constants applied.

    def theta_b_eff(self, l: int) -> float:
        g = self.blocks[l]
        if g.theta_b is None:
            return g.const_b
        return g.theta_b if g.alive_b else 0.0

    def theta1_eff(self, l: int) -> np.ndarray | None:
        g = self.blocks[l]
        if g.theta1 is None:
            return None
        return np.where(g.alive1, g.theta1, 0.0)

    def theta2_eff(self, l: int) -> np.ndarray | None:
        g = self.blocks[l]
        if g.theta2 is None:
            return None
        return np.where(g.alive2, g.theta2, 0.0)


def project_theta(state: GateState) -> GateState:
    """Clamp every theta to [0, 1] in place; dead structures stay at 0."""
    for g in state.blocks:
        if g.theta_b is not None:
            g.theta_b = 0.0 if not g.alive_b else min(max(g.theta_b, 0.0), 1.0)
        if g.theta1 is not None:
            np.clip(g.theta1, 0.0, 1.0, out=g.theta1)
            g.theta1[~g.alive1] = 0.0
        if g.theta2 is not None:
            np.clip(g.theta2, 0.0, 1.0, out=g.theta2)
            g.theta2[~g.alive2] = 0.0
    return state


def sample(state: GateState, spec: NetworkSpec, rng: Rng) -> GateSample:
    """Draw one binary gate realization. Dead structures sample 0; absent
    gates take their constant value."""
    xi_b, xi1, xi2 = [], [], []
    for l, (g, b) in enumerate(zip(state.blocks, spec.blocks)):
        if g.theta_b is None:
            xi_b.append(g.const_b)
        elif not g.alive_b:
            xi_b.append(0.0)
        else:
            xi_b.append(float(bernoulli_vector(np.array([g.theta_b]), rng)[0]))
        if g.theta1 is None:
            xi1.append(np.ones(b.hidden))
        else:
            xi1.append(bernoulli_vector(state.theta1_eff(l), rng))
        if g.theta2 is None:
            xi2.append(np.ones(b.in_width))
        else:
            xi2.append(bernoulli_vector(state.theta2_eff(l), rng))
    return GateSample(xi_b, xi1, xi2)


def serialize(state: GateState) -> dict:
    blocks = []
    for g in state.blocks:
        blocks.append(
            {
                "theta_b": g.theta_b,
                "theta1": None if g.theta1 is None else g.theta1.tolist(),
                "theta2": None if g.theta2 is None else g.theta2.tolist(),
                "alive_b": g.alive_b,
                "alive1": None if g.alive1 is None else g.alive1.tolist(),
                "alive2": None if g.alive2 is None else g.alive2.tolist(),
                "const_b": g.const_b,
            }
        )
    return {"version": 1, "blocks": blocks}


def deserialize(payload: dict) -> GateState:
    if payload.get("version") != 1:
        raise ValueError("unsupported gate-state version")
    blocks = []
    for d in payload["blocks"]:
        blocks.append(
            BlockGates(
                d["theta_b"],
                None if d["theta1"] is None else np.array(d["theta1"], dtype=np.float64),
                None if d["theta2"] is None else np.array(d["theta2"], dtype=np.float64),
                d["alive_b"],
                None if d["alive1"] is None else np.array(d["alive1"], dtype=bool),
                None if d["alive2"] is None else np.array(d["alive2"], dtype=bool),
                d["const_b"],
            )
        )
    return GateState(blocks)
