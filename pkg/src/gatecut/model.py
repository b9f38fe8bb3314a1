"""Gated residual network: architecture description, forward pass with a
sampled gate realization, and reverse pass producing weight gradients and
per-gate-sample gradients.

A network is a chain of residual blocks

    zbar  = xi2 * h(z)
    z_new = xi_b * W2 @ (xi1 * a(W1 @ [zbar, 1])) + skip(zbar)

where the skip is a trainable dense map W3 @ [zbar, 1], the identity, or a
descriptor-only placeholder (conv blocks, which only the complexity
analyzer consumes). Bias columns are absorbed into W1 and W3; the appended
unity input is never gated.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .numerics import Rng

ACTIVATIONS = ("relu", "tanh", "softplus", "identity")
SKIP_KINDS = ("identity", "dense", "descriptor")
TASKS = ("regression", "classification")


def activate(kind: str, u: np.ndarray) -> np.ndarray:
    if kind == "relu":
        return np.maximum(u, 0.0)
    if kind == "tanh":
        return np.tanh(u)
    if kind == "softplus":
        # shifted so that a(0) = 0, as the block structure assumes
        return np.logaddexp(0.0, u) - math.log(2.0)
    if kind == "identity":
        return u
    raise ValueError(f"unknown activation {kind!r}")


def activate_deriv(kind: str, u: np.ndarray) -> np.ndarray:
    if kind == "relu":
        return (u > 0.0).astype(np.float64)
    if kind == "tanh":
        t = np.tanh(u)
        return 1.0 - t * t
    if kind == "softplus":
        return 1.0 / (1.0 + np.exp(-u))
    if kind == "identity":
        return np.ones_like(u)
    raise ValueError(f"unknown activation {kind!r}")


@dataclass
class ConvInfo:
    """Spatial descriptor for conv blocks (static complexity analysis only).

    `layers` lists (kernel, height, width) for the M nonlinear-path input
    convs followed by the output conv; `skip` is (kernel, height, width)
    for a projection skip, or None for identity / pooling / padding.
    """

    layers: list[tuple[int, int, int]]
    skip: tuple[int, int, int] | None = None


@dataclass
class BlockSpec:
    in_width: int
    hidden: int
    out_width: int
    activation: str = "relu"
    input_activation: str = "identity"
    skip: str = "identity"
    m: int = 1
    nonlinear: bool = True
    gate_b: bool = True
    gate_1: bool = True
    gate_2: bool = True
    kind: str = "dense"
    conv: ConvInfo | None = None
    input_mask: np.ndarray | None = None  # baked-in zeros from theta2 pruning

    def validate(self, index: int) -> None:
        name = f"block {index + 1}"
        if min(self.in_width, self.out_width) < 1 or (self.nonlinear and self.hidden < 1):
            raise ValueError(f"{name}: widths must be >= 1")
        if self.m < 1:
            raise ValueError(f"{name}: repeat factor must be >= 1")
        if self.activation not in ACTIVATIONS or self.input_activation not in ACTIVATIONS:
            raise ValueError(f"{name}: unknown activation")
        if self.skip not in SKIP_KINDS:
            raise ValueError(f"{name}: unknown skip kind {self.skip!r}")
        if self.skip == "identity" and self.in_width != self.out_width:
            raise ValueError(f"{name}: identity skip needs in_width == out_width")
        if self.kind == "conv" and self.conv is None:
            raise ValueError(f"{name}: conv block needs spatial descriptor")
        if self.kind == "conv" and self.nonlinear and len(self.conv.layers) != self.m + 1:
            raise ValueError(f"{name}: conv block needs {self.m + 1} layer descriptors")
        if not self.nonlinear and (self.gate_b or self.gate_1):
            raise ValueError(f"{name}: gates on a block without a nonlinear path")


@dataclass
class NetworkSpec:
    blocks: list[BlockSpec]
    output_activation: str = "identity"
    task: str = "regression"

    def validate(self) -> None:
        if not self.blocks:
            raise ValueError("network has no blocks")
        if self.output_activation not in ACTIVATIONS:
            raise ValueError(f"unknown output activation {self.output_activation!r}")
        if self.task not in TASKS:
            raise ValueError(f"unknown task {self.task!r}")
        for i, b in enumerate(self.blocks):
            b.validate(i)
            if i + 1 < len(self.blocks) and b.out_width != self.blocks[i + 1].in_width:
                raise ValueError(
                    f"width mismatch: block {i + 1} out={b.out_width}, "
                    f"block {i + 2} in={self.blocks[i + 1].in_width}"
                )
        if self.blocks[0].gate_2:
            raise ValueError("first block cannot gate its input (theta2^1 is fixed at 1)")

    @property
    def in_width(self) -> int:
        return self.blocks[0].in_width

    @property
    def out_width(self) -> int:
        return self.blocks[-1].out_width

    def trainable(self) -> bool:
        return all(b.kind == "dense" for b in self.blocks)


@dataclass
class BlockWeights:
    w1: np.ndarray | None  # (hidden, in+1), bias column last
    w2: np.ndarray | None  # (out, hidden)
    w3: np.ndarray | None  # (out, in+1) for dense skips, else None


@dataclass
class WeightSet:
    blocks: list[BlockWeights]

    def sq_norm(self) -> float:
        total = 0.0
        for bw in self.blocks:
            for w in (bw.w1, bw.w2, bw.w3):
                if w is not None:
                    total += float(np.sum(w * w))
        return total

    def copy(self) -> "WeightSet":
        return WeightSet(
            [
                BlockWeights(
                    None if b.w1 is None else b.w1.copy(),
                    None if b.w2 is None else b.w2.copy(),
                    None if b.w3 is None else b.w3.copy(),
                )
                for b in self.blocks
            ]
        )


def init_weights(spec: NetworkSpec, rng: Rng, scale: float = 1.0) -> WeightSet:
    """Scaled-uniform fan-in initialization; bias columns start at zero."""
    blocks = []
    for b in spec.blocks:
        w1 = w2 = w3 = None
        if b.nonlinear:
            bound1 = scale / math.sqrt(b.in_width)
            w1 = np.concatenate(
                [
                    (rng.uniform(b.hidden * b.in_width) * 2.0 - 1.0).reshape(b.hidden, b.in_width)
                    * bound1,
                    np.zeros((b.hidden, 1)),
                ],
                axis=1,
            )
            bound2 = scale / math.sqrt(b.hidden)
            w2 = (rng.uniform(b.out_width * b.hidden) * 2.0 - 1.0).reshape(
                b.out_width, b.hidden
            ) * bound2
        if b.skip == "dense":
            bound3 = scale / math.sqrt(b.in_width)
            w3 = np.concatenate(
                [
                    (rng.uniform(b.out_width * b.in_width) * 2.0 - 1.0).reshape(
                        b.out_width, b.in_width
                    )
                    * bound3,
                    np.zeros((b.out_width, 1)),
                ],
                axis=1,
            )
        blocks.append(BlockWeights(w1, w2, w3))
    return WeightSet(blocks)


@dataclass
class GateSample:
    """One binary realization of all gates, shared across a mini-batch.

    Blocks lacking a gate hold the constant 1 (or 0 for the nonlinear-path
    gate of a skip-only block).
    """

    xi_b: list[float]
    xi1: list[np.ndarray]
    xi2: list[np.ndarray]

    @classmethod
    def all_ones(cls, spec: NetworkSpec) -> "GateSample":
        return cls(
            xi_b=[1.0 if b.nonlinear else 0.0 for b in spec.blocks],
            xi1=[np.ones(b.hidden) for b in spec.blocks],
            xi2=[np.ones(b.in_width) for b in spec.blocks],
        )


@dataclass
class ForwardTrace:
    x: np.ndarray
    xi: GateSample
    z: list[np.ndarray]  # block inputs, z[L] is the pre-output signal
    hz: list[np.ndarray]
    zbar: list[np.ndarray]
    u: list[np.ndarray | None]  # pre-activations W1 @ [zbar, 1]
    s: list[np.ndarray | None]  # a(u)
    v: list[np.ndarray | None]  # W2 @ (xi1 * s), before the xi_b gate
    yhat: np.ndarray


def _augment(x: np.ndarray) -> np.ndarray:
    return np.concatenate([x, np.ones((x.shape[0], 1))], axis=1)


def forward(
    spec: NetworkSpec, weights: WeightSet, xi: GateSample, x: np.ndarray
) -> tuple[np.ndarray, ForwardTrace]:
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if x.shape[1] != spec.in_width:
        raise ValueError(f"input width {x.shape[1]} != network input {spec.in_width}")
    if not spec.trainable():
        raise ValueError("forward pass requires dense trainable blocks")
    for b in spec.blocks:
        if b.m != 1:
            raise ValueError("the training engine supports M=1 blocks only")

    z_list, hz_list, zbar_list, u_list, s_list, v_list = [], [], [], [], [], []
    z = x
    for i, (b, bw) in enumerate(zip(spec.blocks, weights.blocks)):
        hz = activate(b.input_activation, z)
        zbar = xi.xi2[i] * hz
        if b.input_mask is not None:
            zbar = b.input_mask * zbar
        u = s = v = None
        out = np.zeros((z.shape[0], b.out_width))
        if b.nonlinear:
            u = _augment(zbar) @ bw.w1.T
            s = activate(b.activation, u)
            v = (xi.xi1[i] * s) @ bw.w2.T
            out = xi.xi_b[i] * v
        if b.skip == "dense":
            out = out + _augment(zbar) @ bw.w3.T
        elif b.skip == "identity":
            out = out + zbar
        if not np.all(np.isfinite(out)):
            raise FloatingPointError(f"non-finite activation in block {i + 1}")
        z_list.append(z)
        hz_list.append(hz)
        zbar_list.append(zbar)
        u_list.append(u)
        s_list.append(s)
        v_list.append(v)
        z = out
    z_list.append(z)
    yhat = activate(spec.output_activation, z)
    trace = ForwardTrace(x, xi, z_list, hz_list, zbar_list, u_list, s_list, v_list, yhat)
    return yhat, trace


def _softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def loss(predictions: np.ndarray, targets: np.ndarray, task: str) -> float:
    """Per-sample average loss: half squared error for regression, softmax
    cross-entropy for classification (targets are class indices)."""
    predictions = np.atleast_2d(predictions)
    n = predictions.shape[0]
    if task == "regression":
        targets = np.atleast_2d(np.asarray(targets, dtype=np.float64))
        if targets.shape != predictions.shape:
            raise ValueError(f"shape mismatch: {predictions.shape} vs {targets.shape}")
        d = predictions - targets
        return float(0.5 * np.sum(d * d) / n)
    if task == "classification":
        targets = np.asarray(targets)
        if targets.shape[0] != n:
            raise ValueError("batch size mismatch between predictions and targets")
        if targets.min() < 0 or targets.max() >= predictions.shape[1]:
            raise ValueError("classification target out of range")
        p = _softmax(predictions)
        return float(-np.mean(np.log(p[np.arange(n), targets] + 1e-300)))
    raise ValueError(f"unknown task {task!r}")


def _loss_grad(predictions: np.ndarray, targets: np.ndarray, task: str) -> np.ndarray:
    n = predictions.shape[0]
    if task == "regression":
        return (predictions - np.atleast_2d(targets)) / n
    p = _softmax(predictions)
    p[np.arange(n), np.asarray(targets)] -= 1.0
    return p / n


@dataclass
class BlockGrads:
    w1: np.ndarray | None
    w2: np.ndarray | None
    w3: np.ndarray | None
    xi_b: float
    xi1: np.ndarray
    xi2: np.ndarray


def backward(
    spec: NetworkSpec, weights: WeightSet, trace: ForwardTrace, targets: np.ndarray
) -> list[BlockGrads]:
    """Gradients of the batch loss for the realized gate sample.

    Weight gradients are exact; the xi gradients treat each gate multiplier
    as a real variable evaluated at the sampled binary values, which is what
    the straight-through update consumes.
    """
    xi = trace.xi
    for i, b in enumerate(spec.blocks):
        if b.nonlinear and trace.u[i].shape[1] != b.hidden:
            raise ValueError(f"stale trace: block {i + 1} hidden width changed")
    g = _loss_grad(trace.yhat, targets, spec.task)
    g = g * activate_deriv(spec.output_activation, trace.z[-1])

    grads: list[BlockGrads] = [None] * len(spec.blocks)
    for i in range(len(spec.blocks) - 1, -1, -1):
        b = spec.blocks[i]
        bw = weights.blocks[i]
        zbar_aug = _augment(trace.zbar[i])
        gw1 = gw2 = gw3 = None
        g_zbar = np.zeros_like(trace.zbar[i])
        gxi_b = 0.0
        gxi1 = np.zeros(b.hidden)
        if b.nonlinear:
            gated = xi.xi1[i] * trace.s[i]
            gw2 = xi.xi_b[i] * (g.T @ gated)
            gxi_b = float(np.sum(g * trace.v[i]))
            g_gated = xi.xi_b[i] * (g @ bw.w2)
            gxi1 = np.sum(g_gated * trace.s[i], axis=0)
            gu = (g_gated * xi.xi1[i]) * activate_deriv(b.activation, trace.u[i])
            gw1 = gu.T @ zbar_aug
            g_zbar = gu @ bw.w1[:, :-1]
        if b.skip == "dense":
            gw3 = g.T @ zbar_aug
            g_zbar = g_zbar + g @ bw.w3[:, :-1]
        elif b.skip == "identity":
            g_zbar = g_zbar + g
        if b.input_mask is not None:
            g_zbar = g_zbar * b.input_mask
        gxi2 = np.sum(g_zbar * trace.hz[i], axis=0)
        g_hz = g_zbar * xi.xi2[i]
        g = g_hz * activate_deriv(b.input_activation, trace.z[i])
        grads[i] = BlockGrads(gw1, gw2, gw3, gxi_b, gxi1, gxi2)
    return grads


def network_from_widths(
    in_width: int,
    hidden: int,
    out_width: int,
    n_blocks: int,
    activation: str = "relu",
    task: str = "regression",
    gate_2: bool = True,
) -> NetworkSpec:
    """Convenience builder: residual trunk of identity-skip blocks at a common
    width, bracketed by a dense input block and a skip-only output block."""
    blocks = [
        BlockSpec(in_width, hidden, hidden, activation=activation, skip="dense", gate_2=False)
    ]
    for _ in range(n_blocks - 2):
        blocks.append(
            BlockSpec(hidden, hidden, hidden, activation=activation, skip="identity", gate_2=gate_2)
        )
    blocks.append(
        BlockSpec(
            hidden,
            0,
            out_width,
            skip="dense",
            nonlinear=False,
            gate_b=False,
            gate_1=False,
            gate_2=gate_2,
        )
    )
    spec = NetworkSpec(blocks, task=task)
    spec.validate()
    return spec
