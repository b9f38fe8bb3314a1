"""Architecture description files: a small INI dialect with one [network]
section and consecutively numbered [block N] sections. Parsing and
formatting round-trip losslessly.

Example::

    [network]
    output_activation = identity
    task = regression

    [block 1]
    kind = dense
    in = 3
    hidden = 8
    out = 8
    activation = relu
    skip = dense
    gate_2 = false

Conv descriptor blocks add ``m``, ``convs = K@HxW, ...`` (M+1 entries:
the input conv, the middle convs, the output conv) and optionally
``skip_conv = K@HxW``.
"""

from __future__ import annotations

import configparser
import io

import numpy as np

from .model import ACTIVATIONS, SKIP_KINDS, TASKS, BlockSpec, ConvInfo, NetworkSpec

_NETWORK_KEYS = {"output_activation", "task"}
_BLOCK_KEYS = {
    "kind",
    "in",
    "hidden",
    "out",
    "activation",
    "input_activation",
    "skip",
    "m",
    "nonlinear",
    "gate_b",
    "gate_1",
    "gate_2",
    "convs",
    "skip_conv",
    "input_mask",
}
_BOOLS = {"true": True, "false": False}


class ArchError(ValueError):
    pass


def _bool(section: str, key: str, raw: str) -> bool:
    if raw.lower() not in _BOOLS:
        raise ArchError(f"[{section}] {key}: expected true/false, got {raw!r}")
    return _BOOLS[raw.lower()]


def _int(section: str, key: str, raw: str) -> int:
    try:
        return int(raw)
    except ValueError:
        raise ArchError(f"[{section}] {key}: expected an integer, got {raw!r}") from None


def _parse_conv(section: str, key: str, raw: str) -> tuple[int, int, int]:
    try:
        k, spatial = raw.split("@")
        h, w = spatial.lower().split("x")
        return int(k), int(h), int(w)
    except ValueError:
        raise ArchError(f"[{section}] {key}: expected K@HxW, got {raw!r}") from None


def parse_arch(text: str, source: str = "<string>") -> NetworkSpec:
    cp = configparser.ConfigParser(interpolation=None, delimiters=("=",), strict=True)
    cp.optionxform = str
    try:
        cp.read_string(text, source=source)
    except configparser.Error as exc:
        raise ArchError(str(exc)) from None
    if "network" not in cp:
        raise ArchError(f"{source}: missing [network] section")
    net = cp["network"]
    for key in net:
        if key not in _NETWORK_KEYS:
            raise ArchError(f"[network]: unknown key {key!r}")
    output_activation = net.get("output_activation", "identity")
    task = net.get("task", "regression")
    if output_activation not in ACTIVATIONS:
        raise ArchError(f"[network]: unknown output_activation {output_activation!r}")
    if task not in TASKS:
        raise ArchError(f"[network]: unknown task {task!r}")

    block_sections = [s for s in cp.sections() if s != "network"]
    expected = [f"block {i + 1}" for i in range(len(block_sections))]
    if block_sections != expected:
        raise ArchError(
            f"{source}: block sections must be consecutive [block 1]..[block N], "
            f"got {block_sections}"
        )
    blocks = []
    for name in block_sections:
        sec = cp[name]
        for key in sec:
            if key not in _BLOCK_KEYS:
                raise ArchError(f"[{name}]: unknown key {key!r}")
        kind = sec.get("kind", "dense")
        if kind not in ("dense", "conv"):
            raise ArchError(f"[{name}]: unknown kind {kind!r}")
        for req in ("in", "out"):
            if req not in sec:
                raise ArchError(f"[{name}]: missing required key {req!r}")
        nonlinear = _bool(name, "nonlinear", sec.get("nonlinear", "true"))
        skip = sec.get("skip", "identity")
        if skip not in SKIP_KINDS:
            raise ArchError(f"[{name}]: unknown skip kind {skip!r}")
        conv = None
        if kind == "conv":
            if "convs" not in sec and nonlinear:
                raise ArchError(f"[{name}]: conv block needs a convs entry")
            layers = [
                _parse_conv(name, "convs", part.strip())
                for part in sec.get("convs", "").split(",")
                if part.strip()
            ]
            skip_conv = None
            if "skip_conv" in sec and sec["skip_conv"].strip().lower() != "none":
                skip_conv = _parse_conv(name, "skip_conv", sec["skip_conv"].strip())
            conv = ConvInfo(layers, skip_conv)
        mask = None
        if "input_mask" in sec:
            try:
                mask = np.array(
                    [float(v) for v in sec["input_mask"].split(",")], dtype=np.float64
                )
            except ValueError:
                raise ArchError(f"[{name}]: bad input_mask") from None
        blocks.append(
            BlockSpec(
                in_width=_int(name, "in", sec["in"]),
                hidden=_int(name, "hidden", sec.get("hidden", "0")),
                out_width=_int(name, "out", sec["out"]),
                activation=sec.get("activation", "relu"),
                input_activation=sec.get("input_activation", "identity"),
                skip=skip,
                m=_int(name, "m", sec.get("m", "1")),
                nonlinear=nonlinear,
                gate_b=_bool(name, "gate_b", sec.get("gate_b", "true" if nonlinear else "false")),
                gate_1=_bool(name, "gate_1", sec.get("gate_1", "true" if nonlinear else "false")),
                gate_2=_bool(name, "gate_2", sec.get("gate_2", "true")),
                kind=kind,
                conv=conv,
                input_mask=mask,
            )
        )
    spec = NetworkSpec(blocks, output_activation, task)
    try:
        spec.validate()
    except ValueError as exc:
        raise ArchError(f"{source}: {exc}") from None
    return spec


def format_arch(spec: NetworkSpec) -> str:
    out = io.StringIO()
    out.write("[network]\n")
    out.write(f"output_activation = {spec.output_activation}\n")
    out.write(f"task = {spec.task}\n")
    for i, b in enumerate(spec.blocks):
        out.write(f"\n[block {i + 1}]\n")
        out.write(f"kind = {b.kind}\n")
        out.write(f"in = {b.in_width}\n")
        out.write(f"hidden = {b.hidden}\n")
        out.write(f"out = {b.out_width}\n")
        out.write(f"activation = {b.activation}\n")
        out.write(f"input_activation = {b.input_activation}\n")
        out.write(f"skip = {b.skip}\n")
        out.write(f"m = {b.m}\n")
        out.write(f"nonlinear = {str(b.nonlinear).lower()}\n")
        out.write(f"gate_b = {str(b.gate_b).lower()}\n")
        out.write(f"gate_1 = {str(b.gate_1).lower()}\n")
        out.write(f"gate_2 = {str(b.gate_2).lower()}\n")
        if b.conv is not None:
            convs = ", ".join(f"{k}@{h}x{w}" for k, h, w in b.conv.layers)
            out.write(f"convs = {convs}\n")
            if b.conv.skip is not None:
                k, h, w = b.conv.skip
                out.write(f"skip_conv = {k}@{h}x{w}\n")
        if b.input_mask is not None:
            out.write("input_mask = " + ",".join(repr(float(v)) for v in b.input_mask) + "\n")
    return out.getvalue()


def load_arch(path: str) -> NetworkSpec:
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise ArchError(f"cannot read architecture file {path}: {exc}") from None
    return parse_arch(text, source=path)


def save_arch(path: str, spec: NetworkSpec) -> None:
    with open(path, "w") as fh:
        fh.write(format_arch(spec))
