"""Command-line entry point: training runs, static complexity analysis,
stability certification sweeps, the verification battery, and dataset /
architecture export. Every command is deterministic given (config, seed).

Exit codes: 0 ok, 1 unexpected failure, 2 input error, 3 training
divergence, 4 verification failure.
"""

from __future__ import annotations

import argparse
import math
import os
import sys
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from . import __version__, archfile, complexity, data as data_mod, odelab, svgplot, verify
from .archfile import ArchError
from .config import ConfigError, RunConfig, load_config
from .model import BlockSpec, NetworkSpec, init_weights, network_from_widths
from .numerics import Rng
from .trainer import DivergenceError, metrics_csv, train

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_INPUT = 2
EXIT_DIVERGENCE = 3
EXIT_VERIFY = 4


def _header(cfg: RunConfig, seed: int) -> str:
    return f"# gatecut/{__version__}\n# config {cfg.digest} seed {seed}\n"


def _worker_count() -> int:
    raw = os.environ.get("GATECUT_THREADS", "")
    try:
        n = int(raw)
    except ValueError:
        n = 0
    return max(1, n) if n else 1


def build_dataset(cfg: RunConfig) -> data_mod.Dataset:
    d = cfg.data
    rng = Rng(d.seed)
    if d.kind == "teacher":
        if d.teacher_arch:
            spec = archfile.load_arch(d.teacher_arch)
        else:
            spec = network_from_widths(
                d.teacher_in, d.teacher_hidden, d.teacher_out, d.teacher_blocks
            )
        weights = init_weights(spec, Rng(d.teacher_seed))
        return data_mod.gen_teacher_student(
            spec, weights, d.n, d.noise, rng, d.test_fraction
        )
    if d.kind == "blobs":
        return data_mod.gen_blobs(d.classes, d.n, d.separation, rng, d.dim, d.test_fraction)
    if d.kind == "spirals":
        return data_mod.gen_spirals(d.n, d.turns, rng, d.noise, d.test_fraction)
    if d.kind == "idx":
        if not d.images or not d.labels:
            raise ConfigError("[data] idx kind needs images and labels paths")
        return data_mod.load_idx(d.images, d.labels, d.test_images, d.test_labels)
    raise ConfigError(f"unknown dataset kind {d.kind!r}")


def _arch_report(res) -> str:
    lines = ["architecture before -> after pruning", ""]
    lines.append(f"{'block':>5} {'hidden before':>14} {'hidden after':>13} {'path':>6}")
    for i, (b, c) in enumerate(zip(res.spec.blocks, res.compact_spec.blocks)):
        path = "alive" if c.nonlinear else "dead"
        hb = b.hidden if b.nonlinear else 0
        ha = c.hidden if c.nonlinear else 0
        lines.append(f"{i + 1:>5} {hb:>14} {ha:>13} {path:>6}")
    before = complexity.analyze_static(res.spec)
    after_view = complexity.alive_view(res.state.gates, res.spec)
    fpr, ppr, layers = complexity.ratios(res.consts, after_view)
    lines.append("")
    lines.append(f"baseline: {before.total_flops:.0f} FLOPS, {before.total_params:.0f} params")
    lines.append(f"pruned:   fPR {100 * fpr:.2f}%  pPR {100 * ppr:.2f}%  layers left {layers}")
    return "\n".join(lines) + "\n"


def cmd_train(cfg: RunConfig, out: str, seed: int | None) -> int:
    if not cfg.arch:
        raise ConfigError("[model] arch is required for train")
    if seed is not None:
        cfg.hyper.seed = seed
        cfg.data.seed = seed
    spec = archfile.load_arch(cfg.arch)
    dataset = build_dataset(cfg)
    os.makedirs(out, exist_ok=True)

    theta_hist: list[tuple[int, list[float], list[float]]] = []

    def on_epoch(epoch, spec_, weights_, gates_):
        tb = [gates_.blocks[l].theta_b for l in range(len(spec_.blocks))]
        t1 = []
        for g in gates_.blocks:
            if g.theta1 is None:
                t1.append(float("nan"))
            else:
                live = g.theta1[g.alive1]
                t1.append(float(np.mean(live)) if live.size else 0.0)
        theta_hist.append((epoch, [t if t is not None else float("nan") for t in tb], t1))

    res = train(
        spec,
        dataset,
        cfg.hyper,
        checkpoint_path=os.path.join(out, "checkpoint.npz"),
        on_epoch=on_epoch,
    )
    head = _header(cfg, cfg.hyper.seed)
    with open(os.path.join(out, "metrics.csv"), "w") as fh:
        fh.write(head + metrics_csv(res.metrics))
    with open(os.path.join(out, "prune_events.log"), "w") as fh:
        fh.write(head)
        for ev in res.events:
            fh.write(ev.line() + "\n")
    with open(os.path.join(out, "report.txt"), "w") as fh:
        fh.write(head + _arch_report(res))
    archfile.save_arch(os.path.join(out, "final.arch"), res.compact_spec)
    if cfg.plots:
        epochs = [m.epoch for m in res.metrics]
        if dataset.task == "classification":
            curves = {
                "train acc": (epochs, [m.train_acc for m in res.metrics]),
                "test acc": (epochs, [m.test_acc for m in res.metrics]),
            }
            ylabel = "accuracy"
        else:
            curves = {"train loss": (epochs, [m.train_loss for m in res.metrics])}
            ylabel = "loss"
        with open(os.path.join(out, "accuracy.svg"), "w") as fh:
            fh.write(
                svgplot.line_chart(
                    curves, "learning curves", "epoch", ylabel, header=head.strip()
                )
            )
        series = {}
        for l in range(len(spec.blocks)):
            ys = [h[2][l] for h in theta_hist]
            if not all(math.isnan(v) for v in ys):
                series[f"block {l + 1} mean theta1"] = ([h[0] for h in theta_hist], ys)
        with open(os.path.join(out, "theta.svg"), "w") as fh:
            fh.write(
                svgplot.line_chart(
                    series, "gate probabilities", "epoch", "mean theta1", header=head.strip()
                )
            )
    print(
        f"trained {cfg.hyper.epochs} epochs: "
        f"fPR {100 * res.metrics[-1].fpr:.2f}% pPR {100 * res.metrics[-1].ppr:.2f}% "
        f"layers {res.metrics[-1].layers_left} -> {out}"
    )
    return EXIT_OK


def cmd_analyze(cfg: RunConfig, out: str, seed: int | None) -> int:
    if not cfg.arch:
        raise ConfigError("[model] arch is required for analyze")
    spec = archfile.load_arch(cfg.arch)
    report = complexity.analyze_static(spec)
    head = _header(cfg, seed or 0)
    sys.stdout.write(report.to_text())
    if out:
        os.makedirs(out, exist_ok=True)
        with open(os.path.join(out, "report.txt"), "w") as fh:
            fh.write(head + report.to_text())
        with open(os.path.join(out, "report.csv"), "w") as fh:
            fh.write(head + report.to_csv())
    return EXIT_OK


def _build_host(cfg: RunConfig):
    o = cfg.odelab
    spec = NetworkSpec(
        [
            BlockSpec(
                o.in_width,
                o.hidden,
                o.out_width,
                activation=o.activation,
                skip="dense",
                gate_2=False,
            )
        ]
    )
    spec.validate()
    weights = init_weights(spec, Rng(o.weight_seed))
    rng = Rng(o.data_seed)
    x = rng.standard_normal(o.n * o.in_width).reshape(o.n, o.in_width)
    y = o.noise * rng.standard_normal(o.n * o.out_width).reshape(o.n, o.out_width)
    return odelab.make_host(spec, weights, x, y, o.nu, o.alpha, o.beta, o.lam)


def cmd_odelab(cfg: RunConfig, out: str, seed: int | None) -> int:
    o = cfg.odelab
    base_seed = seed if seed is not None else o.seed
    host = _build_host(cfg)
    eta, kappa = odelab.estimate_eta_kappa(host, o.samples, Rng(base_seed + 17), o.sample_scale)
    sc = odelab.stability_consts(host, eta, kappa)
    os.makedirs(out, exist_ok=True)
    head = _header(cfg, base_seed)

    whichs = ["B", "U"] if o.which == "both" else [o.which]
    jobs = []
    for which in whichs:
        for t in range(o.trials):
            jobs.append((which, t))

    def run_job(job):
        which, t = job
        s0 = odelab.random_state_in_region(
            host, sc, Rng(base_seed + 100 + t + (0 if which == "B" else 10**6)), which, 0
        )
        return odelab.certify(
            host, s0, sc, dt=o.dt, t_end=o.t_end, tol=o.tol, method=o.method, which=which
        )

    workers = _worker_count()
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            verdicts = list(pool.map(run_job, jobs))
    else:
        verdicts = [run_job(j) for j in jobs]

    lines = [
        f"host: {o.in_width}-{o.hidden}-{o.out_width} {o.activation}, "
        f"nu={o.nu} alpha={o.alpha} beta={o.beta} lambda={o.lam}",
        f"constants: R={sc.r:.6g} R_m={sc.r_m:.6g} eta={eta:.6g} kappa={kappa:.6g} "
        f"radius={sc.radius:.6g}",
    ]
    ok = True
    for which in whichs:
        vs = [v for (j, v) in zip(jobs, verdicts) if j[0] == which]
        n_pass = sum(v.status == "PASS" for v in vs)
        n_oos = sum(v.status == "OUT_OF_SCOPE" for v in vs)
        lines.append(f"{which}: {n_pass}/{len(vs)} PASS ({n_oos} out of scope)")
        ok = ok and n_pass + n_oos == len(vs)
        for i, v in enumerate(vs[:3]):
            with open(os.path.join(out, f"trajectory_{which}_{i}.csv"), "w") as fh:
                fh.write(head + v.trajectory.to_csv())
    series = {}
    for i, v in enumerate(verdicts[:8]):
        traj = v.trajectory
        series[f"run {i} ({v.which})"] = (list(traj.t), list(traj.lam_b))
    with open(os.path.join(out, "lyapunov.svg"), "w") as fh:
        fh.write(
            svgplot.line_chart(
                series, "Lyapunov descent", "t", "Lambda_B", header=head.strip()
            )
        )
    if o.dt_halving:
        s0 = odelab.random_state_in_region(host, sc, Rng(base_seed + 999), whichs[0], 0)
        ends = []
        for dt in (o.dt, o.dt / 2, o.dt / 4):
            traj = odelab.integrate(host, s0, dt, o.t_end, o.method)
            f = traj.final
            ends.append(np.concatenate([f.w1.ravel(), f.w2.ravel(), f.theta1, [f.theta_b]]))
        e1 = float(np.linalg.norm(ends[0] - ends[2]))
        e2 = float(np.linalg.norm(ends[1] - ends[2]))
        order = math.log2(e1 / e2) if e2 > 0 else float("inf")
        lines.append(f"dt halving: |x(dt)-x(dt/4)|={e1:.3e} |x(dt/2)-x(dt/4)|={e2:.3e} "
                     f"observed order ~{order:.2f}")
    summary = "\n".join(lines) + "\n"
    with open(os.path.join(out, "verdicts.txt"), "w") as fh:
        fh.write(head + summary)
    sys.stdout.write(summary)
    return EXIT_OK if ok else EXIT_FAILURE


def cmd_verify(cfg: RunConfig, out: str, seed: int | None) -> int:
    results = verify.run_all(seed if seed is not None else cfg.verify_seed)
    lines = []
    for r in results:
        lines.append(f"{r.name:32s} {'PASS' if r.passed else 'FAIL'}  {r.detail}")
    text = "\n".join(lines) + "\n"
    sys.stdout.write(text)
    if out:
        os.makedirs(out, exist_ok=True)
        with open(os.path.join(out, "verify.txt"), "w") as fh:
            fh.write(_header(cfg, seed or cfg.verify_seed) + text)
    return EXIT_OK if all(r.passed for r in results) else EXIT_VERIFY


def cmd_export(cfg: RunConfig, out: str, seed: int | None) -> int:
    """Materialize the configured dataset as CSV and re-emit the architecture
    in canonical form, making a run's inputs portable."""
    os.makedirs(out, exist_ok=True)
    wrote = []
    if seed is not None:
        cfg.data.seed = seed
    dataset = build_dataset(cfg)
    path = os.path.join(out, "dataset.csv")
    data_mod.export_csv(dataset, path, header=_header(cfg, seed if seed is not None else cfg.data.seed))
    wrote.append(path)
    if cfg.arch:
        spec = archfile.load_arch(cfg.arch)
        path = os.path.join(out, "canonical.arch")
        archfile.save_arch(path, spec)
        wrote.append(path)
    print("exported: " + ", ".join(wrote))
    return EXIT_OK


COMMANDS = {
    "train": cmd_train,
    "analyze": cmd_analyze,
    "odelab": cmd_odelab,
    "verify": cmd_verify,
    "export": cmd_export,
}


def _apply_sweep_value(cfg: RunConfig, key: str, raw: str) -> None:
    if "." not in key:
        raise ConfigError(f"sweep key {key!r} must look like section.key")
    section, name = key.split(".", 1)
    from .config import parse_config

    # reuse the config parser's strict typing by round-tripping one key
    text = f"[{section}]\n{name} = {raw}\n"
    partial = parse_config(text)
    if section == "train":
        if name == "plots":
            cfg.plots = partial.plots
        elif name == "lambda":
            cfg.hyper.lam = partial.hyper.lam
        else:
            setattr(cfg.hyper, name, getattr(partial.hyper, name))
    elif section == "data":
        setattr(cfg.data, name, getattr(partial.data, name))
    elif section == "odelab":
        rename = {"in": "in_width", "out": "out_width", "lambda": "lam"}
        attr = rename.get(name, name)
        setattr(cfg.odelab, attr, getattr(partial.odelab, attr))
    else:
        raise ConfigError(f"cannot sweep over section [{section}]")


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="gatecut",
        description="training-time structured pruning for gated residual networks",
    )
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", required=True, help="run configuration file")
    parser.add_argument("--seed", type=int, default=None, help="override all seeds")
    parser.add_argument("--out", default="out", help="output directory")
    parser.add_argument(
        "--sweep", default=None, metavar="KEY=v1,v2,...", help="run once per value"
    )
    args = parser.parse_args(argv)

    try:
        cfg = load_config(args.config)
        if args.sweep is None:
            return COMMANDS[args.command](cfg, args.out, args.seed)
        if "=" not in args.sweep:
            raise ConfigError("--sweep expects KEY=v1,v2,...")
        key, values = args.sweep.split("=", 1)
        status = EXIT_OK
        for raw in values.split(","):
            run_cfg = load_config(args.config)
            _apply_sweep_value(run_cfg, key, raw)
            sub = os.path.join(args.out, f"{key.split('.')[-1]}={raw}")
            status = max(status, COMMANDS[args.command](run_cfg, sub, args.seed))
        return status
    except (ConfigError, ArchError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except DivergenceError as exc:
        print(f"divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except Exception as exc:  # pragma: no cover - last resort
        print(f"unexpected failure: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
