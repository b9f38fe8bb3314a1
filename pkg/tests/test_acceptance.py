"""End-to-end acceptance battery.

Each test here pins one of the headline guarantees of the engine at its
stated tolerance: closed-form gate math, vertex optimality of the gate
objective, gradient oracles, the regularization-schedule matching identity,
complexity accounting against published ResNet50 totals, empirical
convergence certification, masked/compacted equivalence during real runs,
directional hyperparameter behavior, end-to-end pruned-accuracy quality,
and bit-exact determinism.
"""

import math
import os

import numpy as np
import pytest

from gatecut import cli, complexity, odelab
from gatecut.archfile import load_arch, save_arch
from gatecut.data import Dataset, gen_teacher_student, load_idx, write_idx
from gatecut.gates import GateState, flattening_pdf, j_flat, j_penalty, pi_star
from gatecut.model import (
    BlockSpec,
    NetworkSpec,
    forward,
    init_weights,
    network_from_widths,
)
from gatecut.numerics import Rng, finite_diff_grad
from gatecut.trainer import (
    Hyperparams,
    _mean_sample,
    compact,
    expected_cost,
    gate_probs,
    theta_grad_exact_all,
    train,
    vertex_losses,
    vertex_verify,
)


def random_tiny_instance(seed, n_samples=10, theta_lo=0.15, theta_hi=0.9):
    """Two-block net with at most 11 gates: exact enumeration territory."""
    rng = Rng(seed)
    spec = NetworkSpec(
        [
            BlockSpec(2, 3, 2, activation="tanh", skip="dense", gate_2=False),
            BlockSpec(2, 3, 2, activation="tanh", skip="identity", gate_2=True),
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
    x = rng.standard_normal(2 * n_samples).reshape(n_samples, 2)
    y = rng.standard_normal(2 * n_samples).reshape(n_samples, 2)
    return spec, w, state, x, y


# ----------------------------------------------------------- criterion 1


def test_closed_form_gate_math():
    rng = Rng(0)
    grid = np.linspace(1e-3, 1.0 - 1e-3, 999)
    for _ in range(50):
        theta = 0.01 + 0.98 * float(rng.uniform(1)[0])
        gamma = 0.05 + 0.9 * float(rng.uniform(1)[0])
        vals = np.array([j_penalty(p, theta, gamma) for p in grid])
        best = grid[int(np.argmin(vals))]
        assert abs(best - pi_star(theta, gamma)) <= 1e-3 + 1e-12
        ps = pi_star(theta, gamma)
        assert abs(j_penalty(ps, theta, gamma) - j_flat(theta, gamma)) <= 1e-9
        assert float(vals.min()) >= j_flat(theta, gamma) - 1e-12
    for gamma in (0.1, 0.5, 0.9):
        pi = np.linspace(0.0, 1.0, 200_001)
        dens = np.array([flattening_pdf(p, gamma) for p in pi])
        assert abs(np.trapezoid(dens, pi) - 1.0) <= 1e-8


# ----------------------------------------------------------- criterion 2


def test_optima_are_deterministic_networks():
    for seed in range(20):
        spec, w, state, x, y = random_tiny_instance(100 + seed)
        consts = complexity.derive_consts(spec)
        rep = vertex_verify(
            spec, w, state, x, y, consts,
            nu=0.1, alpha=0.2, beta=0.5, lam=1e-3,
            trials=200, rng=Rng(500 + seed),
        )
        assert rep["gates"] <= 12
        assert rep["min_vertex"] <= rep["min_interior"] + 1e-9
        assert rep["midpoint_residual"] <= 1e-10
        assert rep["deterministic_optimum"]


# ----------------------------------------------------------- criterion 3


def test_gradient_correctness():
    from gatecut.model import backward, loss

    # weight gradients against central finite differences
    for seed in range(10):
        spec, w, state, x, y = random_tiny_instance(200 + seed, n_samples=6)
        xi = _mean_sample(state, spec)
        _, trace = forward(spec, w, xi, x)
        grads = backward(spec, w, trace, y)
        for l, bw in enumerate(w.blocks):
            for name in ("w1", "w2", "w3"):
                mat = getattr(bw, name)
                if mat is None:
                    continue

                def f(v, mat=mat):
                    saved = mat.copy()
                    mat[:] = v.reshape(mat.shape)
                    out, _ = forward(spec, w, xi, x)
                    mat[:] = saved
                    return loss(out, y, spec.task)

                fd = finite_diff_grad(f, mat.ravel().copy(), 1e-5).reshape(mat.shape)
                an = getattr(grads[l], name)
                denom = max(float(np.abs(fd).max()), 1e-8)
                assert float(np.abs(fd - an).max()) / denom <= 1e-5

    # exact gate gradients against finite differences of the enumerated
    # expectation (affine in each probability, so this is exact)
    for seed in range(5):
        spec, w, state, x, y = random_tiny_instance(300 + seed, n_samples=6)
        exact = theta_grad_exact_all(spec, w, state, x, y)
        ids, losses = vertex_losses(spec, w, state, x, y)
        fd = finite_diff_grad(
            lambda p: expected_cost(losses, p), gate_probs(state, ids), 1e-5
        )
        for j, gid in enumerate(ids):
            assert abs(exact[gid] - fd[j]) <= 1e-9

    # complexity-index gradients against finite differences
    for seed in range(10):
        spec2, _, state, _, _ = random_tiny_instance(400 + seed)
        consts2 = complexity.derive_consts(spec2)
        alpha, beta = 0.3, 0.6
        view = complexity.theta_view(state, spec2)
        reg = complexity.grad_jfp(view, consts2, alpha, beta)
        for l, g in enumerate(state.blocks):
            if g.theta_b is not None:

                def fb(v, l=l):
                    vv = complexity.theta_view(state, spec2)
                    vv.tb[l] = v[0]
                    return complexity.j_fp_view(vv, consts2, alpha, beta)

                fd = finite_diff_grad(fb, np.array([g.theta_b]))[0]
                assert abs(fd - reg.db[l]) <= 1e-8
            if g.theta1 is not None:

                def f1(v, l=l):
                    vv = complexity.theta_view(state, spec2)
                    vv.n1[l] = float(np.sum(v))
                    return complexity.j_fp_view(vv, consts2, alpha, beta)

                fd = finite_diff_grad(f1, g.theta1.copy())
                assert float(np.abs(fd - reg.d1[l]).max()) <= 1e-8
            if g.theta2 is not None:

                def f2(v, l=l):
                    vv = complexity.theta_view(state, spec2)
                    vv.n2[l] = float(np.sum(v))
                    return complexity.j_fp_view(vv, consts2, alpha, beta)

                fd = finite_diff_grad(f2, g.theta2.copy())
                assert float(np.abs(fd - reg.d2[l]).max()) <= 1e-8


# ----------------------------------------------------------- criterion 4


def test_schedule_matching_identity():
    spec = network_from_widths(3, 4, 2, 4, activation="tanh")
    consts = complexity.derive_consts(spec)
    rng = Rng(4)
    for draw in range(50):
        st = GateState.from_spec(spec, 0.5)
        for g in st.blocks:
            if g.theta_b is not None:
                g.theta_b = 0.05 + 0.9 * float(rng.uniform(1)[0])
            if g.theta1 is not None:
                g.theta1[:] = 0.05 + 0.9 * rng.uniform(g.theta1.size)
            if g.theta2 is not None:
                g.theta2[:] = 0.05 + 0.9 * rng.uniform(g.theta2.size)
        nu = 0.05 + float(rng.uniform(1)[0])
        alpha = float(rng.uniform(1)[0])
        beta = float(rng.uniform(1)[0])
        n = 1 + int(rng.uniform(1)[0] * 10_000)
        view = complexity.theta_view(st, spec)
        sched = complexity.gamma_schedule(view, consts, nu, alpha, beta, n)
        gap = complexity.schedule_identity_gap(view, consts, sched, nu, alpha, beta, n)
        assert gap <= 1e-10


# ----------------------------------------------------------- criterion 5


def test_resnet50_accounting_and_toy_hand_counts():
    import gatecut

    path = os.path.join(os.path.dirname(gatecut.__file__), "descriptors", "resnet50.arch")
    rep = complexity.analyze_static(load_arch(path))
    assert abs(rep.total_params - 25.56e6) / 25.56e6 <= 0.02
    assert abs(rep.total_flops - 3.72e9) / 3.72e9 <= 0.10

    toy = NetworkSpec([BlockSpec(4, 3, 5, skip="dense", gate_2=False)])
    toy.validate()
    toy_rep = complexity.analyze_static(toy)
    assert toy_rep.total_flops == 50.0
    assert toy_rep.total_params == 50.0


# ----------------------------------------------------------- criterion 6


def certification_host():
    spec = NetworkSpec(
        [BlockSpec(3, 2, 2, activation="softplus", skip="dense", gate_2=False)]
    )
    spec.validate()
    rng = Rng(5)
    w = init_weights(spec, rng)
    x = rng.standard_normal(40 * 3).reshape(40, 3)
    y = rng.standard_normal(40 * 2).reshape(40, 2)
    return odelab.make_host(spec, w, x, y, nu=0.3, alpha=0.2, beta=0.5, lam=1.0)


def test_certified_convergence_block_and_unit():
    host = certification_host()
    eta, kappa = odelab.estimate_eta_kappa(host, 200, Rng(6), 1.0)
    sc = odelab.stability_consts(host, eta, kappa)
    sc.validate()

    for which, unit in (("B", 0), ("U", 0)):
        for trial in range(100):
            s0 = odelab.random_state_in_region(host, sc, Rng(1000 * trial + 17), which, unit)
            v = odelab.certify(host, s0, sc, dt=1e-2, t_end=10.0, which=which, unit=unit)
            assert v.status == "PASS", f"{which} trial {trial}: {v.status}"
            assert v.max_lyapunov_increase <= max(10.0 * 1e-2**4, 1e-12)
            assert v.terminal_w_norm <= 1e-3
            f = v.trajectory.final
            if which == "B":
                assert min(float(np.sum(f.theta1)), f.theta_b) <= 1e-3
            else:
                assert min(float(f.theta1[unit]), f.theta_b) <= 1e-3

    # invariant-set initialization: the gate parked at 0 stays there exactly
    s = odelab.random_state_in_region(host, sc, Rng(77), "B")
    s.theta_b = 0.0
    traj = odelab.integrate(host, s, 1e-2, 5.0, "rk4")
    assert abs(traj.final.theta_b) <= 1e-12


# ----------------------------------------------------------- criterion 7


def test_masked_vs_compacted_during_training():
    tspec = network_from_widths(3, 3, 1, 3, activation="tanh")
    tw = init_weights(tspec, Rng(99))
    ds = gen_teacher_student(tspec, tw, 3000, 0.01, Rng(7))
    spec = network_from_widths(3, 10, 1, 4, activation="tanh")
    probe = Rng(8).standard_normal(100 * 3).reshape(100, 3)
    worst = 0.0
    checks = 0

    def on_epoch(epoch, spec_now, weights, gates):
        nonlocal worst, checks
        cspec, cw, cstate = compact(spec_now, weights, gates)
        a, _ = forward(spec_now, weights, _mean_sample(gates, spec_now), probe)
        b, _ = forward(cspec, cw, _mean_sample(cstate, cspec), probe)
        worst = max(worst, float(np.abs(a - b).max()))
        checks += 1

    res = train(
        spec, ds,
        Hyperparams(nu=0.02, epochs=10, seed=2, w_lr=0.02, finalize_epoch=8),
        on_epoch=on_epoch,
    )
    assert checks == 10
    assert res.events, "run never pruned anything; equivalence check is vacuous"
    assert worst <= 1e-6


# ----------------------------------------------------------- criterion 8


def directional_data(seed):
    tspec = network_from_widths(4, 10, 2, 5, activation="tanh")
    tw = init_weights(tspec, Rng(777))
    for bw in tw.blocks:
        if bw.w1 is not None:
            bw.w1 *= 4.0  # push the teacher well into its nonlinear range
    return gen_teacher_student(tspec, tw, 10_000, 0.01, Rng(seed))


def directional_run(nu, alpha, beta, seed):
    spec = network_from_widths(4, 16, 2, 8, activation="tanh")
    ds = directional_data(100 + seed)
    hp = Hyperparams(
        nu=nu, alpha=alpha, beta=beta, epochs=12, seed=seed,
        w_lr=0.01, theta_lr=0.005, finalize_epoch=10,
    )
    m = train(spec, ds, hp).metrics[-1]
    return m.fpr, m.ppr, m.layers_left


def test_directional_hyperparameter_behavior():
    seeds = (0, 1, 2)

    # pruning pressure: both ratios nondecreasing in nu (seed-median)
    by_nu = {nu: [directional_run(nu, 0.0, 0.5, s) for s in seeds] for nu in (0.0, 0.01, 0.05)}
    med = {nu: (np.median([r[0] for r in runs]), np.median([r[1] for r in runs]))
           for nu, runs in by_nu.items()}
    assert med[0.0][0] <= med[0.01][0] <= med[0.05][0]
    assert med[0.0][1] <= med[0.01][1] <= med[0.05][1]
    assert med[0.05][0] > 0.0  # the sweep actually prunes

    # layer emphasis: alpha=0.5 keeps no more layers than alpha=0
    layers0 = np.median([directional_run(0.01, 0.0, 0.5, s)[2] for s in seeds])
    layers5 = np.median([directional_run(0.01, 0.5, 0.5, s)[2] for s in seeds])
    assert layers5 <= layers0

    # beta trade-off: the FLOPS-weighted run must not favor parameters over
    # FLOPS, and vice versa
    run_b1 = [directional_run(0.01, 0.0, 1.0, s) for s in seeds]
    run_b0 = [directional_run(0.01, 0.0, 0.0, s) for s in seeds]
    f1, p1 = np.median([r[0] for r in run_b1]), np.median([r[1] for r in run_b1])
    f0, p0 = np.median([r[0] for r in run_b0]), np.median([r[1] for r in run_b0])
    assert f1 >= p1 - 1e-12
    assert f0 <= p0 + 1e-12


# ----------------------------------------------------------- criterion 9


def mnist_dir():
    cand = os.environ.get("GATECUT_MNIST_DIR", os.path.join("data", "mnist"))
    names = ("train-images-idx3-ubyte", "train-labels-idx1-ubyte",
             "t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte")
    if all(os.path.exists(os.path.join(cand, n)) for n in names):
        return cand, names
    return None, names


def image_classification_dataset(tmp_path):
    """MNIST when the files are on disk, otherwise the bundled-size digits
    set routed through the same IDX reader so the full pipeline is
    exercised either way."""
    found, names = mnist_dir()
    if found:
        ds = load_idx(*(os.path.join(found, n) for n in names))
        return ds, "mnist"
    sklearn = pytest.importorskip("sklearn.datasets")
    d = sklearn.load_digits()
    images = (d.images * (255.0 / 16.0)).astype(np.uint8)
    labels = d.target.astype(np.uint8)
    order = np.argsort(Rng(42).uniform(len(images)), kind="stable")
    images, labels = images[order], labels[order]
    ip = str(tmp_path / "digits-images.idx")
    lp = str(tmp_path / "digits-labels.idx")
    n_test = 360
    write_idx(ip, lp, images[n_test:], labels[n_test:])
    it = str(tmp_path / "digits-test-images.idx")
    lt = str(tmp_path / "digits-test-labels.idx")
    write_idx(it, lt, images[:n_test], labels[:n_test])
    return load_idx(ip, lp, it, lt), "digits"


def test_end_to_end_pruned_quality(tmp_path):
    ds, source = image_classification_dataset(tmp_path)
    in_width = ds.inputs.shape[1]
    if source == "mnist":
        width, blocks, epochs = 128, 6, 6
    else:
        width, blocks, epochs = 128, 6, 40

    def run(nu):
        spec = network_from_widths(
            in_width, width, 10, blocks, activation="relu", task="classification"
        )
        hp = Hyperparams(
            nu=nu, alpha=0.0, beta=0.0, epochs=epochs, seed=0, batch_size=32,
            w_lr=0.02, w_schedule="cosine", theta_lr=0.005,
            finalize_epoch=epochs - 5 if nu > 0 else None,
        )
        m = train(spec, ds, hp).metrics[-1]
        return m.test_acc, m.ppr

    base_acc, _ = run(0.0)
    assert base_acc >= 0.95
    pruned_acc, ppr = run(0.03)
    assert ppr >= 0.30
    assert pruned_acc >= base_acc - 0.02


# ---------------------------------------------------------- criterion 10


def test_byte_identical_metrics(tmp_path):
    arch = tmp_path / "net.arch"
    save_arch(str(arch), network_from_widths(3, 8, 1, 4, activation="tanh"))
    cfg = tmp_path / "run.cfg"
    cfg.write_text(
        f"""
[data]
kind = teacher
n = 600
teacher_in = 3
teacher_hidden = 3
teacher_out = 1
teacher_blocks = 3

[model]
arch = {arch}

[train]
nu = 0.03
epochs = 3
seed = 5
batch_size = 25
"""
    )
    a, b = str(tmp_path / "a"), str(tmp_path / "b")
    assert cli.main(["train", "--config", str(cfg), "--out", a]) == 0
    assert cli.main(["train", "--config", str(cfg), "--out", b]) == 0
    with open(os.path.join(a, "metrics.csv"), "rb") as fh:
        ma = fh.read()
    with open(os.path.join(b, "metrics.csv"), "rb") as fh:
        mb = fh.read()
    assert ma == mb
