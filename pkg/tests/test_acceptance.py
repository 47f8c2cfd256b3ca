"""End-to-end acceptance checks. Each test prints one PASS/FAIL line."""
import time

import numpy as np
import pytest

from conftest import analytic_grad, numeric_grad, rel_err
from seenn import numerics as nx
from seenn.conversion import ann_accuracy, build_ann, convert, train_ann
from seenn.data import SyntheticSpec, make_synthetic
from seenn.early_exit import ExitConfig, aet, empirical_aet, infer_dataset, infer_seenn1, sweep_alpha
from seenn.efficiency import OpTrace, throughput_fixed, throughput_seenn1
from seenn.numerics import Tensor
from seenn.policy import (MAX_OP_RATIO, PolicyTrainConfig, TimestepPolicy, candidate_correctness,
                          default_policy_arch, exact_policy_gradient, expected_reward_objective,
                          infer_seenn2, objective_gradient, reinforce_gradient, reward_matrix,
                          train_seenn2)
from seenn.config import RunConfig
from seenn.snn import LIF, ArchConfig, NeuronConfig, build_snn, forward_temporal
from seenn.training import TrainConfig, tet_loss, timestep_accuracy, train, unroll
from test_cli import run_pipeline
from test_numerics import check_op
from test_training import smooth_net


@pytest.fixture
def report(capsys):
    def emit(n, checks, t0, limit):
        elapsed = time.perf_counter() - t0
        checks = dict(checks)
        checks[f"runtime {elapsed:.1f}s < {limit}s"] = elapsed < limit
        failed = [k for k, ok in checks.items() if not ok]
        with capsys.disabled():
            status = "PASS" if not failed else "FAIL"
            print(f"\nAC{n} {status}: " + "; ".join(f"{k}={'ok' if v else 'FAIL'}" for k, v in checks.items()))
        assert not failed, failed
    return emit


def _grad_ok(op, *shapes, seed=0, tol=1e-5):
    gen = np.random.default_rng(seed)
    try:
        check_op(op, *[Tensor(gen.standard_normal(s), requires_grad=True) for s in shapes], tol=tol)
        return True
    except AssertionError:
        return False


def test_ac1_gradient_correctness(report):
    t0 = time.perf_counter()
    gen = np.random.default_rng(5)
    relu_in = gen.standard_normal((4, 4))
    relu_in = np.where(np.abs(relu_in) < 0.1, 0.5, relu_in)
    checks = {
        "matmul": _grad_ok(nx.matmul, (3, 4), (4, 2)),
        "conv": _grad_ok(lambda x, w: nx.conv2d(x, w, stride=1, padding=1), (2, 2, 5, 5), (3, 2, 3, 3)),
        "conv_stride2": _grad_ok(lambda x, w: nx.conv2d(x, w, stride=2, padding=0), (2, 2, 5, 5), (3, 2, 3, 3)),
        "add": _grad_ok(lambda a, b: a + b, (3, 4), (4,)),
        "mul": _grad_ok(lambda a, b: a * b, (3, 4), (3, 4)),
        "div": _grad_ok(lambda a: -a / 3.0, (2, 5)),
        "sum_mean": _grad_ok(lambda a: nx.mean(a, axis=(2, 3)) + a.sum(axis=(2, 3)), (2, 3, 2, 2)),
        "index": _grad_ok(lambda a: a[1:, ::2].reshape(4), (3, 4)),
        "softmax": _grad_ok(nx.softmax, (3, 5)),
        "log_softmax": _grad_ok(nx.log_softmax, (3, 5)),
        "avg_pool": _grad_ok(lambda a: nx.avg_pool2d(a, 2), (2, 2, 4, 4)),
        "cross_entropy": _grad_ok(lambda a: nx.cross_entropy(a, [0, 2, 1], reduction="none"), (3, 3)),
        "batch_norm": _grad_ok(lambda x, g, b: nx.batch_norm(x, g, b)[0], (5, 3, 2, 2), (3,), (3,)),
    }
    try:
        check_op(nx.relu, Tensor(relu_in, requires_grad=True))
        checks["relu"] = True
    except AssertionError:
        checks["relu"] = False

    worst = 0.0
    for reset, tau, bn in (("zero", 0.5, False), ("subtract", 1.0, False), ("zero", 0.5, True)):
        net = smooth_net(reset, tau, bn)
        assert net.n_params() <= 200
        net.train(bn)
        g = np.random.default_rng(3)
        x = g.standard_normal((6, 1, 2, 2)) * 1.5
        y = g.integers(0, 3, 6)
        params = list(net.parameters())

        def build():
            return tet_loss(unroll(net, x, 3), y, [1, 2, 3])

        def value():
            with nx.no_grad():
                return float(build().data)

        for p, a in zip(params, analytic_grad(build, params)):
            worst = max(worst, rel_err(a, numeric_grad(value, p.data)))
    checks[f"bptt_tet worst rel err {worst:.1e} < 1e-4"] = worst < 1e-4
    report(1, checks, t0, 60)


def test_ac2_aet_suite(report):
    t0 = time.perf_counter()
    gen = np.random.default_rng(0)
    bounds = inequality = equal_mono = strict = True
    for _ in range(10_000):
        N, T = int(gen.integers(1, 33)), int(gen.integers(1, 9))
        a = gen.random((N, T)) < gen.random()
        A, E = aet(a), empirical_aet(a)
        bounds &= bool(1 <= E <= T and 1 <= A <= T)
        inequality &= bool(A >= E)
        monotone = np.all(np.diff(a.astype(int), axis=1) >= 0, axis=1)
        if monotone.all():
            equal_mono &= bool(A == E)
        if (~monotone & a[:, -1]).any():
            strict &= bool(A > E)
    report(2, {"within [1,T]": bounds, "aet >= empirical": inequality,
               "equal when monotone": equal_mono, "strict when non-monotone": strict}, t0, 10)


def test_ac3_early_exit_consistency(report):
    t0 = time.perf_counter()
    nx.seed(0)
    net = build_snn(ArchConfig(kind="resnet", in_shape=(1, 8, 8), n_classes=4,
                               stem_channels=4, stages=((4, 1), (8, 2)))).eval()
    x = np.random.default_rng(3).standard_normal((48, 1, 8, 8)) * 2.5
    T, M = 4, 4
    full = forward_temporal(net, x, T).accumulated
    single = infer_seenn1(net, x, ExitConfig(0.7, (T,)))
    forced = infer_seenn1(net, x, ExitConfig.every_step(1.5, T))
    lowest = infer_seenn1(net, x, ExitConfig.every_step(1 / M, T))
    monotone, prev = True, None
    for alpha in np.linspace(1 / M, 1.0, 20):
        t = infer_seenn1(net, x, ExitConfig.every_step(alpha, T)).exit_t
        if prev is not None:
            monotone &= bool((t >= prev).all())
        prev = t
    report(3, {
        "single candidate equals fixed T": np.array_equal(single.logits, full[:, -1])
        and np.array_equal(single.predicted, full[:, -1].argmax(axis=1)),
        "alpha>1 equals full T": bool((forced.exit_t == T).all()) and np.array_equal(forced.logits, full[:, -1]),
        "alpha=1/M exits at t1": bool((lowest.exit_t == 1).all()),
        "exit time monotone over 20 alphas": monotone,
    }, t0, 60)


def test_ac4_exact_policy_gradient(report):
    t0 = time.perf_counter()
    c = np.array([[1.3, -0.7]])
    R = np.array([[0.5, -1.0]])
    fd_ok = True
    for theta0 in (-1.2, 0.0, 0.4, 2.5):
        theta = Tensor(np.array([[theta0]]), requires_grad=True)
        nx.get_tape().clear()
        expected_reward_objective(nx.matmul(theta, Tensor(c)), R).backward()
        g = float(theta.grad[0, 0])
        h = 1e-5
        f = lambda th: float((nx._softmax_np(th * c) * R).sum())
        num = (f(theta0 + h) - f(theta0 - h)) / (2 * h)
        fd_ok &= abs(g - num) <= 1e-6 * max(abs(num), 1e-12)

    nx.seed(0)
    net = build_snn(ArchConfig(kind="mlp", in_shape=(1, 8, 8), n_classes=4, hidden=(64, 64))).eval()
    nx.seed(1)
    pol = TimestepPolicy(default_policy_arch(net, 4), (1, 2, 3, 4), backbone=net)
    x = np.random.default_rng(2).standard_normal((16, 1, 8, 8)) * 2
    labels = np.arange(16) % 4
    exact = exact_policy_gradient(x, labels, net, pol)
    out = forward_temporal(net, x, 4)
    correct = candidate_correctness([out.accumulated[:, t] for t in range(4)], labels, (1, 2, 3, 4))
    mc = reinforce_gradient(pol, x, reward_matrix(correct, (1, 2, 3, 4), 1.0), 100_000,
                            np.random.default_rng(0))
    a = np.concatenate([exact[k].ravel() for k in exact])
    b = np.concatenate([mc[k].ravel() for k in exact])
    cos = float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)))
    const = max(np.abs(g).max() for g in objective_gradient(pol, x, np.full((16, 4), 0.5)).values())
    report(4, {"scalar toy vs finite differences 1e-6": fd_ok,
               f"REINFORCE cosine {cos:.4f} > 0.99": cos > 0.99,
               f"constant reward grad {const:.1e} <= 1e-10": const <= 1e-10}, t0, 120)


def test_ac5_seenn1_efficacy(report):
    t0 = time.perf_counter()
    nx.seed(0)
    tr, te = make_synthetic(SyntheticSpec(n_classes=4, n_per_class=200, dims=(1, 8, 8), sigma_easy=0.5,
                                          sigma_hard=1.2, hard_contrast=0.3, seed=0))
    net = build_snn(ArchConfig(kind="mlp", in_shape=(1, 8, 8), n_classes=4, hidden=(64, 64)))
    train(net, tr, TrainConfig(epochs=15, T=4, lr0=0.05, seed=0))
    net.eval()
    fixed = float(timestep_accuracy(net, te, 4)[-1])
    rows = sweep_alpha(net, te, np.round(np.linspace(0.5, 0.999, 41), 4), (1, 2, 3, 4))
    good = [r for r in rows if r.accuracy >= fixed - 0.005 and r.avg_t <= 2.0]
    best = f"alpha={good[0].alpha:g} acc={good[0].accuracy:.3f} avg_T={good[0].avg_t:.3f}" if good else "none"
    report(5, {f"fixed T4 acc={fixed:.3f}, {best}": bool(good)}, t0, 180)


def test_ac6_seenn2_efficacy(report):
    t0 = time.perf_counter()
    nx.seed(0)
    tr, te = make_synthetic(SyntheticSpec(n_classes=4, n_per_class=300, seed=0, hard_contrast=0.05,
                                          sigma_easy=0.1, sigma_hard=0.1))
    arch = ArchConfig(kind="mlp", in_shape=(1, 8, 8), n_classes=4, hidden=(32, 32))
    neuron = NeuronConfig(tau=1.0, reset="subtract")
    base = build_snn(arch, neuron)
    train(base, tr, TrainConfig(epochs=15, T=4, lr0=0.05, seed=0))
    cands = (1, 2, 3, 4)
    out = {}
    for beta in (1.0, 1e-3, 1e3):
        net = build_snn(arch, neuron)
        net.load_state_dict(base.state_dict())
        pol = TimestepPolicy(default_policy_arch(net, 4), cands, beta, backbone=net)
        train_seenn2(net, pol, tr, PolicyTrainConfig(epochs=10, beta=beta, seed=0), val=te)
        res = infer_seenn2(net, pol, te.images, te.labels)
        fixed = float(timestep_accuracy(net, te, 4)[-1])
        easy, hard = (float(res.exit_t[te.difficulty == d].mean()) for d in (0, 1))
        out[beta] = (res, fixed, easy, hard)
    res, fixed, easy, hard = out[1.0]
    lo, hi = out[1e-3][0].avg_t, out[1e3][0].avg_t
    report(6, {
        f"easy T {easy:.2f} + 0.3 <= hard T {hard:.2f}": hard - easy >= 0.3,
        f"acc {res.accuracy:.3f} vs fixed {fixed:.3f} within 1pt": res.accuracy >= fixed - 0.01,
        f"avg_T {res.avg_t:.2f} < 4": res.avg_t < 4,
        f"beta=1e-3 avg_T {lo:.2f} <= 1.05": lo <= 1.05,
        f"beta=1e3 avg_T {hi:.2f} >= 3.8": hi >= 3.8,
    }, t0, 600)


def test_ac7_conversion_parity(report):
    t0 = time.perf_counter()
    nx.seed(2)
    tr, te = make_synthetic(SyntheticSpec(n_classes=4, n_per_class=200, dims=(1, 8, 8), sigma_easy=0.5,
                                          sigma_hard=1.2, hard_contrast=0.3, seed=2))
    ann = build_ann(ArchConfig(kind="mlp", in_shape=(1, 8, 8), n_classes=4, hidden=(32, 32)), steps=4)
    train_ann(ann, tr, TrainConfig(epochs=30, lr0=0.05, seed=2))
    a_acc = ann_accuracy(ann, te)
    snn = convert(ann).snn
    s_acc = float(timestep_accuracy(snn, te, 4)[-1])

    gen = np.random.default_rng(11)
    rate_ok = True
    for _ in range(100):
        V = float(gen.uniform(0.5, 2.0))
        c = float(gen.uniform(0, V))
        T = int(gen.integers(1, 65))
        lif = LIF(NeuronConfig.conversion(threshold=V))
        spikes = sum(float(lif(Tensor(np.array([c]))).data[0]) > 0 for _ in range(T))
        rate_ok &= abs(spikes - round(c * T / V)) <= 1
    report(7, {f"ANN {a_acc:.3f} vs SNN T4 {s_acc:.3f} within 2pt": abs(a_acc - s_acc) <= 0.02,
               "rate coding round(cT/V)+-1 over 100 pairs": rate_ok}, t0, 300)


def test_ac8_efficiency_accounting(report):
    t0 = time.perf_counter()
    nx.seed(0)
    tr, te = make_synthetic(SyntheticSpec(n_classes=4, n_per_class=200, dims=(1, 8, 8), sigma_easy=0.5,
                                          sigma_hard=1.2, hard_contrast=0.3, seed=0))
    net = build_snn(ArchConfig(kind="mlp", in_shape=(1, 8, 8), n_classes=4, hidden=(64, 64)))
    train(net, tr, TrainConfig(epochs=5, T=4, lr0=0.05, seed=0))
    net.eval()
    fixed_trace = OpTrace()
    forward_temporal(net, te.images, 4, trace=fixed_trace)
    sop_ok = True
    for alpha in (0.5, 0.7, 0.9, 0.99):
        tr_ = OpTrace()
        res = infer_dataset(net, te, ExitConfig.every_step(alpha, 4), trace=tr_)
        if res.avg_t < 4:
            sop_ok &= tr_.total_sops < fixed_trace.total_sops

    default = RunConfig().arch
    backbone = build_snn(default)
    ratio = TimestepPolicy(default_policy_arch(backbone, 4), (1, 2, 3, 4), backbone=backbone).ratio

    # conv backbone, so per-step compute outweighs interpreter overhead
    nx.seed(0)
    conv = build_snn(ArchConfig(kind="resnet", in_shape=(3, 16, 16), n_classes=10)).eval()
    x = np.random.default_rng(0).standard_normal((100, 3, 16, 16))
    fast = throughput_seenn1(conv, x, ExitConfig.every_step(1 / 10, 4)).samples_per_s
    slow = throughput_fixed(conv, x, 4).samples_per_s
    report(8, {"SEENN-I SOPs < fixed-T SOPs when avg_T < T": sop_ok,
               f"policy MAC ratio {100 * ratio:.2f}% <= {100 * MAX_OP_RATIO:g}%": ratio <= MAX_OP_RATIO,
               f"throughput alpha=1/M vs fixed T4 {fast / slow:.2f}x >= 2x": fast >= 2 * slow}, t0, 300)


def test_ac9_determinism(report, tmp_path):
    t0 = time.perf_counter()
    (tmp_path / "a").mkdir()
    (tmp_path / "b").mkdir()
    a = run_pipeline(tmp_path / "a")
    b = run_pipeline(tmp_path / "b")
    names = sorted(p.name for p in a.iterdir() if p.name not in ("throughput.json", "effective_config.ini"))
    same = [n for n in names if (a / n).read_bytes() == (b / n).read_bytes()]
    diff = sorted(set(names) - set(same))
    report(9, {f"{len(same)}/{len(names)} outputs byte-identical{' ' + str(diff) if diff else ''}": not diff},
           t0, 300)
