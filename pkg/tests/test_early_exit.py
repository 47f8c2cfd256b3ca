import math
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from seenn import numerics as nx
from seenn.data import SyntheticSpec, make_synthetic
from seenn.early_exit import (ExitConfig, aet, confidence, correctness_matrix, dataset_outputs,
                              empirical_aet, infer_dataset, infer_seenn1, read_correctness,
                              sweep_alpha, sweep_from_dumps, write_correctness, write_sweep)
from seenn.numerics import ConfigError
from seenn.snn import ArchConfig, build_snn, forward_temporal


def rows(*specs):
    return np.array([[c == "T" for c in s] for s in specs])


def telescoped(a):
    """Per-sample value of the set-cardinality sum after telescoping: T minus correct steps before T."""
    T = a.shape[1]
    return (T - a[:, :-1].sum(axis=1)).mean()


def first_correct(a):
    T = a.shape[1]
    return np.where(a.any(axis=1), a.argmax(axis=1) + 1, T)


# confidence ---------------------------------------------------------------------------------

def test_confidence_examples():
    for M in (2, 5, 10):
        assert confidence(np.zeros(M)) == pytest.approx(1 / M, rel=1e-15)
    assert confidence(np.array([10.0, 0.0])) == pytest.approx(1 / (1 + math.exp(-10)), rel=1e-15)
    assert round(float(confidence(np.array([10.0, 0.0]))), 5) == 0.99995
    with pytest.raises(ConfigError):
        confidence(np.array([1.0]))


@settings(max_examples=80, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(2, 8)),
              elements=st.floats(-30, 30)))
def test_confidence_bounds(z):
    cs = confidence(z)
    M = z.shape[1]
    assert (cs >= 1 / M - 1e-12).all() and (cs <= 1.0).all()


# AET ------------------------------------------------------------------------------------------

def test_aet_examples():
    assert aet(np.ones((5, 4), bool)) == 1.0
    assert aet(np.zeros((5, 4), bool)) == 4.0
    assert aet(rows("TTTT", "FTTT", "FFFF")) == pytest.approx(7 / 3, rel=1e-15)


def test_empirical_aet_examples():
    m = rows("FTFT")
    assert empirical_aet(m) == 2.0 and aet(m) == 3.0
    mono = rows("FFTT", "TTTT", "FFFT", "FFFF")
    assert empirical_aet(mono) == aet(mono)


def test_aet_rejects_empty():
    with pytest.raises(ConfigError):
        aet(np.zeros((0, 3), bool))
    with pytest.raises(ConfigError):
        empirical_aet(np.zeros((0, 3), bool))


@settings(max_examples=300, deadline=None)
@given(arrays(bool, st.tuples(st.integers(1, 32), st.integers(1, 8))))
def test_aet_properties(a):
    T = a.shape[1]
    A, E = aet(a), empirical_aet(a)
    assert A == pytest.approx(telescoped(a), abs=1e-12)
    assert E == first_correct(a).mean()
    assert 1 <= E <= A <= T
    monotone = np.all(np.diff(a.astype(int), axis=1) >= 0, axis=1)
    if monotone.all():
        assert A == E
    if (~monotone & a[:, -1]).any():
        assert A > E
    # rows where the final step is correct: T - (correct steps before T), else T
    final = a[a[:, -1]]
    if len(final):
        per = T - final[:, :-1].sum(axis=1)
        assert aet(final) == pytest.approx(per.mean(), abs=1e-12)


def test_aet_counts_late_failures_by_earlier_hits():
    # correct at t=1, wrong at t=2: the cardinality sum gives 1 + 2 - 2
    m = rows("TF")
    assert aet(m) == 1.0 and empirical_aet(m) == 1.0
    assert aet(rows("TFFF")) == 3.0


# correctness bitset ----------------------------------------------------------------------------

def test_bitset_layout_and_round_trip(tmp_path):
    m = rows("TFFT", "FFFF", "TTTF")
    p = tmp_path / "c.bin"
    write_correctness(p, m)
    raw = p.read_bytes()
    assert struct.unpack("<II", raw[:8]) == (3, 4)
    # bits 0..11 row-major, least-significant bit first: 1001 0000 1110
    assert raw[8:] == bytes([0b00001001, 0b00000111])
    assert np.array_equal(read_correctness(p), m)
    p.write_bytes(raw + b"\0")
    with pytest.raises(ValueError):
        read_correctness(p)


@settings(max_examples=30, deadline=None)
@given(arrays(bool, st.tuples(st.integers(1, 40), st.integers(1, 9))))
def test_bitset_round_trip_property(tmp_path_factory, a):
    p = tmp_path_factory.mktemp("bits") / "m.bin"
    write_correctness(p, a)
    assert np.array_equal(read_correctness(p), a)


# SEENN-I inference --------------------------------------------------------------------------

def tiny(kind="mlp", seed=0):
    nx.seed(seed)
    if kind == "mlp":
        arch = ArchConfig(kind="mlp", in_shape=(1, 4, 4), n_classes=4, hidden=(16, 12))
    else:
        arch = ArchConfig(kind="resnet", in_shape=(1, 8, 8), n_classes=4, stem_channels=4,
                          stages=((4, 1), (6, 1)))
    net = build_snn(arch)
    return net.eval()


def x_for(net, n=16, seed=3):
    return np.random.default_rng(seed).standard_normal((n,) + net.arch.in_shape) * 2.5


def oracle_exit(acc, alpha, candidates):
    """Materialize every accumulated output, then scan candidates in order."""
    out = []
    for row in acc:
        for t in candidates:
            z = row[t - 1]
            p = np.exp(z - z.max())
            p /= p.sum()
            if p.max() >= alpha:
                out.append(t)
                break
        else:
            out.append(candidates[-1])
    return np.array(out)


@pytest.mark.parametrize("kind", ["mlp", "resnet"])
def test_exit_times_match_full_materialization(kind):
    net = tiny(kind)
    x = x_for(net)
    full = forward_temporal(net, x, 6).accumulated
    for alpha in (0.3, 0.5, 0.7, 0.9, 0.99):
        for cands in ((1, 2, 3, 4, 5, 6), (2, 4, 6), (1, 6)):
            res = infer_seenn1(net, x, ExitConfig(alpha, cands))
            assert np.array_equal(res.exit_t, oracle_exit(full, alpha, cands))
            # accumulated logits at the exit step equal the truncated full run, bit for bit
            assert np.array_equal(res.logits, full[np.arange(len(x)), res.exit_t - 1])


def test_single_candidate_reproduces_fixed_T():
    net = tiny("resnet")
    x = x_for(net)
    fixed = forward_temporal(net, x, 4).accumulated[:, -1]
    for alpha in (0.25, 0.6, 1.0, 3.0):
        res = infer_seenn1(net, x, ExitConfig(alpha, (4,)))
        assert (res.exit_t == 4).all()
        assert np.array_equal(res.logits, fixed)
        assert np.array_equal(res.predicted, fixed.argmax(axis=1))


def test_threshold_bounds():
    net = tiny()
    x = x_for(net)
    lo = infer_seenn1(net, x, ExitConfig.every_step(1 / 4, 5))
    assert (lo.exit_t == 1).all()
    hi = infer_seenn1(net, x, ExitConfig.every_step(1.5, 5))
    full = forward_temporal(net, x, 5).accumulated[:, -1]
    assert (hi.exit_t == 5).all()
    assert np.array_equal(hi.logits, full)
    assert np.array_equal(hi.predicted, full.argmax(axis=1))


def test_exit_time_monotone_in_alpha():
    net = tiny()
    x = x_for(net, n=64)
    grid = np.linspace(0.25, 1.0, 20)
    prev = None
    for alpha in grid:
        t = infer_seenn1(net, x, ExitConfig.every_step(alpha, 6)).exit_t
        if prev is not None:
            assert (t >= prev).all()
        prev = t


def test_exit_result_fields():
    net = tiny()
    x = x_for(net)
    labels = np.arange(16) % 4
    res = infer_seenn1(net, x, ExitConfig.every_step(0.6, 4), labels)
    assert ((res.confidence >= 0.25) & (res.confidence <= 1)).all()
    assert np.array_equal(res.correct, res.predicted == labels)
    decisions = list(res.decisions())
    assert [d.sample for d in decisions] == list(range(16))
    assert sum(res.composition((1, 2, 3, 4)).values()) == 16


def test_exit_config_validation():
    for bad in ((), (2, 1), (0, 1), (1, 1)):
        with pytest.raises(ConfigError):
            ExitConfig(0.5, bad)
    with pytest.raises(ConfigError):
        ExitConfig(0.0, (1,))


# sweeps ---------------------------------------------------------------------------------------

@pytest.fixture(scope="module")
def data():
    spec = SyntheticSpec(n_classes=4, n_per_class=20, dims=(1, 4, 4), seed=1)
    return make_synthetic(spec)[0]


def test_sweep_properties(data, tmp_path):
    nx.set_precision(64)
    net = tiny()
    cands = (1, 2, 3, 4)
    alphas = [0.25, 0.4, 0.6, 0.8, 0.9, 0.99, 2.0]
    table = sweep_alpha(net, data, alphas, cands, batch_size=32)
    assert [r.alpha for r in table] == alphas
    for r in table:
        assert sum(r.histogram.values()) == len(data)
    avg = [r.avg_t for r in table]
    assert all(b >= a for a, b in zip(avg, avg[1:]))
    acc, matrix = dataset_outputs(net, data, 4)
    assert table[0].avg_t == 1.0
    assert table[-1].accuracy == matrix[:, -1].mean()
    conf = confidence(acc)
    replay = sweep_from_dumps(matrix, conf, alphas, cands)
    assert [r.as_dict(cands) for r in replay] == [r.as_dict(cands) for r in table]
    write_sweep(tmp_path / "s.csv", tmp_path / "s.json", table, cands)
    header = (tmp_path / "s.csv").read_text().splitlines()[0]
    assert header == "alpha,avg_t,accuracy,n_exit_t1,n_exit_t2,n_exit_t3,n_exit_t4"
    with pytest.raises(ConfigError):
        sweep_alpha(net, data, [0.9, 0.5], cands)


def test_batched_inference_matches_single_batch(data):
    net = tiny()
    cfg = ExitConfig.every_step(0.7, 4)
    a = infer_dataset(net, data, cfg, batch_size=7)
    b = infer_dataset(net, data, cfg, batch_size=len(data))
    assert np.array_equal(a.exit_t, b.exit_t)
    assert np.array_equal(a.logits, b.logits)


def test_correctness_matrix_columns(data):
    net = tiny()
    out = forward_temporal(net, data.images, 5)
    m = correctness_matrix(out, data.labels)
    assert m.shape == (len(data), 5)
    assert np.array_equal(m[:, 2], out.at(3).argmax(axis=1) == data.labels)
