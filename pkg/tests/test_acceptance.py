"""Acceptance criteria 1-10, one test each.

Every test prints a single ``PASS``/``FAIL criterion N: ...`` line (visible
even under pytest's output capture) and then asserts. Run alone with::

    pytest tests/test_acceptance.py -v
"""
import json
import math
import time

import numpy as np
import pytest

from hgmn import tensor as T
from hgmn.alignment import AlignmentParams, aggregate_instances, aggregate_metapaths
from hgmn.cli import run_cli
from hgmn.config import PRESETS, load_config
from hgmn.hetgraph import count_instances, enumerate_instances, load_graph
from hgmn.model import HgmnModel, forward, prepare
from hgmn.ordering import inner_order, instance_counts, outer_order
from hgmn.ssm import (LtiParams, SelectiveSsmBlock, lti_conv_apply, lti_conv_kernel, lti_scan,
                      phi1, selective_scan, zoh_discretize)
from hgmn.synthetic import SyntheticSpec, generate
from hgmn.tensor import Tensor
from hgmn.training import gradient_check, train
from oracles import (brute_force_degree, brute_force_walks, distinct_key_document,
                     permute_document, random_typed_document, scan_oracle, softmax_oracle)


def verdict(capsys, n, ok, detail):
    with capsys.disabled():
        print(f"\n{'PASS' if ok else 'FAIL'} criterion {n}: {detail}")
    assert ok, detail


def test_criterion_01_scan_duality(capsys):
    rng = np.random.default_rng(2024)
    start = time.perf_counter()
    worst = worst_oracle = 0.0
    for _ in range(100):
        n = int(rng.integers(1, 9))
        p = LtiParams(A=-rng.uniform(0.05, 3.0, n), B=rng.normal(size=n), C=rng.normal(size=n),
                      delta=float(rng.uniform(1e-3, 1.0)))
        L = int(rng.integers(1, 257))
        x = rng.normal(size=L)
        d = zoh_discretize(p)
        rec = lti_scan(d, p.C, x)
        conv = lti_conv_apply(lti_conv_kernel(d, p.C, L), x)
        worst = max(worst, float(np.max(np.abs(rec - conv))))
        worst_oracle = max(worst_oracle, float(np.max(np.abs(
            rec - scan_oracle(d.A_bar.tolist(), d.B_bar.tolist(), p.C.tolist(), x.tolist())))))
    elapsed = time.perf_counter() - start
    ok = worst <= 1e-9 and worst_oracle <= 1e-9 and elapsed < 5.0
    verdict(capsys, 1, ok, f"scan duality max |rec-conv| {worst:.2e}, vs oracle "
                           f"{worst_oracle:.2e} (tol 1e-9), {elapsed:.2f}s (limit 5s)")


def test_criterion_02_zoh(capsys):
    d = zoh_discretize(LtiParams(A=[-1.0], B=[0.7], C=[1.0], delta=math.log(2.0)))
    scalar = max(abs(d.A_bar[0] - 0.5), abs(d.B_bar[0] - 0.5 * 0.7))

    rng = np.random.default_rng(5)
    A = -rng.uniform(0.1, 3.0, 6)
    B = rng.normal(size=6)
    tiny = zoh_discretize(LtiParams(A=A, B=B, C=np.ones(6), delta=1e-9))
    a_dev = float(np.max(np.abs(tiny.A_bar - 1.0)))
    b_dev = float(np.max(np.abs(tiny.B_bar - 1e-9 * B)))

    # limit branch against the Taylor series 1 + z/2 + z^2/6 + z^3/24
    z = np.array([0.0, 1e-13, -1e-13, 5e-13, -9e-13])
    series = 1 + z / 2 + z ** 2 / 6 + z ** 3 / 24
    branch = float(np.max(np.abs(phi1(z) - series)))
    ok = scalar <= 1e-12 and a_dev <= 1e-6 and b_dev <= 1e-12 and branch <= 1e-10
    verdict(capsys, 2, ok, f"ZOH scalar err {scalar:.1e} (1e-12); step 1e-9: |A_bar-I| {a_dev:.1e} "
                           f"(1e-6), |B_bar-dB| {b_dev:.1e} (1e-12); limit branch {branch:.1e} (1e-10)")


def test_criterion_03_frozen_reduction(capsys):
    worst = 0.0
    for seed in range(3):
        rng = np.random.default_rng(seed)
        block = SelectiveSsmBlock(4, state_dim=5, rng=rng)
        x = Tensor(rng.normal(size=(64, 4)))
        fd = rng.uniform(1e-3, 1.0, block.d_inner)
        fB, fC = rng.normal(size=5), rng.normal(size=5)
        got = selective_scan(block, x, frozen=(fd, fB, fC)).data
        v, gate = block.scan_input(x)
        A = block.A().data
        y = np.empty((64, block.d_inner))
        for ch in range(block.d_inner):
            d = zoh_discretize(LtiParams(A[ch], fB, fC, fd[ch]))
            y[:, ch] = lti_scan(d, fC, v.data[:, ch]) + block.D.data[ch] * v.data[:, ch]
        want = x.data + T.linear(Tensor(y) * T.silu(gate), block.out_proj).data
        worst = max(worst, float(np.max(np.abs(got - want))))
    verdict(capsys, 3, worst <= 1e-10,
            f"selective scan with frozen step/B/C vs per-channel LTI scan, length 64: "
            f"max err {worst:.2e} (tol 1e-10)")


def test_criterion_04_gradient_suite(capsys, g12, fixtures_dir):
    cfg = load_config(fixtures_dir / "gradcheck.cfg")
    model = HgmnModel(g12, cfg)
    start = time.perf_counter()
    report = gradient_check(model, g12, epsilon=1e-5, max_coords=25)
    elapsed = time.perf_counter() - start
    worst_name = max(report, key=lambda k: report[k]["max_rel_err"])
    worst = report[worst_name]["max_rel_err"]
    covered = set(report) == set(model.named_parameters())
    ok = covered and worst <= 1e-4 and elapsed < 60.0
    verdict(capsys, 4, ok, f"{len(report)} parameter groups, worst rel err {worst:.2e} "
                           f"({worst_name}, tol 1e-4), {elapsed:.1f}s (limit 60s)")


def test_criterion_05_enumeration_oracle(capsys):
    walks = mismatches = 0
    for seed in range(100):
        doc = random_typed_document(seed, max_nodes=30)
        g = load_graph(doc)
        for mp in doc["metapaths"]:
            assert len(mp["node_types"]) <= 4
            schema = g.schema(mp["name"])
            for node in range(g.node_count):
                want = brute_force_walks(doc, mp, node)
                walks += len(want)
                if g.type_name(node) == schema.start_type:
                    got = [m.nodes for m in enumerate_instances(g, schema, node)]
                    mismatches += got != want
                mismatches += count_instances(g, [schema], node) != len(want)
    verdict(capsys, 5, mismatches == 0,
            f"100 random typed graphs, {walks} walks: {mismatches} mismatches against brute force")


def test_criterion_06_ordering(capsys, g0):
    unsorted = 0
    for seed in range(100):
        doc = random_typed_document(seed)
        g = load_graph(doc)
        schemas = list(g.metapaths.values())
        counts = instance_counts(g, schemas)
        inner = inner_order(g, schemas, counts=counts)
        for seq in inner.groups.values():
            unsorted += bool((np.diff(counts[seq]) < 0).any())
        outer = outer_order(g)
        deg = np.array([brute_force_degree(doc, int(v)) for v in outer.order])
        unsorted += bool((np.diff(deg) < 0).any())
    broken = 0
    for seed in range(10):
        doc = distinct_key_document(seed)
        perm = np.random.default_rng(seed).permutation(len(doc["nodes"]))
        g, h = load_graph(doc), load_graph(permute_document(doc, perm))
        broken += outer_order(h).order.tolist() != [int(perm[v]) for v in outer_order(g).order]
        broken += inner_order(h, [h.schema("X0X")]).groups["x"].tolist() != \
            [int(perm[v]) for v in inner_order(g, [g.schema("X0X")]).groups["x"]]
    g0_inner = inner_order(g0, [g0.schema("APA")]).groups
    g0_ok = (g0_inner["author"].tolist() == [0, 1] and g0_inner["paper"].tolist() == [2, 3, 4]
             and outer_order(g0).order.tolist() == [2, 4, 0, 1, 3])
    ok = unsorted == 0 and broken == 0 and g0_ok
    verdict(capsys, 6, ok, f"unsorted sequences {unsorted}/100 graphs, equivariance failures "
                           f"{broken}/10, G0 orders {'match' if g0_ok else 'differ'}")


def test_criterion_07_attention(capsys, g0):
    rng = np.random.default_rng(7)
    params = AlignmentParams.init(g0, list(g0.metapaths.values()), 4, 2, 3, "mean", rng)
    worst_sum = 0.0
    outside = 0
    for _ in range(100):
        heads = int(rng.choice([1, 2, 4]))
        d = 4
        m = int(rng.integers(1, 10))
        H = rng.normal(size=(m, d)) * 2
        out, alpha = aggregate_instances(Tensor(rng.normal(size=2 * d)), heads,
                                         Tensor(rng.normal(size=d)), Tensor(H))
        worst_sum = max(worst_sum, float(np.max(np.abs(alpha.data.sum(axis=1) - 1))))
        # the output is leaky_relu of a convex combination; leaky_relu is monotone
        lo = np.where(H.min(0) > 0, H.min(0), 0.01 * H.min(0))
        hi = np.where(H.max(0) > 0, H.max(0), 0.01 * H.max(0))
        outside += bool(((out.data < lo - 1e-12) | (out.data > hi + 1e-12)).any())
        outside += bool((alpha.data < 0).any())

        k = int(rng.integers(1, 6))
        V = rng.normal(size=(k, 4)) * 3
        z, beta = aggregate_metapaths(params, [Tensor(v) for v in V])
        want = softmax_oracle(np.tanh(V @ params.sem_W.data.T + params.sem_b.data) @ params.sem_q.data)
        worst_sum = max(worst_sum, abs(float(beta.data.sum()) - 1))
        outside += bool(np.max(np.abs(beta.data - want)) > 1e-12)
        outside += bool(((z.data < V.min(0) - 1e-12) | (z.data > V.max(0) + 1e-12)).any())
    ok = worst_sum <= 1e-12 and outside == 0
    verdict(capsys, 7, ok, f"100 trials: max |sum-1| {worst_sum:.1e} (tol 1e-12), "
                           f"{outside} non-convex or mis-weighted outputs")


def _learn(signal):
    doc = generate(SyntheticSpec(signal_strength=signal, seed=7))
    g = load_graph(doc)
    cfg = PRESETS["hgb"]
    start = time.perf_counter()
    state = train(HgmnModel(g, cfg), g, cfg)
    return state.best_metric, g.node_count, time.perf_counter() - start


def test_criterion_08_learnability(capsys):
    planted, n, t_planted = _learn(0.9)
    control, _, t_control = _learn(0.0)
    ok = planted >= 0.95 and control <= 0.45 and t_planted < 120 and t_control < 120
    verdict(capsys, 8, ok, f"{n}-node synthetic graph, HGB preset, 150 epochs: best val macro-F1 "
                           f"{planted:.3f} at signal 0.9 (need >= 0.95, {t_planted:.0f}s), "
                           f"{control:.3f} at signal 0.0 (need <= 0.45, {t_control:.0f}s)")


def _cli_train(fixtures_dir, out, *flags):
    return run_cli(["train", str(fixtures_dir / "fixture12.json"), "--config",
                    str(fixtures_dir / "tiny.cfg"), "--out", str(out), "--quiet", *flags])


def test_criterion_09_determinism(capsys, fixtures_dir, tmp_path):
    codes = [_cli_train(fixtures_dir, tmp_path / r) for r in ("a", "b")]
    capsys.readouterr()
    same = {name: (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
            for name in ("metrics.csv", "last.ckpt", "best.ckpt")}
    ok = codes == [0, 0] and all(same.values())
    verdict(capsys, 9, ok, f"two seeded CLI training runs: exit codes {codes}, byte-identical "
                           + ", ".join(f"{k}={v}" for k, v in same.items()))


def test_criterion_10_ablation(capsys, fixtures_dir, g12, tmp_path):
    flags = {"full": (), "no-inner": ("--no-inner-order",), "no-outer": ("--no-outer-order",),
             "neither": ("--no-inner-order", "--no-outer-order")}
    codes, repro = {}, {}
    for name, f in flags.items():
        codes[name] = [_cli_train(fixtures_dir, tmp_path / f"{name}{r}", *f) for r in (1, 2)]
        repro[name] = all((tmp_path / f"{name}1" / k).read_bytes() == (tmp_path / f"{name}2" / k).read_bytes()
                          for k in ("metrics.csv", "last.ckpt"))
    capsys.readouterr()

    cfg = load_config(fixtures_dir / "tiny.cfg")
    logits = {}
    for inner, outer in (("count", "degree"), ("random", "degree"), ("count", "random"),
                         ("random", "random")):
        c = cfg.replace(inner_order_mode=inner, outer_order_mode=outer)
        model = HgmnModel(g12, c)
        model.zero_ssm_blocks()
        logits[(inner, outer)] = forward(model, g12, prepare(g12, c)).data.tobytes()
    identical = len(set(logits.values())) == 1
    # the orders really differ, so identity is not vacuous
    orders_differ = (prepare(g12, cfg).outer.order.tolist()
                     != prepare(g12, cfg.replace(outer_order_mode="random")).outer.order.tolist())
    ok = (all(c == [0, 0] for c in codes.values()) and all(repro.values()) and identical
          and orders_differ)
    verdict(capsys, 10, ok, f"ablation runs exit {sorted({x for c in codes.values() for x in c})}, "
                            f"reproducible {all(repro.values())}; zeroed blocks give identical logits "
                            f"across 4 order modes: {identical}")


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-v"]))
