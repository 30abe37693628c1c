"""Acceptance criteria 1-11, one PASS/FAIL line each.

Run with ``pytest tests/test_acceptance.py -s`` to see the lines, or
``python3 tests/test_acceptance.py`` for the lines alone.
"""
import math
import shutil
import statistics
import tempfile
import time
from pathlib import Path

import numpy as np
import pytest

from stnas import autodiff as ad
from stnas import estimators as est
from stnas.autodiff import Tensor
from stnas.checks import (ctc_enumeration_check, run_suite, sampling_checks, st_jacobian_check)
from stnas.config import planted_context_config
from stnas.metrics import account_memory, large_vocab_c2_bytes
from stnas.pipeline import run_pipeline, warmup_ablation
from stnas.search import PlateauSchedule, retrain_config, search_config, task_loss, warmup_config
from stnas.supernet import (NetSpec, SampledArchitecture, SuperNetwork, arch_probabilities,
                            count_subgraphs, enumerate_subgraphs, preset, sample_subgraph,
                            subgraph_probability)
from stnas.tasks import SyntheticTaskSpec, generate_task


def c1_gradcheck():
    t = time.perf_counter()
    with ad.precision(64):
        results = [r for r in run_suite("all", seed=0) if r.name.startswith("gradcheck:")]
    secs = time.perf_counter() - t
    worst = max(r.observed for r in results)
    bad = [r.name for r in results if not r.passed]
    return not bad and secs < 120, f"{len(results)} checks, worst rel err {worst:.1e}, {secs:.1f}s {bad or ''}"


def c2_ctc_oracle():
    r = ctc_enumeration_check(np.random.default_rng(0), instances=200)
    return r.passed, f"200 instances, max abs dev {r.observed:.1e}"


def _chain_oracle():
    rng = np.random.default_rng(0)
    cands = ["TDNN-0-1", "TDNN-1-1", "TDNN-1-2"]
    with ad.precision(64):
        net = SuperNetwork(NetSpec(3, 2, 3, 0.0, [{"type": "block", "candidates": cands}] * 2, init_seed=4))
        for b in net.blocks:
            b.alpha.values = rng.standard_normal(3)
        x1 = rng.standard_normal((2, 6, 3))
        v = rng.standard_normal((2, 6, 2))
        z = (2, 1)
        b1, b2 = net.blocks
        with ad.no_grad():
            o1 = [op(Tensor(x1)).values for op in b1.ops]
            o2 = [op(Tensor(o1[z[0]])).values for op in b2.ops]
        g3 = v @ net.dense.weight.values.T
        x2 = Tensor(o1[z[0]].copy(), requires_grad=True)
        ad.backward(ad.sum(ad.mul(b2.ops[z[1]](x2), g3)), [x2])
        jac = lambda p: np.diag(p) - np.outer(p, p)  # noqa: E731
        want = [jac(arch_probabilities(b1)) @ np.array([np.sum(x2.grad * o) for o in o1]),
                jac(arch_probabilities(b2)) @ np.array([np.sum(g3 * o) for o in o2])]
        ad.backward(ad.sum(ad.mul(net.forward(x1, mode="st", z=SampledArchitecture(z)), v)),
                    net.alpha_params().values())
        return max(float(np.max(np.abs(b.alpha.grad - w))) for b, w in zip(net.blocks, want))


def c3_st_oracle():
    single = st_jacobian_check()
    chain = _chain_oracle()
    return single.passed and chain <= 1e-10, \
        f"single-block dev {single.observed:.1e}, two-block chain dev {chain:.1e}"


def c4_expectation():
    spec = NetSpec(4, 2, 8, 0.0, [{"type": "block", "candidates": list(preset("toy").layers[0]["candidates"])}] * 3,
                   init_seed=2)
    net = SuperNetwork(spec)
    rng = np.random.default_rng(9)
    for b in net.blocks:
        b.alpha.values = rng.standard_normal(b.K).astype(np.float32)
    train, _, _ = generate_task(SyntheticTaskSpec(num_items=40, num_test=1))
    batch = train.subset(np.arange(16))
    with ad.no_grad():
        table = {z.indices: task_loss(net, net.forward(batch.inputs, z=z), batch).item()
                 for z in enumerate_subgraphs(net)}
    exact = sum(subgraph_probability(net, SampledArchitecture(k)) * v for k, v in table.items())
    draws = np.array([table[sample_subgraph(net, rng).indices] for _ in range(10_000)])
    sigma = draws.std(ddof=1) / math.sqrt(len(draws))
    dev = abs(draws.mean() - exact)
    return len(table) <= 64 and dev <= 3 * sigma, \
        f"{len(table)} sub-graphs, |MC - exact| = {dev:.2e} vs 3 sigma = {3 * sigma:.2e}"


def c5_gumbel():
    res = {r.name: r for r in sampling_checks(np.random.default_rng(0))}
    gm = res["sampling:gumbel-max vs softmax 1e5 draws"]
    tau = res["sampling:gumbel-softmax tau=1e-3 max component"]
    return gm.passed and tau.passed, f"max arm deviation {gm.observed:.4f}, tau=1e-3 max weight {tau.observed:.6f}"


def c6_counts():
    def sizes(name):
        return [len(layer["candidates"]) for layer in preset(name).layers if layer["type"] == "block"]
    w, s = count_subgraphs(sizes("wsj")), count_subgraphs(sizes("swbd"))
    return (w, s) == (4096, 46656), f"wsj {w}, swbd {s}"


def c7_memory():
    c2 = large_vocab_c2_bytes()
    m = account_memory(SuperNetwork(preset("toy")), batch=8, T=60)
    p = m.peaks
    ratio = p["darts"] / p["single"]
    ok = (abs(c2 / 1e6 - 209) < 0.5 and m.K == 4 and p["st"] < p["darts"] and p["st"] < p["snas"]
          and 3 <= ratio <= 4 and p["st"] <= 1.1 * m.st_bound
          and m.backward_per_block["st_theta"] == [1])
    return ok, (f"C2 {c2 / 1e6:.1f} MB; DARTS/single {ratio:.3f}; ST {p['st']} vs bound {m.st_bound:.0f}; "
                f"ST theta backward/block {m.backward_per_block['st_theta']}")


def c8_end_to_end():
    t = time.perf_counter()
    hits, accs = 0, []
    tmp = Path(tempfile.mkdtemp())
    try:
        for seed in range(5):
            s = run_pipeline(planted_context_config(seed), tmp / str(seed))
            half_widths = [int(a.split("-")[1]) * int(a.split("-")[2]) for a in s["architecture"]]
            hits += half_widths == [2]
            accs.append(s["test"]["accuracy"])
    finally:
        shutil.rmtree(tmp, ignore_errors=True)
    secs = time.perf_counter() - t
    return hits >= 4 and min(accs) >= 0.99 and secs < 600, \
        f"h*d=2 chosen in {hits}/5, min test acc {min(accs):.4f}, {secs:.1f}s"


def c9_ablation():
    rep = warmup_ablation(planted_context_config(0), seeds=range(5))
    ok = rep["median_B"] <= rep["median_A"]
    return ok, (f"median final val loss A={rep['median_A']:.5f} B={rep['median_B']:.5f}; "
                f"same architecture in {rep['same_architecture']}/5 seeds")


def c10_determinism():
    tmp = Path(tempfile.mkdtemp())
    try:
        cfg = planted_context_config(1)
        run_pipeline(cfg, tmp / "a")
        run_pipeline(cfg, tmp / "b")
        same = all((tmp / "a" / f).read_bytes() == (tmp / "b" / f).read_bytes()
                   for f in ("architecture.txt", "summary.json", "metrics.jsonl"))
    finally:
        shutil.rmtree(tmp, ignore_errors=True)
    return same, "architecture report, summary and metrics log byte-identical"


def _events(cfg, vals):
    s = PlateauSchedule(cfg)
    out = []
    for v in vals:
        out.append((s.step(v), round(s.lr, 12)))
        if s.stopped:
            break
    return out


def c11_stage_rules():
    flat = [1.0] + [1.0] * 20
    w = _events(warmup_config(), flat)
    s = _events(search_config(), flat)
    r = _events(retrain_config(), flat)
    ok = (w == [("improved", 1e-3), ("stale", 1e-3), ("stale", 1e-3), ("stopped", 1e-3)]
          and s == [("improved", 1e-3), ("stale", 1e-3), ("stale", 1e-3), ("decayed", 1e-4),
                    ("stale", 1e-4), ("stale", 1e-4), ("stopped", 1e-4)]
          and r == [("improved", 1e-3), ("decayed", 1e-4), ("decayed", 1e-5), ("stopped", 1e-5)])
    return ok, f"warmup {len(w) - 1} epochs, search {len(s) - 1}, retrain {len(r) - 1} after the first"


CRITERIA = [
    (1, "gradcheck suite", c1_gradcheck),
    (2, "CTC enumeration oracle", c2_ctc_oracle),
    (3, "straight-through gradient oracle", c3_st_oracle),
    (4, "expected-loss consistency", c4_expectation),
    (5, "Gumbel statistics", c5_gumbel),
    (6, "search-space counts", c6_counts),
    (7, "memory accounting", c7_memory),
    (8, "planted-context end-to-end search", c8_end_to_end),
    (9, "warm-up ablation ordering", c9_ablation),
    (10, "pipeline determinism", c10_determinism),
    (11, "stage rules", c11_stage_rules),
]


def _line(num, name, ok, detail):
    return f"criterion {num:>2} [{'PASS' if ok else 'FAIL'}] {name}: {detail}"


@pytest.mark.parametrize("num,name,fn", CRITERIA, ids=[f"c{n}" for n, _, _ in CRITERIA])
def test_criterion(num, name, fn):
    ok, detail = fn()
    print("\n" + _line(num, name, ok, detail))
    assert ok, detail


if __name__ == "__main__":
    failures = 0
    for num, name, fn in CRITERIA:
        ok, detail = fn()
        failures += not ok
        print(_line(num, name, ok, detail), flush=True)
    raise SystemExit(1 if failures else 0)
