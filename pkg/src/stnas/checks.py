"""Oracle suite: finite differences, CTC enumeration, Jacobians, sampling statistics.

Every check returns a :class:`CheckResult`; :func:`run_suite` collects them.
All gradient checks run in 64-bit precision with central differences.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from . import estimators as est
from . import losses
from . import nn
from .supernet import NetSpec, SuperNetwork, arch_probabilities, sample_subgraph

EPS = 1e-5
RTOL = 1e-4


@dataclass
class CheckResult:
    name: str
    passed: bool
    observed: float
    tolerance: float
    detail: str = ""

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"[{status}] {self.name}: observed={self.observed:.3e} tolerance={self.tolerance:.1e} {self.detail}"


def numeric_grad(f: Callable[[], float], x: np.ndarray, eps: float = EPS) -> np.ndarray:
    """Central differences of ``f`` w.r.t. ``x`` (perturbed in place)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + eps
        fp = f()
        x[i] = old - eps
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * eps)
    return g


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = max(float(np.max(np.abs(numeric))), float(np.max(np.abs(analytic))), 1e-8)
    return float(np.max(np.abs(analytic - numeric))) / scale


def gradcheck(fn: Callable, arrays: list[np.ndarray], eps: float = EPS) -> float:
    """Largest relative error over ``arrays`` between backward and finite differences.

    ``fn(*tensors)`` must return a Tensor; it is reduced with a fixed random
    projection so non-scalar outputs are covered too.
    """
    with ad.precision(64):
        arrays = [np.array(a, dtype=np.float64) for a in arrays]
        probe_rng = np.random.default_rng(1234)
        proj = {}

        def scalar(*tensors):
            out = fn(*tensors)
            if out.shape not in proj:
                proj[out.shape] = probe_rng.standard_normal(out.shape)
            return ad.sum(ad.mul(out, proj[out.shape]))

        tensors = [ad.Tensor(a, requires_grad=True) for a in arrays]
        ad.backward(scalar(*tensors), tensors)
        worst = 0.0
        for t, a in zip(tensors, arrays):
            def f():
                with ad.no_grad():
                    return scalar(*[ad.Tensor(x) for x in arrays]).item()
            worst = max(worst, relative_error(t.grad, numeric_grad(f, a, eps)))
        return worst


def _grad_result(name: str, err: float, tol: float = RTOL) -> CheckResult:
    return CheckResult(name, bool(err <= tol), err, tol)


# ------------------------------------------------------------------ primitives

def primitive_checks(rng: np.random.Generator) -> list[CheckResult]:
    r = lambda *s: rng.standard_normal(s)  # noqa: E731
    pos = lambda *s: rng.uniform(0.5, 2.0, s)  # noqa: E731
    # relu inputs kept away from the kink
    away = np.where(rng.random((3, 4)) < 0.5, -1, 1) * rng.uniform(0.1, 1.0, (3, 4))
    cases = [
        ("add", lambda a, b: ad.add(a, b), [r(3, 4), r(4)]),
        ("sub", lambda a, b: ad.sub(a, b), [r(3, 4), r(3, 4)]),
        ("mul", lambda a, b: ad.mul(a, b), [r(2, 3, 4), r(4)]),
        ("neg", lambda a: ad.neg(a), [r(5)]),
        ("matmul", lambda a, b: ad.matmul(a, b), [r(2, 3, 4), r(4, 5)]),
        ("exp", lambda a: ad.exp(a), [r(3, 4)]),
        ("log", lambda a: ad.log(a), [pos(3, 4)]),
        ("relu", lambda a: ad.relu(a), [away]),
        ("sum", lambda a: ad.sum(a, axis=1), [r(3, 4, 2)]),
        ("mean", lambda a: ad.mean(a, axis=-1), [r(3, 4)]),
        ("reshape", lambda a: ad.reshape(a, (4, 3)), [r(3, 4)]),
        ("getitem", lambda a: ad.getitem(a, (np.array([0, 2, 2]), np.array([1, 0, 1]))), [r(3, 4)]),
        ("softmax", lambda a: ad.softmax(a, axis=-1), [r(3, 5)]),
        ("log_softmax", lambda a: ad.log_softmax(a, axis=-1), [r(3, 5)]),
        ("conv1d", lambda x, w, b: ad.conv1d(x, w, b, stride=2, dilation=2), [r(2, 9, 3), r(5, 3, 4), r(4)]),
        ("conv1d_stride3", lambda x, w, b: ad.conv1d(x, w, b, stride=3), [r(2, 10, 2), r(3, 2, 3), r(3)]),
        ("layer_norm", lambda x, g, b: ad.layer_norm(x, g, b), [r(2, 3, 6), r(6), r(6)]),
        ("dropout", lambda x: ad.dropout(x, 0.5, True, np.random.default_rng(5)), [r(4, 6)]),
        ("weighted_sum", lambda w, a, b, c: ad.weighted_sum(w, [a, b, c]), [r(3), r(2, 4), r(2, 4), r(2, 4)]),
    ]
    results = [_grad_result(f"gradcheck:{name}", gradcheck(fn, arrays)) for name, fn, arrays in cases]
    return results + [straight_through_check(rng)]


def straight_through_check(rng: np.random.Generator) -> CheckResult:
    """Backward of straight_through(hard, soft) vs differences of soft + (hard - soft0)."""
    hard = np.array([0.0, 1.0, 0.0])
    v = rng.standard_normal(3)
    s0 = rng.standard_normal(3)
    with ad.precision(64):
        soft = ad.Tensor(s0.copy(), requires_grad=True)
        ad.backward(ad.sum(ad.mul(ad.exp(ad.straight_through(hard, soft)), v)), [soft])
    probe = s0.copy()
    numeric = numeric_grad(lambda: float(np.sum(np.exp(hard + probe - s0) * v)), probe)
    return _grad_result("gradcheck:straight_through", relative_error(soft.grad, numeric))


def composite_check(rng: np.random.Generator) -> CheckResult:
    """Random three-layer composition, checked at the tighter 1e-6 tolerance."""
    w1, w2, w3 = rng.standard_normal((4, 5)), rng.standard_normal((5, 5)), rng.standard_normal((5, 3))
    x = rng.standard_normal((6, 4))

    def fn(x, a, b, c):
        h = ad.exp(ad.mul(ad.matmul(x, a), 0.3))
        h = ad.log_softmax(ad.matmul(h, b), axis=-1)
        return ad.matmul(ad.mul(h, h), c)

    return _grad_result("gradcheck:composite-3-layer", gradcheck(fn, [x, w1, w2, w3]), 1e-6)


# ---------------------------------------------------------------------- layers

def layer_checks(rng: np.random.Generator) -> list[CheckResult]:
    out = []
    with ad.precision(64):
        tdnn = nn.TdnnLayer(3, 4, half_context=2, dilation=2, rng=rng)
        dense = nn.DenseLayer(3, 5, rng=rng)
        unit = nn.TdnnUnit(3, 4, half_context=1, dilation=2, dropout_p=0.5, rng=rng)
    x = rng.standard_normal((2, 8, 3))

    # layers read their own Tensors, so rebuild them around the probed arrays
    def tdnn_fn(x, w, b):
        return ad.conv1d(x, w, b, stride=1, dilation=2)

    out.append(_grad_result("gradcheck:tdnn", gradcheck(tdnn_fn, [x, tdnn.weight.values, tdnn.bias.values])))

    def dense_fn(x, w, b):
        return ad.add(ad.matmul(x, w), b)

    out.append(_grad_result("gradcheck:dense", gradcheck(dense_fn, [x, dense.weight.values, dense.bias.values])))

    def unit_fn(x, w, b, g, bb):
        h = ad.relu(ad.conv1d(x, w, b, dilation=2))
        return nn.dropout(nn.layer_norm(h, g, bb), 0.5, "eval")

    arrays = [x, unit.tdnn.weight.values, unit.tdnn.bias.values,
              rng.uniform(0.5, 1.5, 4), rng.standard_normal(4)]
    out.append(_grad_result("gradcheck:tdnn-unit(eval)", gradcheck(unit_fn, arrays)))
    return out


# ---------------------------------------------------------------------- losses

def ctc_bruteforce(lp: np.ndarray, labels) -> float:
    """-log of the summed probability of all frame paths collapsing to ``labels``."""
    T, V = lp.shape
    target = tuple(labels)
    total = -math.inf
    for path in itertools.product(range(V), repeat=T):
        seq, prev = [], 0
        for c in path:
            if c != prev and c != 0:
                seq.append(c)
            prev = c
        if tuple(seq) == target:
            total = np.logaddexp(total, sum(lp[t, c] for t, c in enumerate(path)))
    return -total


def random_log_probs(rng: np.random.Generator, T: int, V: int) -> np.ndarray:
    z = rng.standard_normal((T, V))
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def ctc_enumeration_check(rng: np.random.Generator, instances: int = 200) -> CheckResult:
    worst, done = 0.0, 0
    while done < instances:
        T = int(rng.integers(1, 7))
        V = int(rng.integers(2, 5))
        L = int(rng.integers(1, 4))
        labels = rng.integers(1, V, size=L)
        if L + int(np.sum(labels[1:] == labels[:-1])) > T:
            continue
        lp = random_log_probs(rng, T, V)
        with ad.precision(64):
            got = losses.ctc_loss(losses.CtcBatch(lp[None], [labels.tolist()])).item()
        worst = max(worst, abs(got - ctc_bruteforce(lp, labels)))
        done += 1
    return CheckResult("ctc:enumeration(T<=6,|l|<=3,V<=4)", worst <= 1e-10, worst, 1e-10,
                       f"{instances} instances")


def ctc_t4_check(rng: np.random.Generator) -> CheckResult:
    lp = random_log_probs(rng, 4, 3)
    with ad.precision(64):
        got = losses.ctc_loss(losses.CtcBatch(lp[None], [[1, 2]])).item()
    dev = abs(got - ctc_bruteforce(lp, [1, 2]))
    return CheckResult("ctc:T=4 label=ab V=3", dev <= 1e-10, dev, 1e-10)


def loss_checks(rng: np.random.Generator) -> list[CheckResult]:
    targets = rng.integers(0, 4, size=(2, 3))

    def ce(logits):
        return losses.cross_entropy(logits, targets)

    def ctc(z):
        logp = ad.log_softmax(z, axis=-1)
        return losses.ctc_loss(losses.CtcBatch(logp, [[1, 2], [2, 2, 1]], [5, 6]))

    def ctc_raw(lp):
        return losses.ctc_loss(losses.CtcBatch(lp, [[1, 2, 1]]))

    return [
        _grad_result("gradcheck:cross_entropy", gradcheck(ce, [rng.standard_normal((2, 3, 4))])),
        _grad_result("gradcheck:ctc(log_softmax)", gradcheck(ctc, [rng.standard_normal((2, 6, 3))])),
        _grad_result("gradcheck:ctc(raw log-probs)", gradcheck(ctc_raw, [random_log_probs(rng, 6, 3)[None]])),
    ]


# ------------------------------------------------------------------ estimators

def _tiny_block(rng, K=3, dim=3, labels=("TDNN-0-1", "TDNN-1-1", "TDNN-1-2")):
    with ad.precision(64):
        net = SuperNetwork(NetSpec(dim, 2, dim, 0.0, [{"type": "block", "candidates": list(labels[:K])}],
                                   init_seed=int(rng.integers(1 << 30))))
    return net


def estimator_checks(rng: np.random.Generator) -> list[CheckResult]:
    """Finite-difference checks of the alpha path of each estimator.

    DARTS and SNAS (with frozen Gumbel noise) are smooth in alpha.  The
    straight-through forward does not depend on alpha, so its alpha gradient
    is checked against the smooth function ``alpha -> L(sum_k (z_k +
    pi_k(alpha) - pi_k(alpha0)) o_k)``, whose derivative at ``alpha0`` is by
    definition the straight-through gradient.
    """
    net = _tiny_block(rng)
    block = net.blocks[0]
    x = rng.standard_normal((2, 5, 3))
    v = rng.standard_normal((2, 5, 3))
    u = rng.random(block.K)
    out = []

    with ad.precision(64):
        block.alpha.values = rng.standard_normal(block.K)

        def loss_of(h):
            return ad.sum(ad.mul(ad.mul(h, h), v))

        def darts(alpha):
            block.alpha, saved = alpha, block.alpha
            try:
                return loss_of(est.darts_block(block, x))
            finally:
                block.alpha = saved

        def snas(alpha):
            block.alpha, saved = alpha, block.alpha
            try:
                return loss_of(est.snas_block(block, x, tau=0.7, u=u))
            finally:
                block.alpha = saved

        a0 = block.alpha.values.copy()
        out.append(_grad_result("gradcheck:darts alpha", gradcheck(darts, [a0])))
        out.append(_grad_result("gradcheck:snas alpha (frozen gumbel)", gradcheck(snas, [a0])))

        z = 1
        with ad.no_grad():
            outs = [op(ad.Tensor(x)).values for op in block.ops]
        pi0 = arch_probabilities(block)

        def surrogate(alpha_values):
            e = np.exp(alpha_values - alpha_values.max())
            w = est.one_hot(z, block.K) + e / e.sum() - pi0
            h = sum(w[k] * outs[k] for k in range(block.K))
            return float(np.sum(h * h * v))

        alpha_t = ad.Tensor(a0.copy(), requires_grad=True)
        block.alpha, saved = alpha_t, block.alpha
        try:
            ad.backward(loss_of(est.st_block(block, x, z)), [alpha_t])
        finally:
            block.alpha = saved
        probe = a0.copy()
        numeric = numeric_grad(lambda: surrogate(probe), probe)
        out.append(_grad_result("gradcheck:st alpha (straight-through surrogate)",
                                relative_error(alpha_t.grad, numeric)))
    return out


def st_jacobian_check() -> CheckResult:
    """Single block with linear loss: dL/dalpha = (diag(pi) - pi pi^T) v."""
    with ad.precision(64):
        alpha = ad.Tensor(np.zeros(2), requires_grad=True)
        v = np.array([1.0, 0.0])
        worst = 0.0
        for z in (0, 1):
            gate = ad.straight_through(est.one_hot(z, 2), ad.softmax(alpha))
            ad.backward(ad.sum(ad.mul(gate, v)), [alpha])
            worst = max(worst, float(np.max(np.abs(alpha.grad - np.array([0.25, -0.25])))))
    return CheckResult("st:softmax-jacobian single block", worst <= 1e-12, worst, 1e-12)


# ------------------------------------------------------------------- sampling

def sampling_checks(rng: np.random.Generator) -> list[CheckResult]:
    out = []
    with ad.precision(64):
        net = SuperNetwork(NetSpec(2, 2, 2, 0.0, [{"type": "block", "candidates":
                                                  ["TDNN-0-1", "TDNN-1-1", "TDNN-1-2", "TDNN-2-1"]}]))
    counts = np.zeros(4)
    for _ in range(40000):
        counts[sample_subgraph(net, rng).indices[0]] += 1
    dev = float(np.max(np.abs(counts / 40000 - 0.25)))
    out.append(CheckResult("sampling:uniform categorical 40000 draws", dev <= 0.02, dev, 0.02))

    alpha = np.log(np.array([0.1, 0.2, 0.3, 0.4]))
    n = 100000
    _, g = est.gumbel_noise(rng, (n, 4))
    freq = np.bincount(np.argmax(alpha + g, axis=1), minlength=4) / n
    dev = float(np.max(np.abs(freq - np.array([0.1, 0.2, 0.3, 0.4]))))
    out.append(CheckResult("sampling:gumbel-max vs softmax 1e5 draws", dev <= 0.02, dev, 0.02))

    draw = est.gumbel_softmax_weights(np.array([0.3, -0.2, 0.1]), 1e-3, rng)
    top = float(draw.y.values.max())
    out.append(CheckResult("sampling:gumbel-softmax tau=1e-3 max component", top >= 0.999, top, 0.999))
    return out


SCOPES = ("all", "autodiff", "nn", "losses", "estimators", "sampling")


def run_suite(scope: str = "all", seed: int = 0) -> list[CheckResult]:
    """Run the oracle checks; ``scope`` is one of all, autodiff, nn, losses, estimators, sampling."""
    rng = np.random.default_rng(seed)
    groups = {
        "autodiff": lambda: primitive_checks(rng) + [composite_check(rng)],
        "nn": lambda: layer_checks(rng),
        "losses": lambda: loss_checks(rng) + [ctc_t4_check(rng), ctc_enumeration_check(rng)],
        "estimators": lambda: estimator_checks(rng) + [st_jacobian_check()],
        "sampling": lambda: sampling_checks(rng),
    }
    if scope != "all" and scope not in groups:
        raise ValueError(f"unknown scope {scope!r}")
    results = []
    for name, run in groups.items():
        if scope in ("all", name):
            results.extend(run())
    return results
