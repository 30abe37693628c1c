"""Three-stage search: super-network warm-up, alternating search, retraining."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, NumericError, Tensor
from .estimators import EstimatorConfig
from .losses import CtcBatch, cross_entropy, ctc_greedy_decode, ctc_loss, frame_accuracy, token_error_rate
from .supernet import (NetSpec, SampledArchitecture, SuperNetwork, arch_probabilities, sample_subgraph,
                       uniform_subgraph)
from .tasks import Dataset

STAGE_KEYS = {"warmup": 1, "search": 2, "retrain": 3}


def stream(seed: int, *keys: int) -> np.random.Generator:
    """Independent generator for ``(seed, *keys)``, e.g. (seed, stage, epoch, step)."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), *(int(k) for k in keys)]))


# ------------------------------------------------------------------ optimizer

@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState,
              lr: float, betas=(0.9, 0.999), eps: float = 1e-8) -> dict[str, np.ndarray]:
    """One bias-corrected Adam update; returns new parameter arrays."""
    b1, b2 = betas
    state.t += 1
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    out = {}
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ContractError(f"gradient shape {g.shape} != parameter shape {p.shape} for {name}")
        m = state.m.get(name)
        v = state.v.get(name)
        m = (1 - b1) * g if m is None else b1 * m + (1 - b1) * g
        v = (1 - b2) * g * g if v is None else b2 * v + (1 - b2) * g * g
        state.m[name], state.v[name] = m, v
        out[name] = (p - lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.dtype, copy=False)
    return out


class Adam:
    """Adam over a named set of tensors (PyTorch default arguments)."""

    def __init__(self, params: dict[str, Tensor], betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.betas, self.eps = betas, eps
        self.state = AdamState()

    def step(self, grads: dict[int, np.ndarray], lr: float) -> None:
        values = {n: p.values for n, p in self.params.items()}
        named = {n: grads.get(id(p), np.zeros_like(p.values)) for n, p in self.params.items()}
        new = adam_step(values, named, self.state, lr, self.betas, self.eps)
        for n, p in self.params.items():
            p.values = new[n]


# ------------------------------------------------------------------- schedules

@dataclass
class StageConfig:
    """Minibatch size and plateau rule of one stage.

    After ``patience`` epochs without a new best validation loss the learning
    rate is multiplied by ``decay``; the stage stops once it would drop below
    ``lr_final``.  With ``lr_final == lr`` that means stopping at the first
    plateau.
    """

    stage: str
    batch_size: int
    lr: float = 1e-3
    lr_final: float = 1e-3
    decay: float = 0.1
    patience: int = 3
    max_epochs: int = 200
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8

    def __post_init__(self):
        if self.stage not in STAGE_KEYS:
            raise ContractError(f"unknown stage {self.stage!r}")
        if self.batch_size < 1 or self.max_epochs < 1:
            raise ContractError("batch_size and max_epochs must be >= 1")
        if not 0 < self.decay < 1:
            raise ContractError("decay must lie in (0, 1)")
        if self.patience < 1:
            raise ContractError("patience must be >= 1")
        if not 0 < self.lr_final <= self.lr:
            raise ContractError("need 0 < lr_final <= lr")
        self.betas = tuple(self.betas)


def warmup_config(**kw) -> StageConfig:
    return StageConfig(**{"stage": "warmup", "batch_size": 128, "lr": 1e-3, "lr_final": 1e-3,
                          "patience": 3, **kw})


def search_config(**kw) -> StageConfig:
    return StageConfig(**{"stage": "search", "batch_size": 64, "lr": 1e-3, "lr_final": 1e-4,
                          "patience": 3, **kw})


def retrain_config(**kw) -> StageConfig:
    return StageConfig(**{"stage": "retrain", "batch_size": 128, "lr": 1e-3, "lr_final": 1e-5,
                          "patience": 1, **kw})


class PlateauSchedule:
    def __init__(self, cfg: StageConfig):
        self.cfg = cfg
        self.lr = cfg.lr
        self.best = math.inf
        self.stale = 0
        self.stopped = False

    def step(self, val_loss: float) -> str:
        """Feed one epoch's validation loss; returns what happened."""
        if self.stopped:
            raise ContractError("schedule already stopped")
        if val_loss < self.best:
            self.best = val_loss
            self.stale = 0
            return "improved"
        self.stale += 1
        if self.stale < self.cfg.patience:
            return "stale"
        self.stale = 0
        new_lr = self.lr * self.cfg.decay
        if new_lr < self.cfg.lr_final * (1 - 1e-9):
            self.stopped = True
            return "stopped"
        self.lr = new_lr
        return "decayed"

    def state_dict(self) -> dict:
        return {"lr": self.lr, "best": self.best, "stale": self.stale, "stopped": self.stopped}

    def load_state_dict(self, d: dict) -> None:
        self.lr, self.best, self.stale, self.stopped = d["lr"], d["best"], d["stale"], d["stopped"]


# ------------------------------------------------------------------ task loss

def task_loss(net: SuperNetwork, logits: Tensor, batch: Dataset) -> Tensor:
    stride = net.spec.total_stride
    if batch.frame_labels is not None:
        targets = batch.frame_labels[:, ::stride][:, :logits.shape[1]]
        return cross_entropy(logits, targets)
    lengths = [-(-int(n) // stride) for n in batch.input_lengths]
    return ctc_loss(CtcBatch(ad.log_softmax(logits, axis=-1), batch.label_seqs, lengths))


def _finite(value: float, what: str) -> float:
    if not math.isfinite(value):
        raise NumericError(f"non-finite {what}: {value}")
    return value


def _step(net: SuperNetwork, batch: Dataset, params: dict[str, Tensor], opt: Adam, lr: float,
          **forward) -> float:
    logits = net.forward(batch.inputs, **forward)
    loss = task_loss(net, logits, batch)
    grads = ad.backward(loss, params.values())
    opt.step(grads, lr)
    return _finite(loss.item(), "training loss")


def evaluate(net: SuperNetwork, data: Dataset, z: SampledArchitecture | None = None,
             batch_size: int = 256, mode: str = "fixed", **forward) -> dict:
    """Loss and accuracy (or token error rate) of a fixed sub-graph, eval mode."""
    z = z if z is not None else SampledArchitecture(tuple(0 for _ in net.blocks))
    losses, weights, correct, frames, hyps, refs = [], [], 0, 0, [], []
    stride = net.spec.total_stride
    with ad.no_grad():
        for batch in data.minibatches(batch_size):
            logits = net.forward(batch.inputs, mode=mode, z=z, **forward)
            losses.append(task_loss(net, logits, batch).item())
            weights.append(len(batch))
            if batch.frame_labels is not None:
                targets = batch.frame_labels[:, ::stride][:, :logits.shape[1]]
                correct += frame_accuracy(logits, targets) * targets.size
                frames += targets.size
            else:
                lengths = [-(-int(n) // stride) for n in batch.input_lengths]
                hyps += ctc_greedy_decode(logits, lengths)
                refs += list(batch.label_seqs)
    out = {"loss": float(np.average(losses, weights=weights))}
    if frames:
        out["accuracy"] = correct / frames
    else:
        out["token_error_rate"] = token_error_rate(hyps, refs)
    return out


def validate_expected(net: SuperNetwork, val: Dataset, rng: np.random.Generator,
                      batch_size: int = 64, estimator: str = "st", tau: float | None = None) -> float:
    """Mean over validation minibatches of the loss of a freshly sampled sub-graph.

    This is a Monte Carlo estimate of the expected loss over sub-graphs.  For
    the ``darts`` estimator the continuous mixture is evaluated instead.
    """
    if len(val) == 0:
        raise ContractError("validation set is empty")
    losses = []
    with ad.no_grad():
        for batch in val.minibatches(batch_size):
            if estimator == "darts":
                logits = net.forward(batch.inputs, mode="darts")
            else:
                logits = net.forward(batch.inputs, mode="fixed", z=sample_subgraph(net, rng))
            losses.append(task_loss(net, logits, batch).item())
    return _finite(float(np.mean(losses)), "validation loss")


# ------------------------------------------------------------------ run state

@dataclass
class SearchRunState:
    stage: str = "warmup"
    epoch: int = 0
    lr: float = 1e-3
    schedule: dict = field(default_factory=dict)
    val_cursor: int = 0
    adam_alpha: AdamState = field(default_factory=AdamState)
    adam_theta: AdamState = field(default_factory=AdamState)
    history: list = field(default_factory=list)
    done: bool = False

    def log(self, record: dict, sink: Callable | None) -> None:
        self.history.append(record)
        if sink is not None:
            sink(record)


def pi_snapshot(net: SuperNetwork) -> list[list[float]]:
    return [[float(p) for p in arch_probabilities(b)] for b in net.blocks]


def _record(stage, epoch, train_loss, val_loss, lr, net, tau=None, event=None) -> dict:
    return {"stage": stage, "epoch": epoch, "train_loss": train_loss, "val_loss": val_loss,
            "lr": lr, "tau": tau, "pi": pi_snapshot(net), "event": event}


def warmup(net: SuperNetwork, train: Dataset, val: Dataset, cfg: StageConfig | None = None,
           seed: int = 0, state: SearchRunState | None = None, sink: Callable | None = None,
           max_epochs: int | None = None) -> SearchRunState:
    """Train theta on uniformly sampled sub-graphs; alpha stays frozen.

    Stops when the expected validation loss has not improved for
    ``cfg.patience`` epochs.  ``max_epochs=0`` skips the stage.
    """
    cfg = cfg or warmup_config()
    if len(train) == 0:
        raise ContractError("training set is empty")
    state = state or SearchRunState(stage="warmup", lr=cfg.lr)
    sched = PlateauSchedule(cfg)
    if state.schedule:
        sched.load_state_dict(state.schedule)
    limit = cfg.max_epochs if max_epochs is None else max_epochs
    theta = net.theta_params()
    opt = Adam(theta, cfg.betas, cfg.eps)
    opt.state = state.adam_theta
    net.set_requires_grad(theta=True, alpha=False)
    key = STAGE_KEYS["warmup"]
    try:
        while not sched.stopped and state.epoch < limit:
            order_rng = stream(seed, key, state.epoch, 0)
            losses = []
            for i, batch in enumerate(train.minibatches(cfg.batch_size, order_rng)):
                rng = stream(seed, key, state.epoch, 1, i)
                z = uniform_subgraph(net, rng)
                losses.append(_step(net, batch, theta, opt, sched.lr, mode="fixed", z=z,
                                    train=True, rng=rng))
            val_loss = validate_expected(net, val, stream(seed, key, state.epoch, 2),
                                         cfg.batch_size)
            event = sched.step(val_loss)
            state.log(_record("warmup", state.epoch, float(np.mean(losses)), val_loss,
                              sched.lr, net, event=event), sink)
            state.epoch += 1
            state.schedule = sched.state_dict()
    finally:
        net.set_requires_grad(theta=True, alpha=True)
    state.lr = sched.lr
    state.done = True
    return state


def _alpha_forward(est: EstimatorConfig, net, rng, tau):
    if est.kind == "st":
        return {"mode": "st", "z": sample_subgraph(net, rng)}
    if est.kind == "darts":
        return {"mode": "darts"}
    return {"mode": "snas", "tau": tau, "gumbel_rng": rng}


def _theta_forward(est: EstimatorConfig, net, rng, tau, gumbel_rng):
    if est.kind == "st":
        return {"mode": "fixed", "z": sample_subgraph(net, rng)}
    if est.kind == "darts":
        return {"mode": "darts"}
    return {"mode": "snas", "tau": tau, "gumbel_rng": gumbel_rng}


def begin_search(cfg: StageConfig) -> SearchRunState:
    """Fresh search state: theta is kept, both optimizers start from zero moments."""
    return SearchRunState(stage="search", lr=cfg.lr)


def search_epoch(net: SuperNetwork, train: Dataset, val: Dataset, state: SearchRunState,
                 cfg: StageConfig | None = None, est: EstimatorConfig | None = None, seed: int = 0,
                 sink: Callable | None = None, lr_theta: float | None = None,
                 on_step: Callable | None = None) -> SearchRunState:
    """One pass over the training minibatches.

    For every training minibatch: Step 1 freezes theta, takes the next
    validation minibatch (cycling through the validation set) and updates
    alpha; Step 2 freezes alpha and updates theta on the training minibatch.
    ``lr_theta`` overrides the theta learning rate (e.g. 0 to freeze it).
    """
    cfg = cfg or search_config()
    est = est or EstimatorConfig()
    if len(val) == 0:
        raise ContractError("validation set is empty")
    sched = PlateauSchedule(cfg)
    if state.schedule:
        sched.load_state_dict(state.schedule)
    key = STAGE_KEYS["search"]
    tau = est.tau_at(state.epoch) if est.kind == "snas" else None
    alpha, theta = net.alpha_params(), net.theta_params()
    opt_a, opt_t = Adam(alpha, cfg.betas, cfg.eps), Adam(theta, cfg.betas, cfg.eps)
    opt_a.state, opt_t.state = state.adam_alpha, state.adam_theta
    val_batches = val.minibatches(cfg.batch_size)
    losses = []
    try:
        for i, batch in enumerate(train.minibatches(cfg.batch_size, stream(seed, key, state.epoch, 0))):
            vb = state.val_cursor % len(val_batches)
            state.val_cursor += 1
            if on_step is not None:
                on_step(i, vb)
            # Step 1: alpha on a validation minibatch, no dropout
            net.set_requires_grad(theta=False, alpha=True)
            rng = stream(seed, key, state.epoch, 1, i)
            _step(net, val_batches[vb], alpha, opt_a, sched.lr, **_alpha_forward(est, net, rng, tau))
            # Step 2: theta on the training minibatch
            net.set_requires_grad(theta=True, alpha=False)
            rng = stream(seed, key, state.epoch, 2, i)
            gumbel = stream(seed, key, state.epoch, 3, i)
            lr = sched.lr if lr_theta is None else lr_theta
            losses.append(_step(net, batch, theta, opt_t, lr, train=True, rng=rng,
                                **_theta_forward(est, net, rng, tau, gumbel)))
    finally:
        net.set_requires_grad(theta=True, alpha=True)
    val_loss = validate_expected(net, val, stream(seed, key, state.epoch, 4), cfg.batch_size,
                                 estimator=est.kind)
    event = sched.step(val_loss)
    state.log(_record("search", state.epoch, float(np.mean(losses)), val_loss, sched.lr, net,
                      tau=tau, event=event), sink)
    state.epoch += 1
    state.schedule = sched.state_dict()
    state.lr = sched.lr
    state.done = sched.stopped or state.epoch >= cfg.max_epochs
    return state


def search(net: SuperNetwork, train: Dataset, val: Dataset, cfg: StageConfig | None = None,
           est: EstimatorConfig | None = None, seed: int = 0, state: SearchRunState | None = None,
           sink: Callable | None = None) -> SearchRunState:
    """Run search epochs until the plateau rule stops the stage."""
    cfg = cfg or search_config()
    state = state or begin_search(cfg)
    while not state.done:
        search_epoch(net, train, val, state, cfg, est, seed, sink)
    return state


@dataclass
class RetrainResult:
    model: SuperNetwork
    history: list
    val_loss: float
    test: dict

    @property
    def val_curve(self) -> list[float]:
        return [r["val_loss"] for r in self.history]


def retrain(model: SuperNetwork, train: Dataset, val: Dataset, test: Dataset | None = None,
            cfg: StageConfig | None = None, seed: int = 0, sink: Callable | None = None) -> RetrainResult:
    """Train a derived single model from scratch with the plateau schedule.

    The model is rebuilt from its spec with ``init_seed=seed``, so only the
    architecture of ``model`` matters, not its current weights.
    """
    cfg = cfg or retrain_config()
    if any(b.K != 1 for b in model.blocks):
        raise ContractError("retrain expects a derived model with one candidate per block")
    model = SuperNetwork(NetSpec.from_dict({**model.spec.to_dict(), "init_seed": int(seed)}))
    z = SampledArchitecture(tuple(0 for _ in model.blocks))
    params = model.theta_params()
    opt = Adam(params, cfg.betas, cfg.eps)
    sched = PlateauSchedule(cfg)
    history = []
    key = STAGE_KEYS["retrain"]
    epoch = 0
    while not sched.stopped and epoch < cfg.max_epochs:
        losses = []
        for i, batch in enumerate(train.minibatches(cfg.batch_size, stream(seed, key, epoch, 0))):
            rng = stream(seed, key, epoch, 1, i)
            losses.append(_step(model, batch, params, opt, sched.lr, mode="fixed", z=z,
                                train=True, rng=rng))
        val_loss = _finite(evaluate(model, val, z)["loss"], "validation loss")
        event = sched.step(val_loss)
        rec = {"stage": "retrain", "epoch": epoch, "train_loss": float(np.mean(losses)),
               "val_loss": val_loss, "lr": sched.lr, "tau": None, "pi": pi_snapshot(model),
               "event": event}
        history.append(rec)
        if sink is not None:
            sink(rec)
        epoch += 1
    test_metrics = evaluate(model, test, z) if test is not None else {}
    return RetrainResult(model, history, history[-1]["val_loss"], test_metrics)
