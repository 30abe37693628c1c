"""End-to-end runner: warm-up -> search -> derive -> retrain, with artifacts.

Everything a run produces lives under one output directory::

    config.json            the validated config, echoed back
    metrics.jsonl          one record per epoch of every stage (METRICS_SCHEMA)
    checkpoints/*.stnas    warmup / search (rewritten every epoch), derived, retrain
    architecture.txt       chosen candidate per searching block
    memory.json            measured peaks of single / DARTS / SNAS / ST passes
    summary.json           final metrics

Stages read the previous stage's checkpoint, so a run can be resumed from
any of them.  Randomness comes from streams keyed by (seed, stage, epoch,
step), so a resumed run continues exactly as an uninterrupted one would.
"""
from __future__ import annotations

import json
import math
import statistics
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import io
from .config import ConfigError, ExperimentConfig
from .metrics import account_memory
from .search import (STAGE_KEYS, AdamState, SearchRunState, begin_search, evaluate, retrain,
                     search_epoch, stream, warmup)
from .supernet import (NetSpec, SampledArchitecture, SuperNetwork, arch_probabilities,
                       architecture_report, derive_top1, load_parameters, load_supernet,
                       save_supernet, top1_indices)
from .tasks import Dataset, generate_task, pool_of, split_dataset

STAGES = ("warmup", "search", "derive", "retrain")

_NUM = {"type": "number"}
_NUM_OR_NULL = {"type": ["number", "null"]}
METRICS_SCHEMA = {
    "$schema": "http://json-schema.org/draft-07/schema#",
    "title": "stnas metrics record",
    "type": "object",
    "additionalProperties": False,
    "required": ["stage", "epoch", "train_loss", "val_loss", "lr", "tau", "pi", "event"],
    "properties": {
        "stage": {"enum": ["warmup", "search", "retrain"]},
        "epoch": {"type": "integer", "minimum": 0},
        "train_loss": _NUM,
        "val_loss": _NUM,
        "lr": {"type": "number", "exclusiveMinimum": 0},
        "tau": _NUM_OR_NULL,
        "pi": {"type": "array", "items": {"type": "array", "items": _NUM}},
        "event": {"enum": ["improved", "stale", "decayed", "stopped", None]},
    },
}


def validate_record(rec: dict) -> None:
    """Light structural check of a metrics record (the schema above, by hand)."""
    props = METRICS_SCHEMA["properties"]
    if set(rec) != set(props):
        raise ValueError(f"record keys {sorted(rec)} do not match the schema")
    if rec["stage"] not in props["stage"]["enum"] or rec["event"] not in props["event"]["enum"]:
        raise ValueError("bad stage or event")
    if not isinstance(rec["epoch"], int) or rec["epoch"] < 0:
        raise ValueError("epoch must be a non-negative integer")
    for key in ("train_loss", "val_loss", "lr"):
        if not isinstance(rec[key], (int, float)) or not math.isfinite(rec[key]):
            raise ValueError(f"{key} must be a finite number")


# ------------------------------------------------------------------ workspace

class Workspace:
    def __init__(self, out):
        self.root = Path(out)
        self.ckpt_dir = self.root / "checkpoints"

    def ensure(self) -> "Workspace":
        self.ckpt_dir.mkdir(parents=True, exist_ok=True)
        return self

    def ckpt(self, stage: str) -> Path:
        return self.ckpt_dir / f"{stage}.stnas"

    @property
    def metrics(self) -> Path:
        return self.root / "metrics.jsonl"

    def path(self, name: str) -> Path:
        return self.root / name

    def write_text(self, name: str, text: str) -> None:
        self.path(name).write_text(text)

    def write_json(self, name: str, obj) -> None:
        self.path(name).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")

    def read_records(self) -> list[dict]:
        if not self.metrics.exists():
            return []
        return [json.loads(line) for line in self.metrics.read_text().splitlines() if line]

    def reset_metrics(self, keep_stages, history=()) -> None:
        """Keep earlier stages' records, then replay a resumed stage's history."""
        kept = [r for r in self.read_records() if r["stage"] in keep_stages]
        with self.metrics.open("w") as fh:
            for rec in [*kept, *history]:
                fh.write(_dump_record(rec))

    def sink(self):
        def write(rec: dict) -> None:
            validate_record(rec)
            with self.metrics.open("a") as fh:
                fh.write(_dump_record(rec))
        return write


def _dump_record(rec: dict) -> str:
    return json.dumps(rec, sort_keys=True, allow_nan=False) + "\n"


# ------------------------------------------------------------------- data

@dataclass
class Data:
    train: Dataset
    val: Dataset
    test: Dataset
    retrain_train: Dataset
    retrain_val: Dataset


def prepare_data(cfg: ExperimentConfig) -> Data:
    """Search split (from the task spec) and a separate retraining split of the same pool."""
    train, val, test = generate_task(cfg.task_spec())
    pool = pool_of(train, val)
    r_train, r_val = split_dataset(pool, 1.0 - cfg.retrain_val_fraction,
                                   stream(cfg.seed, STAGE_KEYS["retrain"], 7919))
    return Data(train, val, test, r_train, r_val)


# ---------------------------------------------------------- stage checkpoints

def _adam_arrays(prefix: str, st: AdamState) -> dict[str, np.ndarray]:
    out = {}
    for name in sorted(st.m):
        out[f"{prefix}.m.{name}"] = st.m[name]
        out[f"{prefix}.v.{name}"] = st.v[name]
    return out


def _adam_from(prefix: str, t: int, arrays: dict) -> AdamState:
    st = AdamState(t=t)
    for key, a in arrays.items():
        if key.startswith(prefix + "."):
            kind, name = key[len(prefix) + 1:].split(".", 1)
            (st.m if kind == "m" else st.v)[name] = a
    return st


def _clean_schedule(d: dict) -> dict:
    return {**d, "best": None if not math.isfinite(d.get("best", math.inf)) else d["best"]}


def save_stage(path, net: SuperNetwork, state: SearchRunState, seed: int) -> None:
    meta = {"type": "stage", "spec": net.spec.to_dict(), "seed": int(seed),
            "state": {"stage": state.stage, "epoch": state.epoch, "lr": state.lr,
                      "schedule": _clean_schedule(state.schedule), "val_cursor": state.val_cursor,
                      "adam_alpha_t": state.adam_alpha.t, "adam_theta_t": state.adam_theta.t,
                      "history": state.history, "done": state.done}}
    arrays = {f"param.{n}": p.values for n, p in net.parameters().items()}
    arrays.update(_adam_arrays("adam_alpha", state.adam_alpha))
    arrays.update(_adam_arrays("adam_theta", state.adam_theta))
    tmp = Path(str(path) + ".tmp")
    io.save(tmp, meta, arrays)
    tmp.replace(path)


def load_stage(path) -> tuple[SuperNetwork, SearchRunState, int]:
    meta, arrays = io.load(path)
    if meta.get("type") != "stage":
        raise io.FormatError(f"{path} is not a stage checkpoint")
    net = SuperNetwork(NetSpec.from_dict(meta["spec"]))
    load_parameters(net, {k[6:]: a for k, a in arrays.items() if k.startswith("param.")})
    s = meta["state"]
    sched = dict(s["schedule"])
    if sched:
        sched["best"] = math.inf if sched["best"] is None else sched["best"]
    state = SearchRunState(stage=s["stage"], epoch=s["epoch"], lr=s["lr"], schedule=sched,
                           val_cursor=s["val_cursor"],
                           adam_alpha=_adam_from("adam_alpha", s["adam_alpha_t"], arrays),
                           adam_theta=_adam_from("adam_theta", s["adam_theta_t"], arrays),
                           history=s["history"], done=s["done"])
    return net, state, meta["seed"]


# ---------------------------------------------------------------- stages

def _require(ws: Workspace, stage: str) -> Path:
    p = ws.ckpt(stage)
    if not p.exists():
        raise ConfigError(f"missing checkpoint {p}; run the '{stage}' stage first")
    return p


def stage_warmup(cfg: ExperimentConfig, ws: Workspace, data: Data | None = None,
                 stop_after: int | None = None) -> SuperNetwork:
    """Warm up (or resume warming up) the super-network.  ``stop_after`` caps the epoch count
    reached in this call, which is how tests interrupt a run."""
    data = data or prepare_data(cfg)
    scfg = cfg.stage("warmup")
    if ws.ckpt("warmup").exists():
        net, state, _ = load_stage(ws.ckpt("warmup"))
        if state.done:
            return net
    else:
        net, state = SuperNetwork(cfg.net_spec()), SearchRunState(stage="warmup", lr=scfg.lr)
    ws.reset_metrics((), state.history)
    sink = ws.sink()
    limit = scfg.max_epochs
    while not state.done:
        until = min(limit, state.epoch + 1)
        warmup(net, data.train, data.val, scfg, cfg.seed, state, sink, max_epochs=until)
        state.done = state.epoch >= limit or bool(state.schedule.get("stopped"))
        save_stage(ws.ckpt("warmup"), net, state, cfg.seed)
        if stop_after is not None and state.epoch >= stop_after and not state.done:
            break
    return net


def stage_search(cfg: ExperimentConfig, ws: Workspace, data: Data | None = None,
                 stop_after: int | None = None) -> SuperNetwork:
    data = data or prepare_data(cfg)
    scfg, est = cfg.stage("search"), cfg.estimator_config()
    if ws.ckpt("search").exists():
        net, state, _ = load_stage(ws.ckpt("search"))
        if state.done:
            return net
    else:
        net, _, _ = load_stage(_require(ws, "warmup"))
        state = begin_search(scfg)
    ws.reset_metrics(("warmup",), state.history)
    sink = ws.sink()
    while not state.done:
        search_epoch(net, data.train, data.val, state, scfg, est, cfg.seed, sink)
        save_stage(ws.ckpt("search"), net, state, cfg.seed)
        if stop_after is not None and state.epoch >= stop_after and not state.done:
            break
    return net


def stage_derive(cfg: ExperimentConfig, ws: Workspace) -> SuperNetwork:
    net, state, _ = load_stage(_require(ws, "search"))
    if not state.done:
        raise ConfigError("search checkpoint is not finished; rerun the 'search' stage")
    ws.write_text("architecture.txt", architecture_report(net))
    mem = account_memory(net, batch=cfg.memory.get("batch", 8), T=cfg.memory.get("frames", 60),
                         seed=cfg.seed)
    ws.write_json("memory.json", mem.to_dict())
    derived = derive_top1(net, init_seed=cfg.seed)
    save_supernet(ws.ckpt("derived"), derived, {"chosen": list(top1_indices(net))})
    return derived


def stage_retrain(cfg: ExperimentConfig, ws: Workspace, data: Data | None = None) -> dict:
    data = data or prepare_data(cfg)
    derived, _ = load_supernet(_require(ws, "derived"))
    ws.reset_metrics(("warmup", "search"))
    res = retrain(derived, data.retrain_train, data.retrain_val, data.test, cfg.stage("retrain"),
                  cfg.seed, ws.sink())
    save_supernet(ws.ckpt("retrain"), res.model, {"test": res.test})
    summary = {
        "seed": cfg.seed,
        "architecture": [b.labels[0] for b in res.model.blocks],
        "retrain_epochs": len(res.history),
        "retrain_val_loss": res.val_loss,
        "test": res.test,
        "num_parameters": res.model.num_parameters(),
    }
    ws.write_json("summary.json", summary)
    return summary


def run_stage(name: str, cfg: ExperimentConfig, out) -> object:
    ws = Workspace(out).ensure()
    ws.write_text("config.json", cfg.dumps())
    with ad.precision(cfg.precision):
        if name == "warmup":
            return stage_warmup(cfg, ws)
        if name == "search":
            return stage_search(cfg, ws)
        if name == "derive":
            return stage_derive(cfg, ws)
        if name == "retrain":
            return stage_retrain(cfg, ws)
    raise ConfigError(f"unknown stage {name!r}")


def run_pipeline(cfg: ExperimentConfig, out) -> dict:
    """All four stages; completed stages found in ``out`` are not redone."""
    ws = Workspace(out).ensure()
    ws.write_text("config.json", cfg.dumps())
    with ad.precision(cfg.precision):
        data = prepare_data(cfg)
        stage_warmup(cfg, ws, data)
        stage_search(cfg, ws, data)
        stage_derive(cfg, ws)
        return stage_retrain(cfg, ws, data)


# ------------------------------------------------------------- ablation

def _search_and_retrain(cfg: ExperimentConfig, data: Data, net: SuperNetwork, warm: bool) -> dict:
    wstate = None
    if warm:
        wstate = warmup(net, data.train, data.val, cfg.stage("warmup"), cfg.seed)
    scfg, est = cfg.stage("search"), cfg.estimator_config()
    state = begin_search(scfg)
    while not state.done:
        search_epoch(net, data.train, data.val, state, scfg, est, cfg.seed)
    pi_chosen = [float(arch_probabilities(b)[k]) for b, k in zip(net.blocks, top1_indices(net))]
    derived = derive_top1(net, init_seed=cfg.seed)
    res = retrain(derived, data.retrain_train, data.retrain_val, data.test, cfg.stage("retrain"),
                  cfg.seed)
    return {"warmup_epochs": 0 if wstate is None else wstate.epoch,
            "architecture": [b.labels[0] for b in derived.blocks], "pi_chosen": pi_chosen,
            "curve": res.val_curve, "final_val_loss": res.val_loss, "test": res.test}


def warmup_ablation(cfg: ExperimentConfig, seeds=(0, 1, 2, 3, 4)) -> dict:
    """Search + retrain from (A) no warm-up and (B) a converged warm-up, per seed.

    Both arms share the seed, so they start from the same super-network
    initialisation and retrain any derived model from the same weights.
    """
    runs = []
    with ad.precision(cfg.precision):
        for s in seeds:
            c = cfg.replace(seed=int(s))
            data = prepare_data(c)
            row = {"seed": int(s)}
            for arm, warm in (("A", False), ("B", True)):
                row[arm] = _search_and_retrain(c, data, SuperNetwork(c.net_spec()), warm)
            runs.append(row)
    return {
        "runs": runs,
        "median_A": statistics.median(r["A"]["final_val_loss"] for r in runs),
        "median_B": statistics.median(r["B"]["final_val_loss"] for r in runs),
        "same_architecture": sum(r["A"]["architecture"] == r["B"]["architecture"] for r in runs),
    }


def ablation_text(report: dict) -> str:
    lines = []
    for r in report["runs"]:
        for arm, tag in (("A", "zero warm-up"), ("B", "converged warm-up")):
            a = r[arm]
            curve = " ".join(f"{v:.4f}" for v in a["curve"])
            lines.append(f"seed {r['seed']} {arm} ({tag}, {a['warmup_epochs']} warm-up epochs, "
                         f"{'/'.join(a['architecture'])}, "
                         f"pi={min(a['pi_chosen'], default=1.0):.3f}): {curve}")
    lines.append(f"seeds where A and B derived the same architecture: "
                 f"{report['same_architecture']}/{len(report['runs'])}")
    lines.append(f"median final retrain val loss: A={report['median_A']:.5f} "
                 f"B={report['median_B']:.5f}")
    return "\n".join(lines) + "\n"


def evaluate_checkpoint(path, data: Dataset) -> dict:
    net, _ = load_supernet(path)
    return evaluate(net, data, SampledArchitecture((0,) * len(net.blocks)))
