"""Memory and compute accounting of the three estimators against a single model.

Memory is the peak number of bytes the autodiff tape holds for backward
during one forward+backward pass (dropout off), not process RSS.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .search import task_loss
from .supernet import SampledArchitecture, SuperNetwork, prune_to, sample_subgraph, top1_indices
from .tasks import Dataset


def large_vocab_c2_bytes(blocks: int = 6, batch: int = 64, seq_len: int = 850, hidden: int = 640,
                   bytes_per_element: int = 4, devices: int = 4) -> float:
    """Stored candidate outputs of one sub-graph per device.

    The defaults are the large-vocabulary setting: 6 blocks, minibatch 64,
    ~850 frames, 640 hidden units, 4-byte floats, 4 devices -> ~209 MB.
    """
    return blocks * batch * seq_len * hidden * bytes_per_element / devices


@dataclass
class MemoryModel:
    K: int
    c1: int
    c2: float
    peaks: dict = field(default_factory=dict)
    forward_per_block: dict = field(default_factory=dict)
    backward_per_block: dict = field(default_factory=dict)

    @property
    def st_bound(self) -> float:
        """Table-style bound C1 + (K - 1) * C2."""
        return self.c1 + (self.K - 1) * self.c2

    def to_dict(self) -> dict:
        d = asdict(self)
        d["st_bound"] = self.st_bound
        return d


def analytic_c2(net: SuperNetwork, batch: int, T: int, devices: int = 1) -> float:
    """Sum over blocks of batch * frames * width * bytes, per device."""
    itemsize = np.dtype(ad.get_dtype()).itemsize
    total, frames = 0, T
    for layer in net.spec.layers:
        if layer["type"] == "block":
            total += batch * frames * net.spec.hidden * itemsize
        else:
            frames = -(-frames // layer.get("stride", 1))
    return total / devices


def _random_batch(net: SuperNetwork, batch: int, T: int, rng) -> Dataset:
    x = rng.standard_normal((batch, T, net.spec.input_dim))
    y = rng.integers(0, net.spec.output_dim, size=(batch, T))
    return Dataset(inputs=x, input_lengths=np.full(batch, T), frame_labels=y)


def measure(net: SuperNetwork, data: Dataset, **forward) -> tuple[ad.Tape, float]:
    """Peak stored bytes and counters for one forward+backward of ``net``."""
    params = list(net.parameters().values())
    with ad.track() as tape:
        loss = task_loss(net, net.forward(data.inputs, **forward), data)
        ad.backward(loss, params)
    return tape, loss.item()


def _per_block(counts: dict, n_blocks: int) -> list[int]:
    per = [0] * n_blocks
    for tag in counts:
        if isinstance(tag, tuple) and tag[0] == "cand":
            per[tag[1]] += 1
    return per


def account_memory(net: SuperNetwork, batch: int = 8, T: int = 60, seed: int = 0,
                   z: SampledArchitecture | None = None, tau: float = 1.0) -> MemoryModel:
    """Measure peak stored activations of single-model, DARTS, SNAS and ST passes.

    The single model is the sub-graph ``z`` (top-1 by default) run on its
    own.  The ST measurement is an alpha-update pass (all K candidate outputs
    computed, only the sampled one differentiable), ``st_theta`` is the
    theta-update pass over the sampled sub-graph.
    """
    rng = np.random.default_rng(seed)
    data = _random_batch(net, batch, T, rng)
    z = z if z is not None else SampledArchitecture(top1_indices(net))
    n = len(net.blocks)
    K = max(net.block_sizes) if n else 1
    model = MemoryModel(K=K, c1=0, c2=analytic_c2(net, batch, T))

    tape, _ = measure(prune_to(net, z), data, mode="fixed", z=SampledArchitecture((0,) * n))
    model.c1 = tape.peak_bytes
    model.peaks["single"] = tape.peak_bytes

    for name, kw in (("darts", {"mode": "darts"}),
                     ("snas", {"mode": "snas", "tau": tau, "gumbel_rng": np.random.default_rng(seed)}),
                     ("st", {"mode": "st", "z": z}),
                     ("st_theta", {"mode": "fixed", "z": z})):
        tape, _ = measure(net, data, **kw)
        model.peaks[name] = tape.peak_bytes
        model.forward_per_block[name] = _per_block(tape.forward_counts, n)
        model.backward_per_block[name] = _per_block(tape.backward_counts, n)
    return model


def sample_z(net: SuperNetwork, seed: int = 0) -> SampledArchitecture:
    return sample_subgraph(net, np.random.default_rng(seed))
