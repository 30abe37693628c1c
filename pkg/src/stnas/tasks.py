"""Synthetic datasets standing in for speech corpora.

Three kinds:

``frame-classification``
    Each frame carries a noisy class template; labels need no context.
``planted-context``
    Channel 0 of each frame carries a random bit b[t] in {-1, +1} plus noise.
    The frame label is 1 when the bits in the window ``[t - w, t + w]`` sum to
    a positive number (bits beyond the sequence count as 0).  Only a model
    that sees every offset in ``-w..w`` can be exact, and
    :func:`context_ceiling` gives the best accuracy reachable from any
    smaller set of visible offsets.
``ctc-sequence``
    Token sequences rendered as runs of noisy template frames separated by
    blank-like frames; targets are the token sequences.
"""
from __future__ import annotations

import itertools
from dataclasses import asdict, dataclass, field

import numpy as np

from . import io
from .autodiff import ContractError

KINDS = ("frame-classification", "planted-context", "ctc-sequence")


@dataclass(frozen=True)
class SyntheticTaskSpec:
    kind: str = "planted-context"
    vocab: int = 2
    t_min: int = 24
    t_max: int = 24
    input_dim: int = 4
    num_items: int = 600
    num_test: int = 200
    required_half_width: int = 2
    noise: float = 0.1
    max_label_len: int = 4
    seed: int = 0
    split: float = 0.9

    def validate(self) -> None:
        if self.kind not in KINDS:
            raise ContractError(f"unknown task kind {self.kind!r}")
        if not 1 <= self.t_min <= self.t_max:
            raise ContractError("need 1 <= t_min <= t_max")
        if self.vocab < 2 or self.input_dim < 1 or self.num_items < 2 or self.num_test < 1:
            raise ContractError("vocab >= 2, input_dim >= 1, num_items >= 2, num_test >= 1 required")
        if not 0.0 < self.split < 1.0:
            raise ContractError("split must lie in (0, 1)")
        if self.noise < 0:
            raise ContractError("noise must be non-negative")
        if self.kind == "planted-context":
            if self.vocab != 2:
                raise ContractError("planted-context labels are binary (vocab=2)")
            if not 0 <= self.required_half_width < self.t_min / 2:
                raise ContractError("required_half_width must be below T/2")
        if self.kind == "frame-classification" and self.input_dim < self.vocab:
            raise ContractError("frame-classification needs input_dim >= vocab")
        if self.kind == "ctc-sequence":
            if self.max_label_len < 1 or 4 * self.max_label_len + 1 > self.t_min:
                raise ContractError("t_min too short for max_label_len tokens")


@dataclass
class Dataset:
    """Padded inputs ``[N, T, D]`` with frame labels or token sequences."""

    inputs: np.ndarray
    input_lengths: np.ndarray
    frame_labels: np.ndarray | None = None
    label_seqs: list = field(default_factory=list)

    def __len__(self) -> int:
        return self.inputs.shape[0]

    @property
    def is_sequence(self) -> bool:
        return self.frame_labels is None

    def subset(self, index) -> "Dataset":
        index = np.asarray(index)
        return Dataset(
            inputs=self.inputs[index],
            input_lengths=self.input_lengths[index],
            frame_labels=None if self.frame_labels is None else self.frame_labels[index],
            label_seqs=[self.label_seqs[i] for i in index] if self.label_seqs else [],
        )

    def minibatches(self, size: int, rng: np.random.Generator | None = None):
        """Yield subsets of at most ``size`` items; shuffled when ``rng`` is given."""
        order = np.arange(len(self)) if rng is None else rng.permutation(len(self))
        return [self.subset(order[i:i + size]) for i in range(0, len(self), size)]


def split_dataset(ds: Dataset, first_fraction: float, rng: np.random.Generator | None = None):
    """Split into two parts of ``round(first_fraction * N)`` and the rest."""
    n = len(ds)
    k = int(round(first_fraction * n))
    if not 0 < k < n:
        raise ContractError(f"split {first_fraction} of {n} items leaves an empty part")
    order = np.arange(n) if rng is None else rng.permutation(n)
    return ds.subset(np.sort(order[:k])), ds.subset(np.sort(order[k:]))


def _window_labels(bits: np.ndarray, w: int) -> np.ndarray:
    N, T = bits.shape
    padded = np.pad(bits, ((0, 0), (w, w)))
    total = np.zeros((N, T), dtype=np.int64)
    for o in range(2 * w + 1):
        total += padded[:, o:o + T]
    return (total > 0).astype(np.int64)


def _planted(spec: SyntheticTaskSpec, n: int, rng: np.random.Generator) -> Dataset:
    T = spec.t_max
    bits = rng.choice(np.array([-1, 1]), size=(n, T))
    x = spec.noise * rng.standard_normal((n, T, spec.input_dim))
    x[:, :, 0] += bits
    return Dataset(inputs=x, input_lengths=np.full(n, T),
                   frame_labels=_window_labels(bits, spec.required_half_width))


def _frame_classes(spec: SyntheticTaskSpec, n: int, rng: np.random.Generator, templates) -> Dataset:
    T = spec.t_max
    y = rng.integers(0, spec.vocab, size=(n, T))
    x = templates[y] + spec.noise * rng.standard_normal((n, T, spec.input_dim))
    return Dataset(inputs=x, input_lengths=np.full(n, T), frame_labels=y)


def _ctc_sequences(spec: SyntheticTaskSpec, n: int, rng: np.random.Generator, templates) -> Dataset:
    T = spec.t_max
    x = np.zeros((n, T, spec.input_dim))
    lengths = np.zeros(n, dtype=np.int64)
    seqs = []
    for i in range(n):
        tl = int(rng.integers(spec.t_min, spec.t_max + 1))
        L = int(rng.integers(1, spec.max_label_len + 1))
        seq = rng.integers(1, spec.vocab, size=L)
        # each token: 1-3 frames of its template, then one blank frame
        frames = [0]
        for tok in seq:
            frames += [int(tok)] * int(rng.integers(1, 4)) + [0]
        frames = frames[:tl] + [0] * max(0, tl - len(frames))
        x[i, :tl] = templates[np.array(frames)] + spec.noise * rng.standard_normal((tl, spec.input_dim))
        lengths[i] = tl
        seqs.append([int(t) for t in seq])
    return Dataset(inputs=x, input_lengths=lengths, label_seqs=seqs)


def _make(spec: SyntheticTaskSpec, n: int, rng: np.random.Generator, templates) -> Dataset:
    if spec.kind == "planted-context":
        return _planted(spec, n, rng)
    if spec.kind == "frame-classification":
        return _frame_classes(spec, n, rng, templates)
    return _ctc_sequences(spec, n, rng, templates)


def generate_task(spec: SyntheticTaskSpec) -> tuple[Dataset, Dataset, Dataset]:
    """Return (train, validation, test); a pure function of ``spec``.

    ``num_items`` are split ``split : 1 - split`` into train and validation;
    ``num_test`` extra items form the test set.
    """
    spec.validate()
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 7919]))
    templates = np.zeros((spec.vocab, spec.input_dim))
    if spec.kind == "frame-classification":
        templates[np.arange(spec.vocab), np.arange(spec.vocab)] = 1.0
    elif spec.kind == "ctc-sequence":
        templates = rng.standard_normal((spec.vocab, spec.input_dim))
        templates[0] *= 0.1
    pool = _make(spec, spec.num_items, rng, templates)
    test = _make(spec, spec.num_test, rng, templates)
    train, val = split_dataset(pool, spec.split, rng)
    return train, val, test


def pool_of(train: Dataset, val: Dataset) -> Dataset:
    """Re-join a train/validation pair (e.g. to re-split for retraining)."""
    return Dataset(
        inputs=np.concatenate([train.inputs, val.inputs]),
        input_lengths=np.concatenate([train.input_lengths, val.input_lengths]),
        frame_labels=None if train.frame_labels is None
        else np.concatenate([train.frame_labels, val.frame_labels]),
        label_seqs=list(train.label_seqs) + list(val.label_seqs),
    )


def context_ceiling(visible_offsets, half_width: int, T: int) -> float:
    """Best frame accuracy on planted-context data from the visible offsets.

    Enumerates every bit pattern in the label window at every frame position
    and lets a Bayes-optimal predictor see only ``visible_offsets``.
    """
    visible = set(int(o) for o in visible_offsets)
    accs = []
    for t in range(T):
        offsets = [o for o in range(-half_width, half_width + 1) if 0 <= t + o < T]
        seen = [i for i, o in enumerate(offsets) if o in visible]
        counts: dict[tuple, list[int]] = {}
        for pattern in itertools.product((-1, 1), repeat=len(offsets)):
            key = tuple(pattern[i] for i in seen)
            label = int(sum(pattern) > 0)
            counts.setdefault(key, [0, 0])[label] += 1
        accs.append(sum(max(c) for c in counts.values()) / 2 ** len(offsets))
    return float(np.mean(accs))


def save_dataset(path, ds: Dataset, spec: SyntheticTaskSpec | None = None) -> None:
    arrays = {"inputs": ds.inputs, "input_lengths": ds.input_lengths.astype(np.int64)}
    if ds.frame_labels is not None:
        arrays["frame_labels"] = ds.frame_labels.astype(np.int64)
    else:
        arrays["label_offsets"] = np.cumsum([0] + [len(s) for s in ds.label_seqs]).astype(np.int64)
        flat = [t for s in ds.label_seqs for t in s]
        arrays["label_tokens"] = np.asarray(flat, dtype=np.int64)
    meta = {"type": "dataset", "spec": asdict(spec) if spec is not None else None}
    io.save(path, meta, arrays)


def load_dataset(path) -> Dataset:
    meta, arrays = io.load(path)
    if meta.get("type") != "dataset":
        raise io.FormatError("container does not hold a dataset")
    seqs = []
    if "label_offsets" in arrays:
        off, tok = arrays["label_offsets"], arrays["label_tokens"]
        seqs = [tok[off[i]:off[i + 1]].tolist() for i in range(len(off) - 1)]
    return Dataset(inputs=arrays["inputs"], input_lengths=arrays["input_lengths"],
                   frame_labels=arrays.get("frame_labels"), label_seqs=seqs)
