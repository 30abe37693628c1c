import numpy as np
import pytest

from stnas import autodiff as ad
from stnas.autodiff import ContractError, Tensor
from stnas.search import Adam, stream, task_loss
from stnas.supernet import NetSpec, SampledArchitecture, SuperNetwork
from stnas.tasks import (Dataset, SyntheticTaskSpec, context_ceiling, generate_task, load_dataset,
                         save_dataset, split_dataset)


def test_same_spec_same_data():
    spec = SyntheticTaskSpec(seed=3)
    for a, b in zip(generate_task(spec), generate_task(spec)):
        np.testing.assert_array_equal(a.inputs, b.inputs)
        np.testing.assert_array_equal(a.frame_labels, b.frame_labels)


def test_ninety_ten_split():
    ds = Dataset(inputs=np.zeros((1000, 2, 1)), input_lengths=np.full(1000, 2),
                 frame_labels=np.zeros((1000, 2), dtype=int))
    a, b = split_dataset(ds, 0.9, np.random.default_rng(0))
    assert (len(a), len(b)) == (900, 100)


def test_task_sizes():
    train, val, test = generate_task(SyntheticTaskSpec(num_items=600, num_test=200))
    assert (len(train), len(val), len(test)) == (540, 60, 200)


def test_inconsistent_specs_rejected():
    with pytest.raises(ContractError):
        SyntheticTaskSpec(t_min=4, t_max=4, required_half_width=2).validate()
    with pytest.raises(ContractError):
        SyntheticTaskSpec(kind="nope").validate()
    with pytest.raises(ContractError):
        SyntheticTaskSpec(kind="ctc-sequence", vocab=4, t_min=8, t_max=8, max_label_len=4).validate()


def test_ceiling_values():
    # all offsets visible: labels are a deterministic function of the window
    assert context_ceiling(range(-2, 3), 2, 24) == pytest.approx(1.0)
    # nothing visible: best constant guess
    assert context_ceiling([], 2, 24) < 0.8


def test_dataset_round_trip(tmp_path):
    for kind in ("planted-context", "ctc-sequence"):
        spec = SyntheticTaskSpec(kind=kind, vocab=3 if kind != "planted-context" else 2,
                                 t_min=20, t_max=24, input_dim=4, num_items=20, num_test=5)
        train, _, _ = generate_task(spec)
        save_dataset(tmp_path / f"{kind}.stnas", train, spec)
        back = load_dataset(tmp_path / f"{kind}.stnas")
        np.testing.assert_array_equal(back.inputs, train.inputs)
        assert [list(s) for s in back.label_seqs] == [list(s) for s in train.label_seqs]


def sample_ceiling(ds, visible_offsets) -> float:
    """Accuracy of the best lookup table from (position, visible bits) to label, fitted on ``ds``
    itself: an upper bound for any model that only sees those offsets on this sample."""
    bits = np.where(ds.inputs[:, :, 0] > 0, 1, -1)
    N, T = bits.shape
    padded = np.pad(bits, ((0, 0), (2, 2)))
    counts = {}
    for t in range(T):
        keys = [tuple(row) for row in padded[:, [t + 2 + o for o in visible_offsets]]]
        for key, y in zip(keys, ds.frame_labels[:, t]):
            counts.setdefault((t, key), [0, 0])[int(y)] += 1
    return sum(max(c) for c in counts.values()) / (N * T)


def _train_fixed(label: str, train, test, epochs: int = 60) -> float:
    spec = NetSpec(4, 2, 16, 0.0, [{"type": "block", "candidates": [label]}], init_seed=0)
    net = SuperNetwork(spec)
    z = SampledArchitecture((0,))
    opt = Adam(net.theta_params())
    for epoch in range(epochs):
        for batch in train.minibatches(32, stream(0, epoch)):
            loss = task_loss(net, net.forward(batch.inputs, z=z), batch)
            opt.step(ad.backward(loss, net.theta_params().values()), 3e-3)
    with ad.no_grad():
        logits = net.forward(test.inputs, z=z).values
    return float((logits.argmax(-1) == test.frame_labels).mean())


def test_planted_task_separates_context_widths():
    """Half-width 2 model clears 99%; a half-width 1 model stays under the enumerated ceiling."""
    spec = SyntheticTaskSpec(num_items=600, num_test=200, noise=0.1)
    train, _, test = generate_task(spec)
    wide = _train_fixed("TDNN-2-1", train, test)
    narrow = _train_fixed("TDNN-1-1", train, test)
    assert wide >= 0.99
    assert narrow <= sample_ceiling(test, [-1, 0, 1])
    assert context_ceiling([-1, 0, 1], 2, spec.t_max) < 0.99
