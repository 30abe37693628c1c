"""Super-network: a serial macro-DAG of searching blocks and fixed layers."""
from __future__ import annotations

import copy
import itertools
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from . import estimators as est
from . import io
from .autodiff import ContractError, Tensor
from .nn import CandidateOpSpec, DenseLayer, TdnnUnit

WSJ_CANDIDATES = ("TDNN-1-1", "TDNN-1-2", "TDNN-2-1", "TDNN-2-2")
SWBD_CANDIDATES = WSJ_CANDIDATES + ("TDNN-3-1", "TDNN-3-2")
MODES = ("darts", "snas", "st", "fixed", "uniform")


@dataclass
class NetSpec:
    """Layer list of a serial super-network; a dense classifier is appended.

    Each layer entry is either ``{"type": "block", "candidates": [labels]}``
    or ``{"type": "tdnn", "half_context": h, "dilation": d, "stride": s}``.
    """

    input_dim: int
    output_dim: int
    hidden: int = 32
    dropout_p: float = 0.5
    layers: list = field(default_factory=list)
    init_seed: int = 0

    def __post_init__(self):
        if self.input_dim < 1 or self.output_dim < 1 or self.hidden < 1:
            raise ContractError("dimensions must be positive")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ContractError("dropout_p must lie in [0, 1)")
        for layer in self.layers:
            kind = layer.get("type")
            if kind == "block":
                if not layer.get("candidates"):
                    raise ContractError("a searching block needs at least one candidate")
                for label in layer["candidates"]:
                    CandidateOpSpec.parse(label)
            elif kind == "tdnn":
                if layer.get("stride", 1) < 1 or layer.get("dilation", 1) < 1 \
                        or layer.get("half_context", 0) < 0:
                    raise ContractError(f"invalid tdnn layer {layer}")
            else:
                raise ContractError(f"unknown layer type {kind!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "NetSpec":
        return cls(**copy.deepcopy(d))

    @property
    def total_stride(self) -> int:
        return math.prod(layer.get("stride", 1) for layer in self.layers if layer["type"] == "tdnn")


def preset(name: str, input_dim: int | None = None, output_dim: int | None = None,
           hidden: int | None = None) -> NetSpec:
    """Named topologies.

    ``wsj`` / ``swbd``: 3 blocks, stride-3 subsampling TDNN, 3 blocks, dense;
    640 hidden units, K=4 / K=6.  ``desk`` is ``wsj`` at width 32.  ``toy``
    is a single WSJ-candidate block for planted-context tasks.
    """
    def serial(cands):
        blocks = [{"type": "block", "candidates": list(cands)} for _ in range(3)]
        sub = [{"type": "tdnn", "half_context": 1, "dilation": 1, "stride": 3}]
        return blocks + sub + [dict(b) for b in blocks]

    if name == "wsj":
        spec = NetSpec(input_dim or 120, output_dim or 46, hidden or 640, 0.5, serial(WSJ_CANDIDATES))
    elif name == "swbd":
        spec = NetSpec(input_dim or 120, output_dim or 46, hidden or 640, 0.5, serial(SWBD_CANDIDATES))
    elif name == "desk":
        spec = NetSpec(input_dim or 8, output_dim or 5, hidden or 32, 0.5, serial(WSJ_CANDIDATES))
    elif name == "toy":
        spec = NetSpec(input_dim or 4, output_dim or 2, hidden or 16, 0.0,
                       [{"type": "block", "candidates": list(WSJ_CANDIDATES)}])
    else:
        raise ContractError(f"unknown preset {name!r}")
    return spec


class SearchingBlock:
    """K candidate operations between two nodes plus their architecture weights."""

    def __init__(self, index: int, in_dim: int, out_dim: int, candidates, dropout_p: float,
                 rng: np.random.Generator):
        self.index = index
        self.specs = [c if isinstance(c, CandidateOpSpec) else CandidateOpSpec.parse(c)
                      for c in candidates]
        if not self.specs:
            raise ContractError("a searching block needs K >= 1 candidates")
        self.ops = [TdnnUnit(in_dim, out_dim, s.half_context, s.dilation, 1, dropout_p, rng)
                    for s in self.specs]
        self.alpha = Tensor(np.zeros(len(self.specs)), requires_grad=True)

    @property
    def K(self) -> int:
        return len(self.ops)

    @property
    def labels(self) -> list[str]:
        return [s.label for s in self.specs]


@dataclass(frozen=True)
class SampledArchitecture:
    """Selected candidate index per searching block."""

    indices: tuple

    def one_hot(self, sizes) -> list[np.ndarray]:
        return [est.one_hot(i, k) for i, k in zip(self.indices, sizes)]


class SuperNetwork:
    def __init__(self, spec: NetSpec):
        self.spec = spec
        rng = np.random.default_rng(np.random.SeedSequence([spec.init_seed, 104729]))
        self.layers = []
        dim = spec.input_dim
        n_blocks = 0
        for layer in spec.layers:
            if layer["type"] == "block":
                self.layers.append(SearchingBlock(n_blocks, dim, spec.hidden, layer["candidates"],
                                                  spec.dropout_p, rng))
                n_blocks += 1
            else:
                self.layers.append(TdnnUnit(dim, spec.hidden, layer.get("half_context", 0),
                                            layer.get("dilation", 1), layer.get("stride", 1),
                                            spec.dropout_p, rng))
            dim = spec.hidden
        self.dense = DenseLayer(dim, spec.output_dim, rng)
        # parent sets A_j of each node; the serial chain links node j to j-1
        self.parents = [[j - 1] for j in range(1, len(self.layers) + 2)]
        self._check_shapes()

    def _check_shapes(self) -> None:
        probe = np.zeros((1, 7 * max(1, self.spec.total_stride), self.spec.input_dim))
        x = Tensor(probe)
        with ad.no_grad():
            for layer in self.layers:
                if isinstance(layer, SearchingBlock):
                    shapes = {op(x).shape for op in layer.ops}
                    if len(shapes) != 1:
                        raise ContractError(f"block {layer.index} candidates disagree on shape: {shapes}")
                    x = layer.ops[0](x)
                else:
                    x = layer(x)

    @property
    def blocks(self) -> list[SearchingBlock]:
        return [layer for layer in self.layers if isinstance(layer, SearchingBlock)]

    @property
    def block_sizes(self) -> list[int]:
        return [b.K for b in self.blocks]

    # ------------------------------------------------------------ parameters

    def alpha_params(self) -> dict[str, Tensor]:
        return {f"layers.{i}.alpha": layer.alpha for i, layer in enumerate(self.layers)
                if isinstance(layer, SearchingBlock)}

    def theta_params(self) -> dict[str, Tensor]:
        params = {}
        for i, layer in enumerate(self.layers):
            if isinstance(layer, SearchingBlock):
                for k, op in enumerate(layer.ops):
                    for name, p in op.parameters().items():
                        params[f"layers.{i}.cand.{k}.{name}"] = p
            else:
                for name, p in layer.parameters().items():
                    params[f"layers.{i}.{name}"] = p
        for name, p in self.dense.parameters().items():
            params[f"dense.{name}"] = p
        return params

    def parameters(self) -> dict[str, Tensor]:
        return {**self.theta_params(), **self.alpha_params()}

    def candidate_params(self, block: int, k: int) -> dict[str, Tensor]:
        prefix = None
        for i, layer in enumerate(self.layers):
            if isinstance(layer, SearchingBlock) and layer.index == block:
                prefix = f"layers.{i}.cand.{k}."
        return {n: p for n, p in self.theta_params().items() if n.startswith(prefix)}

    def num_parameters(self, z: SampledArchitecture | None = None) -> int:
        total = self.dense.num_parameters()
        for layer in self.layers:
            if isinstance(layer, SearchingBlock):
                ops = layer.ops if z is None else [layer.ops[z.indices[layer.index]]]
                total += sum(op.num_parameters() for op in ops)
            else:
                total += layer.num_parameters()
        return total

    def set_requires_grad(self, theta: bool | None = None, alpha: bool | None = None) -> None:
        if theta is not None:
            for p in self.theta_params().values():
                p.requires_grad = theta
        if alpha is not None:
            for p in self.alpha_params().values():
                p.requires_grad = alpha

    # --------------------------------------------------------------- forward

    def forward(self, x, mode: str = "fixed", z: SampledArchitecture | None = None,
                tau: float | None = None, rng: np.random.Generator | None = None,
                train: bool = False, gumbel_rng: np.random.Generator | None = None) -> Tensor:
        """Logits for ``x[batch, T, input_dim]``.

        ``mode`` selects the block operation: ``darts``, ``snas`` (needs
        ``tau``), ``st`` and ``fixed`` (need ``z``), or ``uniform`` (draws
        ``z`` uniformly from ``rng``).  ``train`` enables dropout, which then
        draws its masks from ``rng``.
        """
        if mode not in MODES:
            raise ContractError(f"mode must be one of {MODES}, got {mode!r}")
        if mode in ("st", "fixed") and z is None:
            raise ContractError(f"mode {mode!r} needs a sampled architecture z")
        if mode == "snas" and (tau is None or gumbel_rng is None):
            raise ContractError("mode 'snas' needs a temperature and a gumbel rng")
        if train and rng is None:
            raise ContractError("train mode needs an rng for dropout")
        if mode == "uniform":
            if rng is None:
                raise ContractError("mode 'uniform' needs an rng")
            z = uniform_subgraph(self, rng)
            mode = "fixed"
        if z is not None and len(z.indices) != len(self.blocks):
            raise ContractError("z must select one candidate per block")
        drop = "train" if train else "eval"
        h = ad.as_tensor(x)
        for layer in self.layers:
            if isinstance(layer, SearchingBlock):
                if mode == "darts":
                    h = est.darts_block(layer, h, drop, rng)
                elif mode == "snas":
                    h = est.snas_block(layer, h, tau, gumbel_rng, drop, dropout_rng=rng)
                elif mode == "st":
                    h = est.st_block(layer, h, z.indices[layer.index], drop, rng)
                else:
                    h = est.fixed_block(layer, h, z.indices[layer.index], drop, rng)
            else:
                h = layer(h, drop, rng)
        return self.dense(h)

    __call__ = forward


# ------------------------------------------------------------------ operations

def arch_probabilities(block: SearchingBlock) -> np.ndarray:
    a = block.alpha.values.astype(np.float64)
    e = np.exp(a - a.max())
    return e / e.sum()


def _categorical(rng: np.random.Generator, p: np.ndarray) -> int:
    c = np.cumsum(p)
    return int(min(np.searchsorted(c, rng.random() * c[-1], side="right"), len(p) - 1))


def sample_subgraph(net: SuperNetwork, rng: np.random.Generator) -> SampledArchitecture:
    """Independent categorical draw per block from softmax(alpha)."""
    return SampledArchitecture(tuple(_categorical(rng, arch_probabilities(b)) for b in net.blocks))


def uniform_subgraph(net: SuperNetwork, rng: np.random.Generator) -> SampledArchitecture:
    return SampledArchitecture(tuple(int(rng.integers(b.K)) for b in net.blocks))


def count_subgraphs(net_or_sizes) -> int:
    sizes = net_or_sizes.block_sizes if isinstance(net_or_sizes, SuperNetwork) else net_or_sizes
    return math.prod(int(k) for k in sizes)


def enumerate_subgraphs(net: SuperNetwork):
    for idx in itertools.product(*(range(k) for k in net.block_sizes)):
        yield SampledArchitecture(tuple(idx))


def subgraph_probability(net: SuperNetwork, z: SampledArchitecture) -> float:
    return float(np.prod([arch_probabilities(b)[i] for b, i in zip(net.blocks, z.indices)]))


def top1_indices(net: SuperNetwork) -> tuple:
    # np.argmax returns the first maximum, i.e. ties go to the lowest index
    return tuple(int(np.argmax(b.alpha.values)) for b in net.blocks)


def derive_top1(net: SuperNetwork, init_seed: int | None = None) -> SuperNetwork:
    """Keep the argmax-alpha candidate of every block, freshly initialised."""
    chosen = top1_indices(net)
    layers, it = [], iter(chosen)
    blocks = iter(net.blocks)
    for layer in net.spec.layers:
        if layer["type"] == "block":
            b = next(blocks)
            layers.append({"type": "block", "candidates": [b.labels[next(it)]]})
        else:
            layers.append(dict(layer))
    spec = NetSpec(net.spec.input_dim, net.spec.output_dim, net.spec.hidden, net.spec.dropout_p,
                   layers, net.spec.init_seed if init_seed is None else init_seed)
    return SuperNetwork(spec)


def prune_to(net: SuperNetwork, z: SampledArchitecture) -> SuperNetwork:
    """Single model for sub-graph ``z`` that shares the super-network's parameters."""
    layers, blocks = [], iter(net.blocks)
    for layer in net.spec.layers:
        if layer["type"] == "block":
            b = next(blocks)
            layers.append({"type": "block", "candidates": [b.labels[z.indices[b.index]]]})
        else:
            layers.append(dict(layer))
    spec = NetSpec(net.spec.input_dim, net.spec.output_dim, net.spec.hidden, net.spec.dropout_p,
                   layers, net.spec.init_seed)
    pruned = SuperNetwork(spec)
    src = net.layers
    for i, layer in enumerate(pruned.layers):
        if isinstance(layer, SearchingBlock):
            layer.ops = [src[i].ops[z.indices[src[i].index]]]
        else:
            pruned.layers[i] = src[i]
    pruned.dense = net.dense
    return pruned


def architecture_report(net: SuperNetwork, chosen=None) -> str:
    """One line per searching block naming the chosen candidate."""
    chosen = top1_indices(net) if chosen is None else tuple(chosen)
    lines = []
    for b, k in zip(net.blocks, chosen):
        pi = arch_probabilities(b)
        lines.append(f"block {b.index + 1}: {b.labels[k]} (pi={pi[k]:.4f})")
    return "\n".join(lines) + "\n"


# -------------------------------------------------------------- serialization

def save_supernet(path, net: SuperNetwork, extra: dict | None = None) -> None:
    arrays = {name: p.values for name, p in net.parameters().items()}
    meta = {"type": "supernet", "spec": net.spec.to_dict(), "extra": extra or {}}
    io.save(path, meta, arrays)


def load_supernet(path) -> tuple[SuperNetwork, dict]:
    meta, arrays = io.load(path)
    if meta.get("type") != "supernet":
        raise io.FormatError("container does not hold a super-network")
    net = SuperNetwork(NetSpec.from_dict(meta["spec"]))
    load_parameters(net, arrays)
    return net, meta.get("extra", {})


def load_parameters(net: SuperNetwork, arrays: dict[str, np.ndarray]) -> None:
    params = net.parameters()
    if set(params) != set(arrays):
        raise io.FormatError("checkpoint parameters do not match the network")
    for name, p in params.items():
        if arrays[name].shape != p.shape:
            raise io.FormatError(f"shape mismatch for {name}")
        p.values = arrays[name].copy()
