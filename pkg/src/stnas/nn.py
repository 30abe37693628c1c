"""Layers of the search space: TDNN (dilated 1-D convolution), dense, layer norm, dropout."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, Tensor


def uniform_init(rng: np.random.Generator, shape, fan_in: int) -> Tensor:
    bound = np.sqrt(1.0 / fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


@dataclass(frozen=True)
class CandidateOpSpec:
    """One candidate operation: a TDNN with ``half_context`` and ``dilation``.

    ``half_context=0`` gives a per-frame dense map.
    """

    half_context: int
    dilation: int = 1

    def __post_init__(self):
        if self.half_context < 0 or self.dilation < 1:
            raise ContractError(f"invalid candidate {self}")

    @property
    def label(self) -> str:
        return f"TDNN-{self.half_context}-{self.dilation}"

    @property
    def half_width(self) -> int:
        """Receptive half-width in frames, h * d."""
        return self.half_context * self.dilation

    @classmethod
    def parse(cls, label: str) -> "CandidateOpSpec":
        parts = label.split("-")
        if len(parts) != 3 or parts[0] != "TDNN":
            raise ContractError(f"cannot parse candidate label {label!r}")
        return cls(int(parts[1]), int(parts[2]))


class TdnnLayer:
    def __init__(self, in_dim: int, out_dim: int, half_context: int = 1, dilation: int = 1,
                 stride: int = 1, rng: np.random.Generator | None = None):
        if half_context < 0 or dilation < 1 or stride < 1:
            raise ContractError("TDNN needs half_context >= 0, dilation >= 1, stride >= 1")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.in_dim, self.out_dim = in_dim, out_dim
        self.half_context, self.dilation, self.stride = half_context, dilation, stride
        taps = 2 * half_context + 1
        fan_in = taps * in_dim
        self.weight = uniform_init(rng, (taps, in_dim, out_dim), fan_in)
        self.bias = uniform_init(rng, (out_dim,), fan_in)

    def parameters(self) -> dict[str, Tensor]:
        return {"weight": self.weight, "bias": self.bias}

    def num_parameters(self) -> int:
        return (2 * self.half_context + 1) * self.in_dim * self.out_dim + self.out_dim

    def __call__(self, x: Tensor, tag=None) -> Tensor:
        return tdnn_forward(self, x, tag=tag)


def tdnn_forward(layer: TdnnLayer, x: Tensor, tag=None) -> Tensor:
    x = ad.as_tensor(x)
    if x.ndim != 3 or x.shape[2] != layer.in_dim or x.shape[1] < 1:
        raise ContractError(f"TDNN expects (batch, T>=1, {layer.in_dim}), got {x.shape}")
    return ad.conv1d(x, layer.weight, layer.bias, stride=layer.stride,
                     dilation=layer.dilation, tag=tag)


class DenseLayer:
    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator | None = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.in_dim, self.out_dim = in_dim, out_dim
        self.weight = uniform_init(rng, (in_dim, out_dim), in_dim)
        self.bias = uniform_init(rng, (out_dim,), in_dim)

    def parameters(self) -> dict[str, Tensor]:
        return {"weight": self.weight, "bias": self.bias}

    def num_parameters(self) -> int:
        return self.in_dim * self.out_dim + self.out_dim

    def __call__(self, x: Tensor) -> Tensor:
        return dense_forward(self, x)


def dense_forward(layer: DenseLayer, x: Tensor) -> Tensor:
    x = ad.as_tensor(x)
    if x.shape[-1] != layer.in_dim:
        raise ContractError(f"dense layer expects last dim {layer.in_dim}, got {x.shape}")
    return ad.add(ad.matmul(x, layer.weight), layer.bias)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    return ad.layer_norm(x, gain, bias, eps=eps)


def dropout(x: Tensor, p: float, mode: str = "eval", rng: np.random.Generator | None = None) -> Tensor:
    if mode not in ("train", "eval"):
        raise ContractError(f"dropout mode must be 'train' or 'eval', got {mode!r}")
    return ad.dropout(x, p, mode == "train", rng)


@dataclass
class NormDropout:
    dim: int
    dropout_p: float = 0.5
    gain: Tensor = field(init=False)
    bias: Tensor = field(init=False)

    def __post_init__(self):
        if not 0.0 <= self.dropout_p < 1.0:
            raise ContractError(f"dropout probability must lie in [0, 1), got {self.dropout_p}")
        self.gain = Tensor(np.ones(self.dim), requires_grad=True)
        self.bias = Tensor(np.zeros(self.dim), requires_grad=True)

    def parameters(self) -> dict[str, Tensor]:
        return {"gain": self.gain, "bias": self.bias}

    def num_parameters(self) -> int:
        return 2 * self.dim

    def __call__(self, x: Tensor, mode: str = "eval", rng=None) -> Tensor:
        return dropout(layer_norm(x, self.gain, self.bias), self.dropout_p, mode, rng)


class TdnnUnit:
    """TDNN followed by ReLU, layer norm and dropout."""

    def __init__(self, in_dim: int, out_dim: int, half_context: int, dilation: int = 1,
                 stride: int = 1, dropout_p: float = 0.5, rng: np.random.Generator | None = None):
        self.tdnn = TdnnLayer(in_dim, out_dim, half_context, dilation, stride, rng=rng)
        self.post = NormDropout(out_dim, dropout_p)

    @property
    def spec(self) -> CandidateOpSpec:
        return CandidateOpSpec(self.tdnn.half_context, self.tdnn.dilation)

    def parameters(self) -> dict[str, Tensor]:
        params = {f"tdnn.{k}": v for k, v in self.tdnn.parameters().items()}
        params.update({f"norm.{k}": v for k, v in self.post.parameters().items()})
        return params

    def num_parameters(self) -> int:
        return self.tdnn.num_parameters() + self.post.num_parameters()

    def __call__(self, x: Tensor, mode: str = "eval", rng=None, tag=None) -> Tensor:
        return self.post(ad.relu(self.tdnn(x, tag=tag)), mode, rng)
