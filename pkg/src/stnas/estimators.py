"""Architecture-gradient strategies for one searching block.

``darts_block``
    continuous mixture weighted by softmax(alpha).
``snas_block``
    mixture weighted by a Gumbel-Softmax draw at temperature tau.
``st_block``
    forward runs the sampled candidate only (one-hot gate); backward sends
    the gradient of the gate into softmax(alpha) (straight-through).  All K
    candidate outputs are computed so the alpha gradient can see them, but
    only the sampled one keeps a graph back to its parameters and input.
    This is the same gradient as the binary-gate approximation used by
    ProxylessNAS.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, Tensor

KINDS = ("darts", "snas", "st")
U_CLAMP = 1e-12


@dataclass
class EstimatorConfig:
    kind: str = "st"
    tau: float = 1.0
    tau_decay: float = 0.9
    tau_floor: float = 0.1

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ContractError(f"estimator kind must be one of {KINDS}, got {self.kind!r}")
        if self.tau <= 0 or self.tau_floor <= 0:
            raise ContractError("temperature must be positive")
        if not 0 < self.tau_decay <= 1:
            raise ContractError("temperature decay must lie in (0, 1]")

    def tau_at(self, epoch: int) -> float:
        """Temperature for a 0-based search epoch."""
        return max(self.tau_floor, self.tau * self.tau_decay ** epoch)


@dataclass
class GumbelDraw:
    u: np.ndarray
    g: np.ndarray
    y: Tensor


def gumbel_noise(rng: np.random.Generator, shape, u: np.ndarray | None = None):
    if u is None:
        u = rng.random(shape)
    u = np.clip(u, U_CLAMP, 1.0 - U_CLAMP)
    return u, -np.log(-np.log(u))


def gumbel_softmax_weights(alpha, tau: float, rng: np.random.Generator | None = None,
                           u: np.ndarray | None = None) -> GumbelDraw:
    """Soft one-hot ``softmax((alpha + g) / tau)`` with ``g = -log(-log(u))``."""
    if tau <= 0:
        raise ContractError(f"temperature must be positive, got {tau}")
    alpha = ad.as_tensor(alpha)
    if u is None and rng is None:
        raise ContractError("need an rng or explicit uniform draws")
    u, g = gumbel_noise(rng, alpha.shape, u)
    y = ad.softmax(ad.mul(ad.add(alpha, g.astype(alpha.dtype)), 1.0 / tau))
    return GumbelDraw(u=u, g=g, y=y)


def _run(block, k: int, x, mode: str, rng, grad: bool = True) -> Tensor:
    tag = ("cand", block.index, k)
    tape = ad.active_tape()
    if tape is not None:
        tape.count_forward(tag)
    if grad:
        return block.ops[k](x, mode=mode, rng=rng, tag=tag)
    with ad.no_grad():
        return block.ops[k](x, mode=mode, rng=rng, tag=tag)


def fixed_block(block, x, index: int, mode: str = "eval", rng=None) -> Tensor:
    """Run only the candidate ``index`` (the pruned sub-graph)."""
    if not 0 <= index < block.K:
        raise ContractError(f"candidate index {index} outside [0, {block.K})")
    return _run(block, index, x, mode, rng)


def darts_block(block, x, mode: str = "eval", rng=None) -> Tensor:
    if block.K == 1:
        return _run(block, 0, x, mode, rng)
    pi = ad.softmax(block.alpha)
    outs = [_run(block, k, x, mode, rng) for k in range(block.K)]
    return ad.weighted_sum(pi, outs)


def snas_block(block, x, tau: float, rng: np.random.Generator | None = None,
               mode: str = "eval", u: np.ndarray | None = None, dropout_rng=None) -> Tensor:
    if tau <= 0:
        raise ContractError(f"temperature must be positive, got {tau}")
    if block.K == 1:
        return _run(block, 0, x, mode, dropout_rng)
    draw = gumbel_softmax_weights(block.alpha, tau, rng, u)
    outs = [_run(block, k, x, mode, dropout_rng) for k in range(block.K)]
    return ad.weighted_sum(draw.y, outs)


def one_hot(index: int, K: int) -> np.ndarray:
    z = np.zeros(K)
    z[index] = 1.0
    return z


def st_block(block, x, z, mode: str = "eval", rng=None) -> Tensor:
    """Straight-through block: ``z`` is a one-hot vector or the selected index."""
    z = np.asarray(z)
    if z.ndim == 0:
        index = int(z)
        if not 0 <= index < block.K:
            raise ContractError(f"candidate index {index} outside [0, {block.K})")
    else:
        if z.shape != (block.K,) or not np.all((z == 0) | (z == 1)) or z.sum() != 1:
            raise ContractError(f"z must be one-hot of length {block.K}, got {z}")
        index = int(np.argmax(z))
    if block.K == 1:
        return _run(block, 0, x, mode, rng)
    pi = ad.softmax(block.alpha)
    gate = ad.straight_through(one_hot(index, block.K), pi)
    outs = [_run(block, k, x, mode, rng, grad=(k == index)) for k in range(block.K)]
    return ad.weighted_sum(gate, outs)


def st_alpha_gradient_reference(pi: np.ndarray, grad_x: np.ndarray, outputs) -> np.ndarray:
    """Closed form of the straight-through alpha gradient for one block.

    ``dL/dalpha_k = sum_k' <dL/dx_j, o_k'(x)> * dpi_k'/dalpha_k`` with the
    softmax Jacobian ``diag(pi) - pi pi^T``.
    """
    dz = np.array([np.sum(grad_x * o) for o in outputs])
    jac = np.diag(pi) - np.outer(pi, pi)
    return jac @ dz
