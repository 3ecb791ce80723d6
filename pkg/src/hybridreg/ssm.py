"""State-space layers: ZOH discretization, recurrent and convolutional evaluation,
the input-selective SSM and the gated Mamba-style block built on it.

The state matrix is diagonal throughout, stored as the vector of its diagonal.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numeric as nx
from .errors import NonPositiveDelta, SelectiveParamsNotAllowed, ShapeMismatch
from .numeric import Tensor

SERIES_THRESHOLD = 1e-8


@dataclass(frozen=True)
class SSMParams:
    """Continuous system ``h' = diag(a) h + B x``, ``y = C h + diag(D) x``.

    ``a`` is (N,), ``B`` (N, L), ``C`` (L, N), ``D`` (L,), ``delta`` a scalar or (N,).
    """

    a: np.ndarray
    B: np.ndarray
    C: np.ndarray
    D: np.ndarray
    delta: float | np.ndarray

    @property
    def A(self) -> np.ndarray:
        return np.diag(self.a)


@dataclass(frozen=True)
class DiscreteSSM:
    """``Abar`` is (N,) and ``Bbar`` (N, L) for a time-invariant system; a
    time-varying one carries a leading step axis: (M, N) and (M, N, L)."""

    Abar: np.ndarray
    Bbar: np.ndarray

    @property
    def time_varying(self) -> bool:
        return self.Abar.ndim == 2

    @property
    def Abar_matrix(self) -> np.ndarray:
        if self.time_varying:
            raise SelectiveParamsNotAllowed("per-step parameters have no single matrix")
        return np.diag(self.Abar)


def discretize(p: SSMParams) -> DiscreteSSM:
    """Zero-order hold: ``Abar = exp(delta a)``, ``Bbar = (exp(delta a) - 1) / (delta a) * delta B``.

    Where ``|delta a| < 1e-8`` the limit ``Bbar = delta B`` is used.
    """
    a = np.asarray(p.a, dtype=np.float64)
    delta = np.broadcast_to(np.asarray(p.delta, dtype=np.float64), a.shape)
    if np.any(~(delta > 0)):
        raise NonPositiveDelta("delta must be strictly positive")
    z = delta * a
    small = np.abs(z) < SERIES_THRESHOLD
    zs = np.where(small, 1.0, z)
    ratio = np.where(small, 1.0, np.expm1(zs) / zs)
    Bbar = (ratio * delta)[:, None] * np.asarray(p.B, dtype=np.float64)
    return DiscreteSSM(np.exp(z), Bbar)


def ssm_scan(d: DiscreteSSM, C, D, x) -> np.ndarray:
    """Sequential recurrence ``h_k = Abar h_{k-1} + Bbar x_k``, ``y_k = C h_k + D x_k``, ``h_0 = 0``."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    C = np.atleast_2d(np.asarray(C, dtype=np.float64))
    D = np.zeros(x.shape[1]) if D is None else np.asarray(D, dtype=np.float64)
    M = x.shape[0]
    N = d.Abar.shape[-1]
    h = np.zeros(N)
    y = np.empty((M, C.shape[0]))
    for k in range(M):
        Ab = d.Abar[k] if d.time_varying else d.Abar
        Bb = d.Bbar[k] if d.time_varying else d.Bbar
        h = Ab * h + Bb @ x[k]
        y[k] = C @ h + (D @ x[k] if D.ndim == 2 else D * x[k])
    return y


def ssm_kernel(d: DiscreteSSM, C, length: int) -> np.ndarray:
    """Convolution taps ``K_k = C diag(Abar)^k Bbar`` for ``k < length``; shape (length, L_out, L_in)."""
    if d.time_varying:
        raise SelectiveParamsNotAllowed("the convolutional form needs time-invariant parameters")
    C = np.atleast_2d(np.asarray(C, dtype=np.float64))
    powers = d.Abar[None, :] ** np.arange(length)[:, None]
    return np.einsum("on,kn,ni->koi", C, powers, d.Bbar)


def ssm_conv(d: DiscreteSSM, C, x) -> np.ndarray:
    """Causal convolution of ``x`` with the global kernel (no skip path)."""
    if d.time_varying:
        raise SelectiveParamsNotAllowed("the convolutional form needs time-invariant parameters")
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    M = x.shape[0]
    K = ssm_kernel(d, C, M)
    y = np.zeros((M, K.shape[1]))
    for t in range(M):
        # y_t = sum_k K_k x_{t-k}
        y[t] = np.einsum("koi,ki->o", K[: t + 1], x[t::-1])
    return y


# -- selective SSM ------------------------------------------------------------------


@dataclass
class SelectiveSSMParams:
    """Projections producing per-token step size, input and readout vectors."""

    W_delta: Tensor  # (E, E)
    b_delta: Tensor  # (E,)
    W_B: Tensor  # (E, N)
    W_C: Tensor  # (E, N)
    A_log: Tensor  # (E, N); A = -exp(A_log) < 0
    D: Tensor  # (E,)

    @property
    def width(self) -> int:
        return self.W_B.shape[0]

    @property
    def d_state(self) -> int:
        return self.W_B.shape[1]


def init_selective_ssm(rng: np.random.Generator, width: int, d_state: int = 8) -> SelectiveSSMParams:
    dt = np.exp(rng.uniform(np.log(1e-3), np.log(1e-1), size=width))
    return SelectiveSSMParams(
        W_delta=nx.glorot(rng, width, width, 0.1),
        b_delta=nx.parameter(dt + np.log(-np.expm1(-dt))),  # softplus^-1(dt)
        W_B=nx.glorot(rng, width, d_state),
        W_C=nx.glorot(rng, width, d_state),
        A_log=nx.parameter(np.log(np.tile(np.arange(1, d_state + 1, dtype=np.float64), (width, 1)))),
        D=nx.parameter(np.ones(width)),
    )


def selective_ssm(p: SelectiveSSMParams, x: Tensor) -> Tensor:
    """Run the input-conditioned SSM over an (M, E) sequence.

    ``delta_t = softplus(x_t W_delta + b_delta)``, ``B_t = x_t W_B``,
    ``C_t = x_t W_C``; each step is discretized with ZOH and then recursed.
    """
    x = nx.as_tensor(x)
    if x.ndim != 2 or x.shape[1] != p.width:
        raise ShapeMismatch(f"selective_ssm expects (M, {p.width}), got {x.shape}")
    delta = nx.softplus(nx.linear(x, p.W_delta, p.b_delta))
    B = x @ p.W_B
    C = x @ p.W_C
    A = -nx.exp(p.A_log)
    return nx.selective_scan(x, delta, A, B, C, p.D)


# -- Mamba block --------------------------------------------------------------------


@dataclass
class MambaBlockParams:
    ln_gain: Tensor
    ln_bias: Tensor
    W_in: Tensor
    b_in: Tensor
    conv_kernel: Tensor
    conv_bias: Tensor
    W_gate: Tensor
    b_gate: Tensor
    ssm: SelectiveSSMParams
    W_out: Tensor
    b_out: Tensor
    order_token: Tensor

    @property
    def d_model(self) -> int:
        return self.W_in.shape[0]


def init_mamba_block(
    rng: np.random.Generator, d_model: int, d_state: int = 8, expand: int = 2, d_conv: int = 4
) -> MambaBlockParams:
    if expand < 1:
        raise ValueError("expansion factor must be >= 1")
    E = expand * d_model
    return MambaBlockParams(
        ln_gain=nx.parameter(np.ones(d_model)),
        ln_bias=nx.parameter(np.zeros(d_model)),
        W_in=nx.glorot(rng, d_model, E),
        b_in=nx.parameter(np.zeros(E)),
        conv_kernel=nx.parameter(rng.normal(0.0, 1.0 / np.sqrt(d_conv), size=(d_conv, E))),
        conv_bias=nx.parameter(np.zeros(E)),
        W_gate=nx.glorot(rng, d_model, E),
        b_gate=nx.parameter(np.zeros(E)),
        ssm=init_selective_ssm(rng, E, d_state),
        W_out=nx.glorot(rng, E, d_model, 0.5),
        b_out=nx.parameter(np.zeros(d_model)),
        order_token=nx.parameter(rng.normal(0.0, 0.02, size=E)),
    )


def mamba_block(p: MambaBlockParams, F: Tensor, order_indicator: bool = False) -> Tensor:
    """Gated selective-SSM block with a residual connection.

    ``F1 = LN(F)``, ``xs = silu(DW(F1 W_in))``, ``gate = silu(F1 W_gate)``,
    output ``(SSM(xs) * gate) W_out + F``. With ``order_indicator`` a learned
    token is prepended to the SSM input and its output row dropped.
    """
    F = nx.as_tensor(F)
    if F.ndim != 2 or F.shape[1] != p.d_model:
        raise ShapeMismatch(f"mamba_block expects (M, {p.d_model}), got {F.shape}")
    Fn = nx.layernorm_rows(F, p.ln_gain, p.ln_bias)
    xs = nx.silu(nx.dwconv1d(nx.linear(Fn, p.W_in, p.b_in), p.conv_kernel) + p.conv_bias)
    gate = nx.silu(nx.linear(Fn, p.W_gate, p.b_gate))
    if order_indicator:
        seq = nx.concat([p.order_token.reshape(1, -1), xs], axis=0)
        y = selective_ssm(p.ssm, seq)[1:]
    else:
        y = selective_ssm(p.ssm, xs)
    return nx.linear(y * gate, p.W_out, p.b_out) + F
