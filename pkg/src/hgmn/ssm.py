"""State-space kernels and the selective (Mamba-style) block.

The time-invariant helpers operate on plain numpy arrays and serve as
reference paths; the selective recurrence and the causal depthwise
convolution are fused tape operations with hand-written backward passes so a
length-L scan costs O(L) Python iterations rather than O(L) tape nodes per
state entry.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.linalg import expm

from . import tensor as T
from .errors import ContractError, DimensionError, NonFiniteError
from .tensor import Tensor

LIMIT_THRESHOLD = 1e-12
_PHI_SERIES_BELOW = 1e-3


@dataclass
class LtiParams:
    """Continuous system ``h' = A h + B x``, ``y = C h`` with step ``delta``.

    ``A`` is either a length-N vector (diagonal storage) or an N x N matrix.
    """

    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    delta: float

    def __post_init__(self):
        self.A = np.asarray(self.A, dtype=np.float64)
        self.B = np.asarray(self.B, dtype=np.float64).reshape(-1)
        self.C = np.asarray(self.C, dtype=np.float64).reshape(-1)
        n = self.A.shape[0]
        if self.A.ndim not in (1, 2) or (self.A.ndim == 2 and self.A.shape != (n, n)):
            raise DimensionError(f"A must be (N,) or (N, N), got {self.A.shape}")
        if self.B.shape != (n,) or self.C.shape != (n,):
            raise DimensionError(f"B {self.B.shape} and C {self.C.shape} must have length {n}")

    @property
    def diagonal(self) -> bool:
        return self.A.ndim == 1


@dataclass
class DiscreteParams:
    A_bar: np.ndarray  # (N,) when diagonal, else (N, N)
    B_bar: np.ndarray  # (N,)

    @property
    def diagonal(self) -> bool:
        return self.A_bar.ndim == 1


def _as_float(z) -> np.ndarray:
    z = np.asarray(z)
    return z if z.dtype.kind == "f" else z.astype(np.float64)


def phi1(z: np.ndarray) -> np.ndarray:
    """``(exp(z) - 1) / z`` with the removable singularity at 0 filled by 1."""
    z = _as_float(z)
    small = np.abs(z) < LIMIT_THRESHOLD
    safe = np.where(small, 1.0, z)
    return np.where(small, 1.0, np.expm1(safe) / safe)


def phi1_prime(z: np.ndarray, exp_z: np.ndarray | None = None,
               phi1_z: np.ndarray | None = None) -> np.ndarray:
    """Derivative of :func:`phi1`; Taylor series near 0 to dodge cancellation.

    ``(exp(z) - phi1(z)) / z``; pass already computed ``exp(z)`` and ``phi1(z)``
    to skip recomputing them.
    """
    z = _as_float(z)
    small = np.abs(z) < _PHI_SERIES_BELOW
    safe = np.where(small, 1.0, z)
    if exp_z is None or phi1_z is None:
        exp_z, phi1_z = np.exp(z), phi1(z)
    direct = (exp_z - phi1_z) / safe
    series = 0.5 + z * (1.0 / 3.0 + z * (1.0 / 8.0 + z / 30.0))
    return np.where(small, series, direct)


def zoh_discretize(p: LtiParams) -> DiscreteParams:
    """Zero-order hold: ``A_bar = exp(dA)``, ``B_bar = (dA)^-1 (exp(dA) - I) dB``.

    Diagonal systems use the closed form per entry (entries with
    ``|dA| < 1e-12`` take the limit ``dB``). Dense systems read ``B_bar`` off
    the exponential of the augmented matrix ``[[dA, dB], [0, 0]]``, which needs
    no inverse and so also covers singular ``A``.
    """
    if not p.delta > 0:
        raise ContractError(f"step must be positive, got {p.delta}")
    d = float(p.delta)
    with np.errstate(over="ignore", invalid="ignore"):
        if p.diagonal:
            z = d * p.A
            a_bar = np.exp(z)
            b_bar = d * phi1(z) * p.B
        else:
            n = p.A.shape[0]
            aug = np.zeros((n + 1, n + 1))
            aug[:n, :n] = d * p.A
            aug[:n, n] = d * p.B
            e = expm(aug)
            a_bar, b_bar = e[:n, :n], e[:n, n].copy()
    if not (np.isfinite(a_bar).all() and np.isfinite(b_bar).all()):
        raise NonFiniteError("discretization produced non-finite values")
    return DiscreteParams(a_bar, b_bar)


def lti_scan(d: DiscreteParams, C, x, h0=None) -> np.ndarray:
    """Sequential recurrence ``h_t = A_bar h_{t-1} + B_bar x_t``, ``y_t = C h_t``."""
    C = np.asarray(C, dtype=np.float64).reshape(-1)
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    h = np.zeros_like(d.B_bar) if h0 is None else np.array(h0, dtype=np.float64)
    y = np.empty(x.shape[0])
    for t in range(x.shape[0]):
        h = (d.A_bar * h if d.diagonal else d.A_bar @ h) + d.B_bar * x[t]
        y[t] = C @ h
    return y


def lti_conv_kernel(d: DiscreteParams, C, length: int) -> np.ndarray:
    """``(C B_bar, C A_bar B_bar, ...)`` by repeated state propagation."""
    if length < 1:
        raise ContractError(f"kernel length must be >= 1, got {length}")
    C = np.asarray(C, dtype=np.float64).reshape(-1)
    s = d.B_bar.copy()
    k = np.empty(length)
    for j in range(length):
        k[j] = C @ s
        s = d.A_bar * s if d.diagonal else d.A_bar @ s
    return k


def lti_conv_apply(k, x) -> np.ndarray:
    """Causal convolution ``y_t = sum_{j<=t} k_j x_{t-j}``."""
    k = np.asarray(k, dtype=np.float64).reshape(-1)
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    if k.shape != x.shape:
        raise ContractError(f"kernel length {k.size} != sequence length {x.size}")
    return np.convolve(x, k)[: x.size]


# ---------------------------------------------------------------- fused tape ops

def causal_depthwise_conv(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Per-channel causal convolution; ``w`` is (channels, width), tap ``width-1`` is the current step."""
    L, c = x.shape
    if w.ndim != 2 or w.shape[0] != c or b.shape != (c,):
        raise DimensionError(f"conv: x {x.shape}, w {w.shape}, b {b.shape}")
    K = w.shape[1]
    dtype = np.result_type(x.data, w.data, b.data)
    xp = np.vstack([np.zeros((K - 1, c), dtype=dtype), x.data])
    wd = w.data
    y = np.tile(b.data, (L, 1)).astype(dtype)
    for k in range(K):
        y += wd[:, k] * xp[k:k + L]

    def _bw(g):
        gxp = np.zeros_like(xp)
        gw = np.empty(wd.shape, dtype=g.dtype)
        for k in range(K):
            gxp[k:k + L] += g * wd[:, k]
            gw[:, k] = (g * xp[k:k + L]).sum(axis=0)
        return gxp[K - 1:], gw, g.sum(axis=0)

    return T.record(y, (x, w, b), _bw, "causal_conv")


def selective_recurrence(v: Tensor, delta: Tensor, A: Tensor, B: Tensor, C: Tensor,
                         D: Tensor, zoh_exact: bool = True) -> Tensor:
    """Input-dependent diagonal SSM scan.

    Shapes: ``v``/``delta`` (L, c), ``A`` (c, N), ``B``/``C`` (L, N), ``D`` (c,).
    ``h_t[c, n] = exp(delta_t[c] A[c, n]) h_{t-1}[c, n] + Bbar_t[c, n] v_t[c]`` and
    ``y_t[c] = sum_n C_t[n] h_t[c, n] + D[c] v_t[c]``.
    """
    L, c = v.shape
    N = A.shape[1]
    if delta.shape != (L, c) or A.shape != (c, N) or B.shape != (L, N) or C.shape != (L, N) \
            or D.shape != (c,):
        raise DimensionError(
            f"selective scan shapes: v {v.shape}, delta {delta.shape}, A {A.shape}, "
            f"B {B.shape}, C {C.shape}, D {D.shape}")
    vd, dd, Ad, Bd, Cd, Dd = v.data, delta.data, A.data, B.data, C.data, D.data
    z = dd[:, :, None] * Ad[None]                       # (L, c, N)
    with np.errstate(over="ignore", invalid="ignore"):
        a = np.exp(z)
        if zoh_exact:
            p1 = phi1(z)
            bbar = dd[:, :, None] * p1 * Bd[:, None, :]
        else:
            bbar = dd[:, :, None] * Bd[:, None, :]
        u = bbar * vd[:, :, None]
        hs = np.empty((L, c, N), dtype=u.dtype)
        h = np.zeros((c, N), dtype=u.dtype)
        for t in range(L):
            h = a[t] * h + u[t]
            hs[t] = h
        y = np.einsum("tcn,tn->tc", hs, Cd) + Dd * vd
    if not np.isfinite(y).all():
        bad_t, bad_c = np.argwhere(~np.isfinite(y))[0]
        raise NonFiniteError(f"selective scan non-finite at timestep {bad_t}, channel {bad_c}")

    def _bw(g):
        gC = np.einsum("tc,tcn->tn", g, hs)
        gD = (g * vd).sum(axis=0)
        gv = g * Dd
        gyC = g[:, :, None] * Cd[:, None, :]            # (L, c, N)
        gh = np.empty((L, c, N), dtype=gyC.dtype)
        acc = np.zeros((c, N), dtype=gyC.dtype)
        for t in range(L - 1, -1, -1):
            acc = gyC[t] + (a[t + 1] * acc if t + 1 < L else 0.0)
            gh[t] = acc
        h_prev = np.concatenate([np.zeros((1, c, N), dtype=hs.dtype), hs[:-1]], axis=0)
        ga = gh * h_prev
        gbbar = gh * vd[:, :, None]
        gv = gv + (gh * bbar).sum(axis=2)
        # a = exp(delta A)
        gdelta = (ga * a * Ad[None]).sum(axis=2)
        gA = (ga * a * dd[:, :, None]).sum(axis=0)
        if zoh_exact:
            # Bbar = delta * phi1(delta A) * B: d/ddelta = exp(z) B, d/dA = delta^2 phi1'(z) B
            Bx = Bd[:, None, :]
            gdelta = gdelta + (gbbar * a * Bx).sum(axis=2)
            gA = gA + (gbbar * (dd[:, :, None] ** 2) * phi1_prime(z, a, p1) * Bx).sum(axis=0)
            gB = (gbbar * dd[:, :, None] * p1).sum(axis=1)
        else:
            gdelta = gdelta + (gbbar * Bd[:, None, :]).sum(axis=2)
            gB = (gbbar * dd[:, :, None]).sum(axis=1)
        return gv, gdelta, gA, gB, gC, gD

    return T.record(y, (v, delta, A, B, C, D), _bw, "selective_scan")


# ---------------------------------------------------------------- block

class SelectiveSsmBlock:
    """Mamba-style residual block over a sequence of ``d``-vectors.

    expand -> (value, gate); value -> causal conv -> SiLU -> selective scan;
    gate with SiLU(gate); project back to ``d``; add the input.
    """

    def __init__(self, d_model: int, state_dim: int = 16, expand: int = 2, conv_width: int = 4,
                 zoh_exact: bool = True, rng: np.random.Generator | None = None,
                 name: str = "ssm", dt_range: tuple[float, float] = (1e-3, 1e-1)):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.d_model = d_model
        self.d_inner = di = expand * d_model
        self.state_dim = N = state_dim
        self.conv_width = conv_width
        self.zoh_exact = zoh_exact
        self.name = name

        def uniform(shape, fan_in, label):
            bound = 1.0 / math.sqrt(fan_in)
            return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True,
                          name=f"{name}.{label}")

        self.in_proj = uniform((2 * di, d_model), d_model, "in_proj")
        self.conv_w = uniform((di, conv_width), conv_width, "conv_w")
        self.conv_b = uniform((di,), conv_width, "conv_b")
        self.dt_w = uniform((di, di), di, "dt_w")
        # softplus(dt_b) log-uniform in dt_range
        dt = np.exp(rng.uniform(math.log(dt_range[0]), math.log(dt_range[1]), size=di))
        self.dt_b = Tensor(dt + np.log(-np.expm1(-dt)), requires_grad=True, name=f"{name}.dt_b")
        self.B_proj = uniform((N, di), di, "B_proj")
        self.C_proj = uniform((N, di), di, "C_proj")
        # A = -exp(a_log) spans -1 ... -N in every channel
        self.a_log = Tensor(np.log(np.tile(np.arange(1, N + 1, dtype=np.float64), (di, 1))),
                            requires_grad=True, name=f"{name}.a_log")
        self.D = Tensor(np.ones(di), requires_grad=True, name=f"{name}.D")
        self.out_proj = uniform((d_model, di), di, "out_proj")

    def scan_input(self, x: Tensor) -> tuple[Tensor, Tensor]:
        """``(v, gate)``: the scan input after conv + SiLU, and the raw gate branch."""
        di = self.d_inner
        u = T.linear(x, self.in_proj)
        value, gate = u[:, :di], u[:, di:]
        return T.silu(causal_depthwise_conv(value, self.conv_w, self.conv_b)), gate

    def parameters(self) -> list[Tensor]:
        return [self.in_proj, self.conv_w, self.conv_b, self.dt_w, self.dt_b, self.B_proj,
                self.C_proj, self.a_log, self.D, self.out_proj]

    def zero_(self) -> None:
        """Zero every projection and the skip term, making the block an identity map."""
        for p in (self.in_proj, self.conv_w, self.conv_b, self.dt_w, self.B_proj, self.C_proj,
                  self.D, self.out_proj):
            p.data[...] = 0.0

    def A(self) -> Tensor:
        return -T.exp(self.a_log)

    def __call__(self, x: Tensor, frozen: tuple | None = None) -> Tensor:
        return selective_scan(self, x, frozen=frozen)


def selective_scan(block: SelectiveSsmBlock, x: Tensor, frozen: tuple | None = None) -> Tensor:
    """Run ``block`` over ``x`` of shape (L, d).

    ``frozen=(delta, B, C)`` replaces the input-dependent projections with fixed
    per-channel steps (di,) and fixed state maps (N,), giving a time-invariant
    scan inside the same block.
    """
    if x.ndim != 2 or x.shape[1] != block.d_model:
        raise DimensionError(f"block expects (L, {block.d_model}), got {x.shape}")
    L = x.shape[0]
    if L < 1:
        raise ContractError("selective scan needs a sequence of length >= 1")
    v, gate = block.scan_input(x)
    if frozen is None:
        delta = T.softplus(T.linear(v, block.dt_w, block.dt_b))
        B = T.linear(v, block.B_proj)
        C = T.linear(v, block.C_proj)
    else:
        fd, fB, fC = (np.asarray(f, dtype=np.float64) for f in frozen)
        delta = Tensor(np.tile(fd, (L, 1)))
        B = Tensor(np.tile(fB, (L, 1)))
        C = Tensor(np.tile(fC, (L, 1)))
    y = selective_recurrence(v, delta, block.A(), B, C, block.D, zoh_exact=block.zoh_exact)
    out = T.linear(y * T.silu(gate), block.out_proj)
    return x + out
