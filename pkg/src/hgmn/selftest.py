"""Kernel equivalence checks run by ``hgmn selftest``."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .ssm import (LtiParams, SelectiveSsmBlock, lti_conv_apply, lti_conv_kernel, lti_scan,
                  phi1, selective_scan, zoh_discretize)
from .tensor import Tensor


@dataclass
class Check:
    name: str
    error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return bool(self.error <= self.tolerance)


def _random_stable(rng: np.random.Generator, n: int) -> LtiParams:
    return LtiParams(A=-rng.uniform(0.05, 2.0, n), B=rng.normal(size=n), C=rng.normal(size=n),
                     delta=float(math.exp(rng.uniform(math.log(1e-3), 0.0))))


def scan_duality(trials: int = 100, seed: int = 0) -> Check:
    """Recurrence against the unrolled convolution kernel."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trials):
        p = _random_stable(rng, int(rng.integers(1, 9)))
        L = int(rng.integers(1, 257))
        x = rng.normal(size=L)
        d = zoh_discretize(p)
        rec = lti_scan(d, p.C, x)
        conv = lti_conv_apply(lti_conv_kernel(d, p.C, L), x)
        worst = max(worst, float(np.max(np.abs(rec - conv))))
    return Check("scan duality (recurrence vs convolution)", worst, 1e-9)


def zoh_scalar() -> Check:
    d = zoh_discretize(LtiParams(A=[-1.0], B=[1.0], C=[1.0], delta=math.log(2.0)))
    err = max(abs(d.A_bar[0] - 0.5), abs(d.B_bar[0] - 0.5))
    return Check("zoh scalar A=-1, step ln 2", float(err), 1e-12)


def zoh_dense_vs_diagonal(trials: int = 20, seed: int = 1) -> Check:
    """Closed-form diagonal path against the augmented matrix exponential."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trials):
        p = _random_stable(rng, int(rng.integers(1, 9)))
        diag = zoh_discretize(p)
        dense = zoh_discretize(LtiParams(np.diag(p.A), p.B, p.C, p.delta))
        worst = max(worst, float(np.max(np.abs(np.diag(dense.A_bar) - diag.A_bar))),
                    float(np.max(np.abs(dense.B_bar - diag.B_bar))))
    return Check("zoh diagonal vs dense", worst, 1e-12)


def phi1_limit() -> Check:
    z = np.array([1e-13, -1e-13, 1e-9, -1e-7, 1e-5])
    series = 1 + z / 2 + z * z / 6 + z ** 3 / 24
    return Check("zoh small-argument limit", float(np.max(np.abs(phi1(z) - series))), 1e-10)


def frozen_reduction(length: int = 64, seed: int = 2) -> Check:
    """A selective block with frozen step/B/C equals per-channel LTI scans."""
    rng = np.random.default_rng(seed)
    block = SelectiveSsmBlock(4, state_dim=6, rng=rng)
    x = Tensor(rng.normal(size=(length, 4)))
    di, N = block.d_inner, block.state_dim
    fd = rng.uniform(1e-3, 1.0, di)
    fB, fC = rng.normal(size=N), rng.normal(size=N)
    got = selective_scan(block, x, frozen=(fd, fB, fC)).data

    v, gate = block.scan_input(x)
    A = block.A().data
    y = np.empty((length, di))
    for c in range(di):
        d = zoh_discretize(LtiParams(A[c], fB, fC, fd[c]))
        y[:, c] = lti_scan(d, fC, v.data[:, c]) + block.D.data[c] * v.data[:, c]
    want = x.data + T.linear(Tensor(y) * T.silu(gate), block.out_proj).data
    return Check("selective scan frozen-projection reduction", float(np.max(np.abs(got - want))),
                 1e-10)


def run_all() -> list[Check]:
    return [scan_duality(), zoh_scalar(), zoh_dense_vs_diagonal(), phi1_limit(), frozen_reduction()]
