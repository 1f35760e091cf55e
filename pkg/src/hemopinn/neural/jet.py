"""Truncated multivariate Taylor arithmetic (jets) on torch tensors.

A jet of total degree ``d`` in ``n`` variables stores the Taylor coefficients
``c_alpha`` of every monomial with ``|alpha| <= d``; the partial derivative
``d^alpha f`` equals ``alpha! * c_alpha``.  Coefficients live on axis 0 of the
tensor, so a batch of width-``F`` activations is a ``(ncoef, B, F)`` tensor.
Parameter gradients come from torch autograd recording these operations.
"""

from __future__ import annotations

import itertools
import math
from functools import lru_cache

import torch


def _multi_indices(nvars: int, degree: int) -> list[tuple[int, ...]]:
    out = []
    for deg in range(degree + 1):
        level = [a for a in itertools.product(range(deg + 1), repeat=nvars) if sum(a) == deg]
        out.extend(sorted(level, reverse=True))
    return out


class JetBasis:
    """Coefficient layout and product tables for (nvars, degree)."""

    def __init__(self, nvars: int, degree: int):
        if degree < 0 or nvars < 1:
            raise ValueError("need nvars >= 1 and degree >= 0")
        self.nvars = nvars
        self.degree = degree
        self.multi = _multi_indices(nvars, degree)
        self.index = {a: k for k, a in enumerate(self.multi)}
        self.ncoef = len(self.multi)
        self.order = torch.tensor([sum(a) for a in self.multi])
        self.factorial = torch.tensor(
            [math.prod(math.factorial(i) for i in a) for a in self.multi], dtype=torch.float64
        )
        self._pairs: dict = {}

    def pairs(self, low_a: int, low_b: int):
        """Index tables (I, J, K) with alpha_I + alpha_J = alpha_K, truncated.

        Only coefficients of degree >= low_a (resp. low_b) take part.
        """
        key = (low_a, low_b)
        if key not in self._pairs:
            I, J, K = [], [], []
            for i, a in enumerate(self.multi):
                if sum(a) < low_a:
                    continue
                for j, b in enumerate(self.multi):
                    if sum(b) < low_b or sum(a) + sum(b) > self.degree:
                        continue
                    I.append(i)
                    J.append(j)
                    K.append(self.index[tuple(x + y for x, y in zip(a, b))])
            self._pairs[key] = (torch.tensor(I, dtype=torch.long), torch.tensor(J, dtype=torch.long),
                                torch.tensor(K, dtype=torch.long))
        return self._pairs[key]

    @property
    def offsets(self) -> list[int]:
        """offsets[k] = index of the first coefficient of degree k."""
        out = [0]
        for k in range(1, self.degree + 2):
            out.append(int((self.order < k).sum()))
        return out

    def _sq_tables(self):
        if "sq" not in self._pairs:
            off2 = self.offsets[2]
            I, J, K, W = [], [], [], []
            for i, a in enumerate(self.multi):
                for j, b in enumerate(self.multi):
                    if j < i or sum(a) < 1 or sum(b) < 1 or sum(a) + sum(b) > self.degree:
                        continue
                    I.append(i - 1)
                    J.append(j - 1)
                    K.append(self.index[tuple(x + y for x, y in zip(a, b))] - off2)
                    W.append(1.0 if i == j else 2.0)
            W = torch.tensor(W, dtype=torch.float64)
            diag = W == 1.0
            t = lambda v, m: torch.tensor(v, dtype=torch.long)[m]
            self._pairs["sq"] = (t(I, diag), t(J, diag), t(K, diag), t(I, ~diag), t(J, ~diag), t(K, ~diag))
        return self._pairs["sq"]

    def square_tail(self, delta: torch.Tensor) -> torch.Tensor:
        """Degree >= 2 coefficients of ``delta**2``; ``delta`` excludes the constant."""
        Id, Jd, Kd, Io, Jo, Ko = self._sq_tables()
        n = self.ncoef - self.offsets[2]
        shape = (n,) + delta.shape[1:]
        out = delta.new_zeros(shape).index_add(0, Ko, delta[Io] * delta[Jo])
        out = out * 2.0
        return out.index_add(0, Kd, delta[Id] * delta[Jd])

    def cube_top(self, delta: torch.Tensor, sq: torch.Tensor) -> torch.Tensor:
        """Degree 3 coefficients of ``delta**3`` from first-degree part and ``sq``."""
        if "cube" not in self._pairs:
            off2, off3 = self.offsets[2], self.offsets[3]
            I, J, K = [], [], []
            for i in range(off2, off3):
                for j in range(1, off2):
                    a = tuple(x + y for x, y in zip(self.multi[i], self.multi[j]))
                    I.append(i - off2)
                    J.append(j - 1)
                    K.append(self.index[a] - off3)
            self._pairs["cube"] = tuple(torch.tensor(v, dtype=torch.long) for v in (I, J, K))
        I, J, K = self._pairs["cube"]
        n = self.ncoef - self.offsets[3]
        prod = sq[I] * delta[J]
        return prod.new_zeros((n,) + prod.shape[1:]).index_add(0, K, prod)

    def unit(self, var: int) -> int:
        a = [0] * self.nvars
        a[var] = 1
        return self.index[tuple(a)]

    def variables(self, values: torch.Tensor) -> "Jet":
        """Seed jets for a batch of points ``values`` of shape (B, nvars).

        Returns one jet of shape (ncoef, B, nvars).
        """
        B, n = values.shape
        if n != self.nvars:
            raise ValueError(f"expected {self.nvars} input columns, got {n}")
        c = values.new_zeros((self.ncoef, B, n))
        c[0] = values
        if self.degree >= 1:
            for v in range(n):
                c[self.unit(v), :, v] = 1.0
        return Jet(self, c, 0)


@lru_cache(maxsize=None)
def basis(nvars: int, degree: int) -> JetBasis:
    return JetBasis(nvars, degree)


class Jet:
    __slots__ = ("basis", "c", "low")

    def __init__(self, basis: JetBasis, c: torch.Tensor, low: int = 0):
        self.basis = basis
        self.c = c
        self.low = low  # every coefficient of degree < low is zero

    # -- access -----------------------------------------------------------
    @property
    def value(self) -> torch.Tensor:
        return self.c[0]

    def coef(self, alpha) -> torch.Tensor:
        return self.c[self.basis.index[tuple(alpha)]]

    def d(self, *counts: int) -> torch.Tensor:
        """Partial derivative with multi-index ``counts`` (one entry per variable)."""
        alpha = tuple(counts) + (0,) * (self.basis.nvars - len(counts))
        k = self.basis.index.get(alpha)
        if k is None:
            raise ValueError(f"derivative {alpha} exceeds jet degree {self.basis.degree}")
        return self.c[k] * self.basis.factorial[k]

    @property
    def degree(self) -> int:
        return self.basis.degree

    def diff(self, var: int) -> "Jet":
        """Jet of the partial derivative in ``var``, one degree lower."""
        B = self.basis
        if B.degree < 1:
            raise ValueError("cannot differentiate a degree-0 jet")
        lower = basis(B.nvars, B.degree - 1)
        src, fac = [], []
        for a in lower.multi:
            b = list(a)
            b[var] += 1
            src.append(B.index[tuple(b)])
            fac.append(float(b[var]))
        shape = (-1,) + (1,) * (self.c.ndim - 1)
        c = self.c[torch.tensor(src)] * torch.tensor(fac, dtype=self.c.dtype).reshape(shape)
        return Jet(lower, c, max(0, self.low - 1))

    def truncate(self, degree: int) -> "Jet":
        if degree > self.basis.degree:
            raise ValueError("cannot raise the degree of a jet")
        lower = basis(self.basis.nvars, degree)
        return Jet(lower, self.c[: lower.ncoef], self.low)

    def __getitem__(self, idx) -> "Jet":
        if not isinstance(idx, tuple):
            idx = (idx,)
        return Jet(self.basis, self.c[(slice(None),) + idx], self.low)

    # -- arithmetic -------------------------------------------------------
    def __add__(self, other):
        if isinstance(other, Jet):
            return Jet(self.basis, self.c + other.c, min(self.low, other.low))
        c = torch.cat([(self.c[0] + other).unsqueeze(0), self.c[1:]], 0)
        return Jet(self.basis, c, 0)

    __radd__ = __add__

    def __neg__(self):
        return Jet(self.basis, -self.c, self.low)

    def __sub__(self, other):
        return self + (-other)

    def __rsub__(self, other):
        return (-self) + other

    def __mul__(self, other):
        if isinstance(other, Jet):
            return mul(self, other)
        other = torch.as_tensor(other, dtype=self.c.dtype)
        return Jet(self.basis, self.c * other, self.low)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Jet):
            raise TypeError("jet division is not supported")
        return self * (1.0 / other)

    def nilpotent(self) -> "Jet":
        """The jet minus its constant term."""
        c = torch.cat([torch.zeros_like(self.c[:1]), self.c[1:]], 0)
        return Jet(self.basis, c, max(1, self.low))


def mul(a: Jet, b: Jet) -> Jet:
    """Truncated Cauchy product."""
    B = a.basis
    low = a.low + b.low
    if low > B.degree:
        return Jet(B, torch.zeros_like(a.c * b.c[:1]), B.degree + 1)
    I, J, K = B.pairs(a.low, b.low)
    prod = a.c[I] * b.c[J]
    shape = (B.ncoef,) + prod.shape[1:]
    out = prod.new_zeros(shape).index_add(0, K, prod)
    return Jet(B, out, low)


def compose(x: Jet, derivs: list[torch.Tensor]) -> Jet:
    """f(x) from f, f', f'', ... evaluated at the constant term of ``x``.

    Works degree block by degree block: powers of the nilpotent part only
    reach coefficients of degree >= their exponent.
    """
    B = x.basis
    d = B.degree
    out = [derivs[0].unsqueeze(0)]
    if d == 0:
        return Jet(B, out[0], 0)
    off = B.offsets
    delta = x.c[1:]  # coefficients of degree >= 1, re-indexed from 1
    acc = derivs[1] * delta
    if d >= 2:
        sq = B.square_tail(delta)  # degree >= 2 part of delta**2
        acc = acc + torch.cat([torch.zeros_like(acc[: off[2] - 1]), sq * (derivs[2] / 2.0)], 0)
        if d >= 3:
            cube = B.cube_top(delta, sq)  # degree 3 part of delta**3
            acc = acc + torch.cat([torch.zeros_like(acc[: off[3] - 1]), cube * (derivs[3] / 6.0)], 0)
    return Jet(B, torch.cat(out + [acc], 0), 0)


def linear(x: Jet, W: torch.Tensor, b: torch.Tensor | None = None) -> Jet:
    """``x @ W.T + b`` applied coefficient-wise (bias only on the value)."""
    c = x.c @ W.T
    if b is not None:
        c = torch.cat([(c[0] + b).unsqueeze(0), c[1:]], 0)
        return Jet(x.basis, c, 0)
    return Jet(x.basis, c, x.low)


def _sigmoid_parts(a):
    s = torch.sigmoid(a)
    return s, s * (1 - s)


def swish_jet(x: Jet) -> Jet:
    """Jet of ``x * sigmoid(x)``."""
    a = x.value
    s, s1 = _sigmoid_parts(a)
    d = x.basis.degree
    derivs = [a * s]
    if d >= 1:
        derivs.append(s * (1 + a * (1 - s)))
    if d >= 2:
        derivs.append(s1 * (2 + a * (1 - 2 * s)))
    if d >= 3:
        derivs.append(s1 * (a * (1 - 6 * s + 6 * s * s) + 3 - 6 * s))
    if d >= 4:
        raise NotImplementedError("swish jets are implemented up to degree 3")
    return compose(x, derivs)


def sigmoid_jet(x: Jet) -> Jet:
    a = x.value
    s, s1 = _sigmoid_parts(a)
    d = x.basis.degree
    derivs = [s, s1, s1 * (1 - 2 * s), s1 * (1 - 2 * s) ** 2 - 2 * s1 * s1][: d + 1]
    if d >= 4:
        raise NotImplementedError("sigmoid jets are implemented up to degree 3")
    return compose(x, derivs)


def stack(jets: list[Jet], dim: int = -1) -> Jet:
    B = jets[0].basis
    return Jet(B, torch.stack([j.c for j in jets], dim=dim), min(j.low for j in jets))
