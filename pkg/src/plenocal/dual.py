"""Minimal forward-mode dual numbers over numpy arrays.

A :class:`Dual` carries a value array and the derivative of that value with
respect to ``P`` seed parameters, stored in a trailing axis of length ``P``.
Only the handful of operations needed by the projection model are provided.
"""

from __future__ import annotations

import numpy as np


class Dual:
    __slots__ = ("val", "der")
    __array_ufunc__ = None  # make ndarray <op> Dual defer to Dual

    def __init__(self, val, der):
        self.val = np.asarray(val, dtype=float)
        self.der = np.asarray(der, dtype=float)

    @classmethod
    def seed(cls, value, index, n):
        """Independent variable number ``index`` out of ``n``."""
        der = np.zeros(n)
        der[index] = 1.0
        return cls(value, der)

    @classmethod
    def constant(cls, value, n):
        value = np.asarray(value, dtype=float)
        return cls(value, np.zeros(value.shape + (n,)))

    def _lift(self, other):
        if isinstance(other, Dual):
            return other
        other = np.asarray(other, dtype=float)
        return Dual(other, np.zeros(other.shape + (self.der.shape[-1],)))

    def __add__(self, other):
        o = self._lift(other)
        return Dual(self.val + o.val, self.der + o.der)

    __radd__ = __add__

    def __sub__(self, other):
        o = self._lift(other)
        return Dual(self.val - o.val, self.der - o.der)

    def __rsub__(self, other):
        return self._lift(other) - self

    def __neg__(self):
        return Dual(-self.val, -self.der)

    def __mul__(self, other):
        o = self._lift(other)
        return Dual(
            self.val * o.val,
            self.der * o.val[..., None] + o.der * self.val[..., None],
        )

    __rmul__ = __mul__

    def __truediv__(self, other):
        o = self._lift(other)
        inv = 1.0 / o.val
        val = self.val * inv
        return Dual(val, (self.der - o.der * val[..., None]) * inv[..., None])

    def __rtruediv__(self, other):
        return self._lift(other) / self

    def __pow__(self, k):
        if isinstance(k, Dual):
            raise TypeError("only constant exponents are supported")
        return Dual(self.val**k, self.der * (k * self.val ** (k - 1))[..., None])

    def __repr__(self):
        return f"Dual(val={self.val!r}, der.shape={self.der.shape})"


def value(x):
    return x.val if isinstance(x, Dual) else np.asarray(x, dtype=float)


def sin(x):
    if isinstance(x, Dual):
        return Dual(np.sin(x.val), x.der * np.cos(x.val)[..., None])
    return np.sin(x)


def cos(x):
    if isinstance(x, Dual):
        return Dual(np.cos(x.val), -x.der * np.sin(x.val)[..., None])
    return np.cos(x)


def sqrt(x):
    if isinstance(x, Dual):
        r = np.sqrt(x.val)
        return Dual(r, x.der * (0.5 / r)[..., None])
    return np.sqrt(x)
