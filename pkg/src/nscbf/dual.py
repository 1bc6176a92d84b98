"""Forward-mode dual numbers over numpy arrays.

A ``Dual`` carries a value and a tangent of the same shape. Values may
themselves be ``Dual`` instances, which gives higher-order (hyper-dual)
derivatives for free. All arithmetic is vectorized, so a single sweep
differentiates a whole batch of states at once.

The ``acos_sq`` family implements arccos(c)^2 and its derivative chain in a
form that stays finite and smooth at c = 1, where arccos itself has a
square-root singularity. Series coefficients were generated symbolically.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "Dual",
    "value_of",
    "sin", "cos", "tan", "tanh", "exp", "log", "sqrt", "arccos",
    "softplus", "sigmoid", "acos_sq",
    "dstack", "dsum", "where",
    "jvp", "grad", "jacobian", "lie_derivative",
]


class Dual:
    """Value/tangent pair obeying the chain rule under the ops below."""

    __slots__ = ("val", "dot")

    # make ndarray op Dual defer to our reflected operators instead of
    # building an object array
    __array_ufunc__ = None

    def __init__(self, val, dot):
        self.val = val
        self.dot = dot

    # -- arithmetic -------------------------------------------------------
    def __add__(self, other):
        if isinstance(other, Dual):
            return Dual(self.val + other.val, self.dot + other.dot)
        return Dual(self.val + other, self.dot)

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Dual):
            return Dual(self.val - other.val, self.dot - other.dot)
        return Dual(self.val - other, self.dot)

    def __rsub__(self, other):
        return Dual(other - self.val, -self.dot)

    def __mul__(self, other):
        if isinstance(other, Dual):
            return Dual(self.val * other.val,
                        self.dot * other.val + self.val * other.dot)
        return Dual(self.val * other, self.dot * other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Dual):
            inv = 1.0 / other.val
            return Dual(self.val * inv,
                        (self.dot - self.val * inv * other.dot) * inv)
        return Dual(self.val / other, self.dot / other)

    def __rtruediv__(self, other):
        inv = 1.0 / self.val
        v = other * inv
        return Dual(v, -v * inv * self.dot)

    def __pow__(self, p):
        # constant exponent only
        v = self.val ** p
        return Dual(v, p * self.val ** (p - 1) * self.dot)

    def __neg__(self):
        return Dual(-self.val, -self.dot)

    def __getitem__(self, idx):
        return Dual(self.val[idx], self.dot[idx])

    def __repr__(self):
        return f"Dual({self.val!r}, {self.dot!r})"


def value_of(x):
    """Strip all Dual wrappers, returning the underlying primal value."""
    while isinstance(x, Dual):
        x = x.val
    return x


# -- elementary functions (dispatch on Dual, recurse for nesting) --------

def sin(x):
    if isinstance(x, Dual):
        return Dual(sin(x.val), cos(x.val) * x.dot)
    return np.sin(x)


def cos(x):
    if isinstance(x, Dual):
        return Dual(cos(x.val), -sin(x.val) * x.dot)
    return np.cos(x)


def tan(x):
    if isinstance(x, Dual):
        t = tan(x.val)
        return Dual(t, (1.0 + t * t) * x.dot)
    return np.tan(x)


def tanh(x):
    if isinstance(x, Dual):
        t = tanh(x.val)
        return Dual(t, (1.0 - t * t) * x.dot)
    return np.tanh(x)


def exp(x):
    if isinstance(x, Dual):
        e = exp(x.val)
        return Dual(e, e * x.dot)
    return np.exp(x)


def log(x):
    if isinstance(x, Dual):
        return Dual(log(x.val), x.dot / x.val)
    return np.log(x)


def sqrt(x):
    if isinstance(x, Dual):
        s = sqrt(x.val)
        return Dual(s, 0.5 / s * x.dot)
    return np.sqrt(x)


def arccos(x):
    # raw arccos: singular derivative at |x| = 1; prefer acos_sq when the
    # square is what is actually needed.
    if isinstance(x, Dual):
        v = arccos(x.val)
        return Dual(v, -x.dot / sqrt(1.0 - x.val * x.val))
    return np.arccos(np.clip(x, -1.0, 1.0))


def softplus(x):
    if isinstance(x, Dual):
        return Dual(softplus(x.val), sigmoid(x.val) * x.dot)
    return np.logaddexp(0.0, x)


def sigmoid(x):
    if isinstance(x, Dual):
        s = sigmoid(x.val)
        return Dual(s, s * (1.0 - s) * x.dot)
    # numerically stable for large |x|
    return np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                    np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))


# -- smooth arccos(c)^2 chain --------------------------------------------
# With u = arccos(c), the functions below are all even, analytic functions
# of u, so each is smooth in c on (-1, 1] including the endpoint c = 1.
#   acos_sq(c)  = u^2            d/dc acos_sq  = -2 * _q
#   _q(c)       = u / sin(u)     d/dc _q       = -_r
#   _r(c)       = (sin u - u cos u)/sin^3 u    d/dc _r = _s
#   _s(c)       = d_r/du * (-1/sin u)          d/dc _s = _t

_SERIES_CUT = 1e-2  # switch to series for u below this


def _u_of(c):
    return np.arccos(np.clip(c, -1.0, 1.0))


def _q_plain(c):
    u = _u_of(c)
    u2 = u * u
    series = 1.0 + u2 / 6.0 + 7.0 * u2 * u2 / 360.0 + 31.0 * u2 ** 3 / 15120.0
    with np.errstate(divide="ignore", invalid="ignore"):
        direct = u / np.sin(u)
    return np.where(u < _SERIES_CUT, series, direct)


def _r_plain(c):
    u = _u_of(c)
    u2 = u * u
    series = (1.0 / 3.0 + 2.0 * u2 / 15.0 + 2.0 * u2 * u2 / 63.0
              + 4.0 * u2 ** 3 / 675.0)
    su = np.sin(u)
    with np.errstate(divide="ignore", invalid="ignore"):
        direct = (su - u * np.cos(u)) / su ** 3
    return np.where(u < _SERIES_CUT, series, direct)


def _s_plain(c):
    u = _u_of(c)
    u2 = u * u
    series = -(4.0 / 15.0 + 6.0 * u2 / 35.0 + 13.0 * u2 * u2 / 210.0
               + 1153.0 * u2 ** 3 / 69300.0)
    su = np.sin(u)
    cu = np.cos(u)
    with np.errstate(divide="ignore", invalid="ignore"):
        # d/du[(su - u cu)/su^3] * (-1/su)
        dr_du = (u * su ** 2 - 3.0 * cu * (su - u * cu)) / su ** 4
        direct = -dr_du / su
    return np.where(u < _SERIES_CUT, series, direct)


def _t_plain(c):
    u = _u_of(c)
    u2 = u * u
    series = 12.0 / 35.0 + 32.0 * u2 / 105.0 + 512.0 * u2 * u2 / 3465.0
    h = 1e-6
    cc = np.clip(c, -1.0 + 1e-9, 1.0 - 1e-9)
    direct = (_s_plain(cc + h) - _s_plain(cc - h)) / (2.0 * h)
    return np.where(u < _SERIES_CUT, series, direct)


def acos_sq(c):
    """arccos(c)^2, smooth (with smooth derivatives) up to c = 1."""
    if isinstance(c, Dual):
        return Dual(acos_sq(c.val), -2.0 * _q(c.val) * c.dot)
    return _u_of(c) ** 2


def _q(c):
    if isinstance(c, Dual):
        return Dual(_q(c.val), -_r(c.val) * c.dot)
    return _q_plain(c)


def _r(c):
    if isinstance(c, Dual):
        return Dual(_r(c.val), _s(c.val) * c.dot)
    return _r_plain(c)


def _s(c):
    if isinstance(c, Dual):
        return Dual(_s(c.val), _t_plain(value_of(c.val)) * c.dot)
    return _s_plain(c)


# -- structural helpers ---------------------------------------------------

def dstack(parts, axis=-1):
    """np.stack that tolerates a mix of Dual and plain entries."""
    if any(isinstance(p, Dual) for p in parts):
        vals, dots = [], []
        for p in parts:
            if isinstance(p, Dual):
                vals.append(p.val)
                dots.append(p.dot)
            else:
                vals.append(p)
                dots.append(np.zeros_like(value_of(p)))
        return Dual(dstack(vals, axis), dstack(dots, axis))
    return np.stack(parts, axis=axis)


def dsum(x, axis=None):
    if isinstance(x, Dual):
        return Dual(dsum(x.val, axis), dsum(x.dot, axis))
    return np.sum(x, axis=axis)


def where(cond, a, b):
    if isinstance(a, Dual) or isinstance(b, Dual):
        ref = a.dot if isinstance(a, Dual) else b.dot
        zero = ref * 0.0
        av, ad = (a.val, a.dot) if isinstance(a, Dual) else (a, zero)
        bv, bd = (b.val, b.dot) if isinstance(b, Dual) else (b, zero)
        return Dual(where(cond, av, bv), where(cond, ad, bd))
    return np.where(cond, a, b)


# -- derivative sweeps ----------------------------------------------------

def jvp(fn, x, d):
    """(fn(x), directional derivative of fn at x along d)."""
    out = fn(Dual(x, d))
    return out.val, out.dot


def grad(fn, x):
    """Gradient of a batched scalar fn: x (B, n) -> values (B,).

    Runs n forward sweeps; works when x is itself a Dual (nesting).
    """
    n = value_of(x).shape[-1]
    cols = []
    for i in range(n):
        e = np.zeros_like(value_of(x))
        e[..., i] = 1.0
        cols.append(fn(Dual(x, e)).dot)
    return dstack(cols, axis=-1)


def jacobian(fn, x):
    """Jacobian of batched vector fn: x (B, n) -> out (B, k); result (B, k, n)."""
    n = value_of(x).shape[-1]
    cols = []
    for i in range(n):
        e = np.zeros_like(value_of(x))
        e[..., i] = 1.0
        cols.append(fn(Dual(x, e)).dot)
    return dstack(cols, axis=-1)


def lie_derivative(fn, f, x):
    """d/dt fn(x) along drift f: directional derivative of fn along f(x)."""
    out = fn(Dual(x, f(x)))
    return out.dot
