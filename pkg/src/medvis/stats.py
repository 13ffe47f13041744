"""Two-tailed paired t-test with a self-contained Student-t CDF."""

from __future__ import annotations

import math
from dataclasses import dataclass

_FPMIN = 1e-300
_EPS = 1e-16
_MAX_ITER = 500


def _betacf(a: float, b: float, x: float) -> float:
    """Continued fraction for the incomplete beta function (modified Lentz)."""
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    d = 1.0 / (d if abs(d) > _FPMIN else _FPMIN)
    h = d
    for m in range(1, _MAX_ITER + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > _FPMIN else _FPMIN)
        c = 1.0 + aa / c
        c = c if abs(c) > _FPMIN else _FPMIN
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > _FPMIN else _FPMIN)
        c = 1.0 + aa / c
        c = c if abs(c) > _FPMIN else _FPMIN
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < _EPS:
            return h
    raise ArithmeticError(f"incomplete beta continued fraction did not converge (a={a}, b={b}, x={x})")


def betainc(a: float, b: float, x: float) -> float:
    """Regularized incomplete beta I_x(a, b)."""
    if not 0.0 <= x <= 1.0:
        raise ValueError(f"x must lie in [0, 1], got {x}")
    if x in (0.0, 1.0):
        return x
    log_front = (
        math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
        + a * math.log(x) + b * math.log1p(-x)
    )
    front = math.exp(log_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def t_sf_two_sided(t: float, dof: float) -> float:
    """P(|T| >= |t|) for Student's t with ``dof`` degrees of freedom."""
    if math.isinf(t):
        return 0.0
    return betainc(dof / 2.0, 0.5, dof / (dof + t * t))


def t_cdf(t: float, dof: float) -> float:
    tail = 0.5 * t_sf_two_sided(t, dof)
    return 1.0 - tail if t >= 0 else tail


@dataclass(frozen=True)
class PairedTTest:
    t: float
    p: float
    n: int
    mean_diff: float
    degenerate: bool = False

    def to_dict(self) -> dict:
        return {"t": self.t, "p": self.p, "n": self.n, "mean_diff": self.mean_diff,
                "degenerate": self.degenerate}


def paired_t_test(a, b) -> PairedTTest:
    """Two-tailed paired t-test on ``a − b``.

    All-zero differences give t = 0, p = 1. Constant non-zero differences have
    zero spread; that case reports p = 0 with ``degenerate=True``.
    """
    a, b = [float(x) for x in a], [float(x) for x in b]
    if len(a) != len(b):
        raise ValueError(f"paired samples differ in length: {len(a)} vs {len(b)}")
    n = len(a)
    if n < 2:
        raise ValueError("paired t-test needs n >= 2")
    d = [x - y for x, y in zip(a, b)]
    mean = math.fsum(d) / n
    var = math.fsum((x - mean) ** 2 for x in d) / (n - 1)
    if all(x == 0.0 for x in d):
        return PairedTTest(0.0, 1.0, n, 0.0)
    if var == 0.0:
        return PairedTTest(math.copysign(math.inf, mean), 0.0, n, mean, degenerate=True)
    t = mean / math.sqrt(var / n)
    return PairedTTest(t, t_sf_two_sided(t, n - 1), n, mean)
