"""Gamma travel delays: sampling, conjugate-form posteriors and MAP estimates.

Posteriors over the gamma shape ``a`` and scale ``b`` have the form

    P(a, b) ∝ p^(a-1) exp(-q/b) / (Γ(a)^r b^(a s))

and are tracked through the sufficient statistics ``(ln p, q, r, s)``.
The MAP point solves ``f(b) = (ln p - s ln b) - r ψ(q / (b s)) = 0`` and then
``a = q / (b s)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

EULER_GAMMA = 0.57721566490153286061


class DomainError(ValueError):
    pass


class NonPositiveObservation(ValueError):
    pass


class NoConvergence(RuntimeError):
    pass


# ---------------------------------------------------------------- special functions

def digamma(x: float) -> float:
    """ψ(x) for x > 0: upward recurrence to x >= 6, then the asymptotic series."""
    if not x > 0:
        raise DomainError(f"digamma requires x > 0, got {x}")
    acc = 0.0
    while x < 6.0:
        acc -= 1.0 / x
        x += 1.0
    inv = 1.0 / x
    inv2 = inv * inv
    series = inv2 * (
        1.0 / 12
        - inv2 * (1.0 / 120
        - inv2 * (1.0 / 252
        - inv2 * (1.0 / 240
        - inv2 * (1.0 / 132
        - inv2 * (691.0 / 32760
        - inv2 * (1.0 / 12)))))))
    return acc + math.log(x) - 0.5 * inv - series


def trigamma(x: float) -> float:
    """ψ'(x) for x > 0, same recurrence/asymptotic scheme as :func:`digamma`."""
    if not x > 0:
        raise DomainError(f"trigamma requires x > 0, got {x}")
    acc = 0.0
    while x < 6.0:
        acc += 1.0 / (x * x)
        x += 1.0
    inv = 1.0 / x
    inv2 = inv * inv
    series = inv * inv2 * (
        1.0 / 6
        - inv2 * (1.0 / 30
        - inv2 * (1.0 / 42
        - inv2 * (1.0 / 30
        - inv2 * (5.0 / 66
        - inv2 * (691.0 / 2730
        - inv2 * (7.0 / 6)))))))
    return acc + inv + 0.5 * inv2 + series


def inverse_digamma(y: float, tol: float = 1e-13, max_iter: int = 100) -> float:
    """x > 0 with ψ(x) = y, by Newton iteration."""
    if y >= -2.22:
        x = math.exp(y) + 0.5
    else:
        x = -1.0 / (y + EULER_GAMMA)
    for _ in range(max_iter):
        err = digamma(x) - y
        if abs(err) <= tol * max(1.0, abs(y)):
            return x
        step = err / trigamma(x)
        nx = x - step
        while nx <= 0:  # keep iterates in the domain
            step *= 0.5
            nx = x - step
        x = nx
    if abs(digamma(x) - y) <= 1e-10:
        return x
    raise NoConvergence(f"inverse_digamma({y}) did not converge")


# ---------------------------------------------------------------- parameters

@dataclass(frozen=True)
class GammaParams:
    shape: float
    scale: float

    def __post_init__(self):
        if not (self.shape > 0 and self.scale > 0):
            raise ValueError(f"gamma parameters must be positive: {self}")

    @property
    def mean(self) -> float:
        return self.shape * self.scale

    @property
    def variance(self) -> float:
        return self.shape * self.scale * self.scale


def moments_to_params(mean: float, variance: float, *, literal: bool = False) -> GammaParams:
    """Gamma parameters for a delay with the given mean and variance.

    The default matches moments (``shape = m²/v``). ``literal=True`` gives
    ``shape = m²·v`` with the same scale ``v/m``, which does *not* preserve the
    mean; it exists only to reproduce that parameterisation for comparison.
    """
    if not (mean > 0 and variance > 0):
        raise ValueError("mean and variance must be positive")
    shape = mean * mean * variance if literal else mean * mean / variance
    return GammaParams(shape, variance / mean)


def sample_delay(params: GammaParams, rng: np.random.Generator) -> float:
    return float(rng.gamma(params.shape, params.scale))


# ---------------------------------------------------------------- posterior

@dataclass(frozen=True)
class PriorConfig:
    a_prior: float = 1.0
    b_prior: float = 0.2
    r: float = 0.1
    s: float = 0.1

    def __post_init__(self):
        if min(self.a_prior, self.b_prior, self.r, self.s) <= 0:
            raise ValueError(f"prior hyperparameters must be positive: {self}")

    @classmethod
    def parse(cls, text: str) -> "PriorConfig":
        a, b, r, s = (float(t) for t in text.split(","))
        return cls(a, b, r, s)


def prior_to_pq(prior: PriorConfig, *, literal: bool = False) -> tuple[float, float]:
    """``(ln p, q)`` for which the prior's mode is ``(a_prior, b_prior)``.

    Setting both partial derivatives of the log density to zero at the prior
    point gives ``ln p = r ψ(a_prior) + s ln b_prior``. ``literal=True`` flips
    the sign of the ``s ln b_prior`` term, a variant whose mode is not the
    prior point unless ``b_prior == 1``.
    """
    sign = -1.0 if literal else 1.0
    log_p = prior.r * digamma(prior.a_prior) + sign * prior.s * math.log(prior.b_prior)
    q = prior.a_prior * prior.b_prior * prior.s
    return log_p, q


@dataclass(frozen=True)
class PosteriorState:
    log_p: float
    q: float
    r: float
    s: float
    n_obs: int = 0

    def __post_init__(self):
        if not (self.q > 0 and self.r > 0 and self.s > 0 and self.n_obs >= 0):
            raise ValueError(f"invalid posterior state: {self}")

    @classmethod
    def from_prior(cls, prior: PriorConfig, *, literal: bool = False) -> "PosteriorState":
        log_p, q = prior_to_pq(prior, literal=literal)
        return cls(log_p, q, prior.r, prior.s, 0)

    def to_json(self) -> dict:
        return {"log_p": self.log_p, "q": self.q, "r": self.r, "s": self.s, "n_obs": self.n_obs}


def observe(state: PosteriorState, x: float) -> PosteriorState:
    if not x > 0:
        raise NonPositiveObservation(f"delay observation must be > 0, got {x}")
    return replace(
        state,
        log_p=state.log_p + math.log(x),
        q=state.q + x,
        r=state.r + 1,
        s=state.s + 1,
        n_obs=state.n_obs + 1,
    )


def observe_many(state: PosteriorState, xs) -> PosteriorState:
    xs = np.asarray(xs, dtype=float)
    if xs.size == 0:
        return state
    if np.any(xs <= 0):
        raise NonPositiveObservation("delay observations must be > 0")
    m = int(xs.size)
    return replace(
        state,
        log_p=state.log_p + float(np.log(xs).sum()),
        q=state.q + float(xs.sum()),
        r=state.r + m,
        s=state.s + m,
        n_obs=state.n_obs + m,
    )


def map_residual(state: PosteriorState, b: float) -> float:
    return (state.log_p - state.s * math.log(b)) - state.r * digamma(state.q / (b * state.s))


def _residual_slope(state: PosteriorState, b: float) -> float:
    a = state.q / (b * state.s)
    return -state.s / b + state.r * trigamma(a) * a / b


def map_estimate(
    state: PosteriorState,
    *,
    a_init: float = 1.0,
    b_init: float | None = None,
    tol: float = 1e-10,
    max_iter: int = 200,
) -> GammaParams:
    """MAP ``(a, b)`` of the posterior.

    Newton's method on ``f(b)`` from ``b0 = q / (s a_init)`` (or ``b_init``);
    bisection on a geometrically expanded bracket if Newton leaves the domain
    or stalls.
    """
    if state.r < state.s:
        return _map_two_root(state, tol)
    b = b_init if b_init is not None else state.q / (state.s * a_init)
    f = map_residual(state, b)
    for _ in range(max_iter):
        if abs(f) <= tol:
            b = _polish(state, b, f)
            return GammaParams(state.q / (b * state.s), b)
        slope = _residual_slope(state, b)
        if not math.isfinite(slope) or slope == 0:
            break
        nb = b - f / slope
        if not (nb > 0 and math.isfinite(nb)):
            break
        nf = map_residual(state, nb)
        if abs(nf) > 2 * abs(f) + tol:  # diverging
            break
        b, f = nb, nf
    b = _bisect_residual(state, b0=b, tol=tol)
    b = _polish(state, b, map_residual(state, b))
    return GammaParams(state.q / (b * state.s), b)


def _polish(state: PosteriorState, b: float, f: float) -> float:
    # a few extra Newton steps: flat residuals leave b loose at |f| <= tol
    for _ in range(4):
        slope = _residual_slope(state, b)
        if not (math.isfinite(slope) and slope > 0):
            break
        nb = b - f / slope
        if not nb > 0:
            break
        nf = map_residual(state, nb)
        if abs(nf) >= abs(f):
            break
        b, f = nb, nf
    return b


def _bisect_residual(state: PosteriorState, b0: float, tol: float) -> float:
    f0 = map_residual(state, b0)
    if f0 == 0:
        return b0
    lo = hi = b0
    flo = fhi = f0
    for _ in range(400):
        lo, hi = lo / 2.0, hi * 2.0
        flo, fhi = map_residual(state, lo), map_residual(state, hi)
        if flo * f0 <= 0:
            hi, fhi = b0, f0
            break
        if fhi * f0 <= 0:
            lo, flo = b0, f0
            break
    else:
        raise NoConvergence("no sign change found for the MAP residual")
    return _bisect_bracket(state, lo, hi, tol)


def _map_two_root(state: PosteriorState, tol: float) -> GammaParams:
    """Local mode when ``r < s``.

    The residual is then positive at both ends of ``(0, inf)`` and the density
    is unbounded as ``a`` grows, so only a local mode exists: the larger root,
    right of the residual's minimum where ``r a psi'(a) = s``.
    """
    target = state.s / state.r
    lo, hi = 1e-12, 1.0
    while hi * trigamma(hi) > target:
        hi *= 2.0
    for _ in range(200):  # a psi'(a) decreases from inf to 1
        mid = math.sqrt(lo * hi)
        if mid * trigamma(mid) > target:
            lo = mid
        else:
            hi = mid
        if hi - lo <= 1e-14 * hi:
            break
    b_min = state.q / (hi * state.s)
    if map_residual(state, b_min) > 0:
        raise NoConvergence("posterior has no interior mode")
    top = 2.0 * b_min
    while map_residual(state, top) <= 0:
        top *= 2.0
        if not math.isfinite(top):
            raise NoConvergence("no sign change found for the MAP residual")
    # the residual can be very flat here, so bisect to the floating-point floor
    lo, hi = b_min, top
    while hi - lo > 4 * np.finfo(float).eps * hi:
        mid = 0.5 * (lo + hi)
        if map_residual(state, mid) <= 0:
            lo = mid
        else:
            hi = mid
    b = lo if abs(map_residual(state, lo)) <= abs(map_residual(state, hi)) else hi
    if abs(map_residual(state, b)) > 10 * tol:
        raise NoConvergence("MAP bisection did not reach tolerance")
    return GammaParams(state.q / (b * state.s), b)


def _bisect_bracket(state: PosteriorState, lo: float, hi: float, tol: float) -> float:
    flo, fhi = map_residual(state, lo), map_residual(state, hi)
    for _ in range(2000):
        mid = math.sqrt(lo * hi)
        fm = map_residual(state, mid)
        if abs(fm) <= tol:
            return mid
        if fm * flo < 0:
            hi, fhi = mid, fm
        else:
            lo, flo = mid, fm
        if hi - lo <= 4 * np.finfo(float).eps * hi:
            # Floating-point floor reached; take the better endpoint.
            best = lo if abs(flo) <= abs(fhi) else hi
            if abs(map_residual(state, best)) <= 10 * tol:
                return best
            break
    raise NoConvergence("MAP bisection did not reach tolerance")
