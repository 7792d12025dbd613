"""The PrivUnitG local randomizer and its parameter optimization.

PrivUnitG privatizes a unit vector v by drawing the component along v from a
Gaussian N(0, sigma^2) truncated above a threshold gamma with probability p
(below it otherwise), drawing the orthogonal part from N(0, sigma^2 (I-vv^T)),
and dividing by the debiasing scalar m so the output is unbiased. With the
cap probability p and quantile q tied by

    log(p q / ((1-p)(1-q))) = eps

the mechanism is exactly eps-DP: its pre-scaling density factorizes as
N(0, sigma^2 I) times a constant that only depends on which side of gamma the
projection <w, v> falls, so the worst-case density ratio between two inputs
is p q / ((1-p)(1-q)).

``optimize_params`` picks q (and thereby p) to minimize the closed-form
single-client squared error 1/m^2 + gamma/m - 1 by golden-section search.
The search runs over g = Phi^{-1}(q) so the q -> 1 tail stays well
conditioned; probabilities are handled through scipy's log-tail routines.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.special import log_ndtr, ndtr, ndtri

from .rng import derive_seed, generator

_SQRT_2PI = math.sqrt(2.0 * math.pi)
# q is kept inside [Phi(-G_LIMIT), Phi(G_LIMIT)]; beyond that the tail mass
# underflows the identities the wire format relies on, so fail loudly.
_G_LIMIT = 7.0


class PrivacyConfigError(ValueError):
    """Parameter optimization cannot produce valid eps-DP parameters."""


def _phi(x: float) -> float:
    return math.exp(-0.5 * x * x) / _SQRT_2PI


def compute_m(p: float, q: float, sigma: float) -> float:
    """Debiasing scalar m = sigma * phi(gamma/sigma) * (p/(1-q) - (1-p)/q)."""
    if not 0.0 < p < 1.0 or not 0.0 < q < 1.0:
        raise ValueError("p and q must lie in (0, 1)")
    if sigma <= 0.0:
        raise ValueError("sigma must be positive")
    g = float(ndtri(q))
    return sigma * _phi(g) * (p / (1.0 - q) - (1.0 - p) / q)


@dataclass(frozen=True)
class PrivUnitGParams:
    """Validated (p, q, gamma, sigma, m) tuple for one (eps, dim)."""

    eps: float
    dim: int
    p: float
    q: float
    sigma: float
    gamma: float
    m: float

    def __post_init__(self):
        if self.eps <= 0.0:
            raise PrivacyConfigError("eps must be positive")
        if self.dim < 1:
            raise ValueError("dim must be >= 1")
        recomputed = compute_m(self.p, self.q, self.sigma)
        if abs(recomputed - self.m) > 1e-12:
            raise ValueError(f"m field {self.m} does not match compute_m {recomputed}")
        if self.m <= 0.0:
            raise PrivacyConfigError("degenerate parameters: m must be positive")
        if self.privacy_log_ratio() > self.eps + 1e-9:
            raise PrivacyConfigError("parameters exceed the privacy budget")

    def privacy_log_ratio(self) -> float:
        """Worst-case log density ratio log(pq / ((1-p)(1-q)))."""
        return math.log(self.p * self.q / ((1.0 - self.p) * (1.0 - self.q)))

    def expected_sq_error(self) -> float:
        """Closed-form E||R(v) - v||^2 (independent of v)."""
        return 1.0 / self.m**2 + self.gamma / self.m - 1.0

    def to_text(self) -> str:
        lines = [f"eps = {self.eps!r}", f"dim = {self.dim!r}", f"p = {self.p!r}",
                 f"q = {self.q!r}", f"m = {self.m!r}"]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "PrivUnitGParams":
        fields: dict[str, float] = {}
        for line in text.strip().splitlines():
            key, _, value = line.partition("=")
            fields[key.strip()] = float(value)
        dim = int(fields["dim"])
        sigma = 1.0 / math.sqrt(dim)
        q = fields["q"]
        return cls(eps=fields["eps"], dim=dim, p=fields["p"], q=q, sigma=sigma,
                   gamma=sigma * float(ndtri(q)), m=fields["m"])


def _log_expit(x: float) -> float:
    return -np.logaddexp(0.0, -x)


def _objective(eps: float, g: float, sigma: float) -> float:
    """Single-client squared error as a function of g = Phi^{-1}(q)."""
    lp = eps + float(log_ndtr(-g)) - float(log_ndtr(g))
    t1 = math.exp(_log_expit(lp) - float(log_ndtr(-g)))   # p / (1-q)
    t2 = math.exp(_log_expit(-lp) - float(log_ndtr(g)))   # (1-p) / q
    m1 = _phi(g) * (t1 - t2)                              # m / sigma
    if not math.isfinite(m1) or m1 <= 0.0:
        return math.inf
    m = sigma * m1
    return 1.0 / (m * m) + g / m1 - 1.0


def _golden_min(f, lo: float, hi: float, tol: float = 1e-8) -> float:
    ratio = (math.sqrt(5.0) - 1.0) / 2.0
    a, b = lo, hi
    c = b - ratio * (b - a)
    d = a + ratio * (b - a)
    fc, fd = f(c), f(d)
    while b - a > tol:
        if fc < fd:
            b, d, fd = d, c, fc
            c = b - ratio * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + ratio * (b - a)
            fd = f(d)
    return 0.5 * (a + b)


@lru_cache(maxsize=4096)
def optimize_params(eps: float, dim: int) -> PrivUnitGParams:
    """eps-DP parameters minimizing the expected squared error at ``dim``.

    The privacy constraint is enforced at equality, pinning p once q is
    chosen; q comes from a 1-d golden-section search. Deterministic.
    """
    eps = float(eps)
    if eps <= 0.0:
        raise PrivacyConfigError("eps must be positive")
    if dim < 1:
        raise ValueError("dim must be >= 1")
    sigma = 1.0 / math.sqrt(dim)
    g = _golden_min(lambda t: _objective(eps, t, sigma), -_G_LIMIT, _G_LIMIT)
    if not math.isfinite(_objective(eps, g, sigma)):
        raise PrivacyConfigError(f"no finite objective for eps={eps}, dim={dim}")
    q = float(ndtr(g))
    if q <= 1e-12 or q >= 1.0 - 1e-12:
        raise PrivacyConfigError(
            f"optimal quantile q={q} is out of the numerically safe range; "
            f"eps={eps} is too extreme for this implementation")
    # Pin p by the active constraint, evaluated with the same plain float
    # arithmetic the validation uses, then nudge to the safe side of eps.
    a = math.exp(eps) * (1.0 - q) / q
    p = a / (1.0 + a)
    if p <= 0.0 or p >= 1.0:
        raise PrivacyConfigError(f"constraint pins p={p} outside (0, 1)")
    while math.log(p * q / ((1.0 - p) * (1.0 - q))) > eps:
        p = math.nextafter(p, 0.0)
    gamma = sigma * float(ndtri(q))
    return PrivUnitGParams(eps=eps, dim=dim, p=p, q=q, sigma=sigma, gamma=gamma,
                           m=compute_m(p, q, sigma))


# --- sampling ---------------------------------------------------------------

def _trunc_gauss_from_uniform(u, bound: float, side: str, sigma: float):
    """Map Uniform(0,1) draws to N(0, sigma^2) conditioned on a half-line.

    Inverse-CDF in the complementary tail, so bounds many sigmas out stay
    exact: for side="above", alpha = -sigma * Phi^{-1}((1-u) * Phi(-b/sigma)).
    """
    b = bound / sigma
    if side == "above":
        tail = float(ndtr(-b))
        if tail <= 0.0:
            raise OverflowError(f"upper tail beyond {bound} underflows")
        return -sigma * ndtri((1.0 - u) * tail)
    if side == "below":
        mass = float(ndtr(b))
        if mass <= 0.0:
            raise OverflowError(f"lower tail beyond {bound} underflows")
        return sigma * ndtri(u * mass)
    raise ValueError(f"side must be 'above' or 'below', got {side!r}")


def sample_trunc_gauss(bound: float, side: str, sigma: float,
                       seed: int | bytes) -> float:
    """One draw of N(0, sigma^2) conditioned above (or below) ``bound``."""
    if sigma <= 0.0:
        raise ValueError("sigma must be positive")
    g = generator(seed, "trunc")
    return float(_trunc_gauss_from_uniform(g.random(), bound, side, sigma))


def _check_unit(v: np.ndarray, what: str = "input") -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 1:
        raise ValueError(f"{what} must be a vector")
    if abs(np.linalg.norm(v) - 1.0) > 1e-6:
        raise ValueError(f"{what} must have unit norm, got {np.linalg.norm(v)}")
    return v


def randomize(v: np.ndarray, params: PrivUnitGParams, seed: int | bytes) -> np.ndarray:
    """One eps-DP privatized draw; E[randomize(v)] = v.

    Deterministic given (v, params, seed). The draw order (cap Bernoulli,
    truncation uniform, orthogonal Gaussian block) is part of the pinned
    stream layout.
    """
    v = _check_unit(v)
    if v.shape[0] != params.dim:
        raise ValueError(f"params are for dim {params.dim}, input has {v.shape[0]}")
    g = generator(seed, "pug")
    above = g.random() < params.p
    u = g.random()
    alpha = _trunc_gauss_from_uniform(u, params.gamma, "above" if above else "below",
                                      params.sigma)
    noise = g.standard_normal(params.dim)
    ortho = params.sigma * (noise - np.dot(noise, v) * v)
    return (alpha * v + ortho) / params.m


def randomize_rows(V: np.ndarray, params: PrivUnitGParams,
                   seed: int | bytes) -> np.ndarray:
    """Privatize each row of V independently (vectorized, same law as
    :func:`randomize` row by row but a different stream layout)."""
    V = np.asarray(V, dtype=np.float64)
    n, dim = V.shape
    if dim != params.dim:
        raise ValueError(f"params are for dim {params.dim}, rows have {dim}")
    g = generator(seed, "pug-rows")
    above = g.random(n) < params.p
    u = g.random(n)
    alpha = np.where(
        above,
        _trunc_gauss_from_uniform(u, params.gamma, "above", params.sigma),
        _trunc_gauss_from_uniform(u, params.gamma, "below", params.sigma),
    )
    noise = g.standard_normal((n, dim))
    comp = np.einsum("ij,ij->i", noise, V)
    ortho = params.sigma * (noise - comp[:, None] * V)
    return (alpha[:, None] * V + ortho) / params.m


# --- auditing and empirical error constant ----------------------------------

def privacy_audit(params: PrivUnitGParams, angle_grid_size: int = 64) -> float:
    """Supremum of the analytic log density ratio over a grid of input pairs.

    The pre-scaling output density at w given input v is
    N(w; 0, sigma^2 I) * (p/(1-q)  if <w, v> >= gamma else (1-p)/q), so for
    an input pair at angle theta the log ratio over any output region is a
    difference of the two log factors; the grid enumerates the achievable
    (region, region) combinations for each angle.
    """
    log_factor = {True: math.log(params.p) - math.log1p(-params.q),
                  False: math.log1p(-params.p) - math.log(params.q)}
    best = 0.0
    angles = [math.pi * (j + 1) / angle_grid_size for j in range(angle_grid_size)]
    if params.dim == 1:
        angles = [math.pi]  # the only distinct input pair on S^0 is (v, -v)
    for theta in angles:
        for v_above in (True, False):
            for vp_above in (True, False):
                if not _region_achievable(theta, v_above, vp_above, params.gamma):
                    continue
                best = max(best, log_factor[v_above] - log_factor[vp_above])
    return best


def _region_achievable(theta: float, v_above: bool, vp_above: bool,
                       gamma: float) -> bool:
    """Is there an output w with <w,v> on the requested side of gamma and
    <w,v'> likewise, for unit v, v' at angle theta?"""
    if theta < math.pi:  # independent directions: both projections are free
        return True
    # v' = -v: <w, v'> = -<w, v>, so one scalar t must satisfy both sides
    if v_above and vp_above:
        return gamma <= 0.0   # t >= gamma and t <= -gamma
    if not v_above and not vp_above:
        return gamma > 0.0    # t in (-gamma, gamma)
    return True               # opposite sides: take |t| large


@dataclass(frozen=True)
class ErrorConstantEstimate:
    """Empirical c in MSE = c * d / (n * eps) for the direct protocol."""

    c_hat: float
    d: int
    eps: float
    n: int
    trials: int
    stderr: float


def estimate_error_constant(d: int, eps: float, n: int, trials: int,
                            seed: int | bytes = 0) -> ErrorConstantEstimate:
    if trials < 10:
        raise ValueError("need at least 10 trials")
    params = optimize_params(eps, d)
    errors = np.empty(trials)
    for t in range(trials):
        g = generator(seed, "errconst", t)
        V = g.standard_normal((n, d))
        V /= np.linalg.norm(V, axis=1, keepdims=True)
        out = randomize_rows(V, params, derive_seed(seed, "errconst-noise", t))
        errors[t] = float(np.sum((out.mean(axis=0) - V.mean(axis=0)) ** 2))
    scale = n * eps / d
    c_hat = float(errors.mean() * scale)
    stderr = float(errors.std(ddof=1) * scale / math.sqrt(trials))
    return ErrorConstantEstimate(c_hat=c_hat, d=d, eps=eps, n=n, trials=trials,
                                 stderr=stderr)
