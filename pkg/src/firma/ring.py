"""Ring arithmetic: golden-ratio neighbour weights, accuracy gating, ring
ordering by 2-opt, the circulant mixing matrix and its spectrum, and the
self-retention schedule used by the multi-pass protocol.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from firma.errors import ConfigError, ShapeError

PHI = (1.0 + math.sqrt(5.0)) / 2.0
GATE_EPS = 1e-8
MOVE_TOL = 1e-12


@dataclass(frozen=True)
class FibWeights:
    alpha: float  # left-neighbour weight
    beta: float  # right-neighbour weight


def fib_weights() -> FibWeights:
    return FibWeights(1.0 / PHI, 1.0 / PHI**2)


UNIFORM = FibWeights(0.5, 0.5)


@dataclass(frozen=True)
class GossipWeights:
    tau: float
    eps: float
    g_left: float
    g_right: float
    w_left: float  # accuracy posterior
    w_right: float
    a_left: float  # prior/posterior interpolation actually used in the blend
    a_right: float
    self_retention_used: bool


def gate_and_interpolate(a_left: float, a_right: float, tau: float, eps: float = GATE_EPS,
                         mix: float = 0.5, prior: FibWeights | None = None) -> GossipWeights:
    """Screen neighbour accuracies by ``tau`` and mix the posterior into the prior.

    ``a* = (1 - mix) * prior + mix * posterior``; ``mix = 0.5`` is the default.
    When both neighbours fail the gate, ``self_retention_used`` is set and
    the blend weights are reported as zero.
    """
    prior = prior or fib_weights()
    g_l = a_left if a_left >= tau else 0.0
    g_r = a_right if a_right >= tau else 0.0
    total = g_l + g_r
    if total < eps:
        return GossipWeights(tau, eps, g_l, g_r, 0.0, 0.0, 0.0, 0.0, True)
    w_l, w_r = g_l / total, g_r / total
    return GossipWeights(
        tau, eps, g_l, g_r, w_l, w_r,
        (1.0 - mix) * prior.alpha + mix * w_l,
        (1.0 - mix) * prior.beta + mix * w_r,
        False,
    )


def _pair(weights) -> tuple[float, float] | None:
    if isinstance(weights, GossipWeights):
        return None if weights.self_retention_used else (weights.a_left, weights.a_right)
    return weights.alpha, weights.beta


def blend(theta_self, theta_left, theta_right, weights, gamma: float) -> np.ndarray:
    """``gamma*self + (1-gamma)*(a_L*left + a_R*right)``; self-retention returns a copy of self."""
    theta_self = np.asarray(theta_self, dtype=np.float64)
    theta_left = np.asarray(theta_left, dtype=np.float64)
    theta_right = np.asarray(theta_right, dtype=np.float64)
    if not (theta_self.shape == theta_left.shape == theta_right.shape):
        raise ShapeError("blend operands differ in shape")
    if not 0.0 <= gamma <= 1.0:
        raise ValueError(f"gamma={gamma} outside [0, 1]")
    pair = _pair(weights)
    if pair is None:
        return theta_self.copy()
    a_l, a_r = pair
    return gamma * theta_self + (1.0 - gamma) * (a_l * theta_left + a_r * theta_right)


# ------------------------------------------------------------ gossip passes


def gossip_pass(thetas: np.ndarray, sigma: Sequence[int], gamma: float, weights="fib",
                accuracies: Sequence[float] | None = None, tau: float = 0.35,
                eps: float = GATE_EPS, mix: float = 0.5):
    """One synchronous ring pass.

    ``thetas[i]`` is client ``i``'s parameter vector; ``sigma[p]`` is the
    client seated at position ``p``. Every position reads the pass-start
    values. ``weights`` is ``"fib"`` (static golden-ratio pair),
    ``"uniform"`` (1/2, 1/2) or ``"gated"`` (needs ``accuracies``).

    Returns the new array and the per-client weights used.
    """
    thetas = np.asarray(thetas, dtype=np.float64)
    n = len(sigma)
    out = np.empty_like(thetas)
    used = [None] * n
    for p in range(n):
        i, left, right = sigma[p], sigma[(p - 1) % n], sigma[(p + 1) % n]
        if weights == "gated":
            w = gate_and_interpolate(accuracies[left], accuracies[right], tau, eps, mix)
        elif weights == "fib":
            w = fib_weights()
        elif weights == "uniform":
            w = UNIFORM
        else:
            raise ValueError(f"unknown weight scheme {weights!r}")
        out[i] = blend(thetas[i], thetas[left], thetas[right], w, gamma)
        used[i] = w
    return out, used


# ------------------------------------------------------------- ring order


def cosine(u: np.ndarray, v: np.ndarray) -> float:
    """Cosine similarity; defined as 0 when either vector is zero."""
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0.0 or nv == 0.0:
        return 0.0
    return float(np.dot(u, v) / (nu * nv))


def similarity_matrix(histograms) -> np.ndarray:
    h = np.asarray(histograms, dtype=np.float64)
    norms = np.linalg.norm(h, axis=1)
    safe = np.where(norms > 0, norms, 1.0)
    u = h / safe[:, None]
    s = u @ u.T
    s[norms == 0, :] = 0.0
    s[:, norms == 0] = 0.0
    return s


def ring_cost(sigma: Sequence[int], histograms) -> float:
    """Sum of cosine similarities between ring-adjacent clients."""
    h = np.asarray(histograms, dtype=np.float64)
    n = len(sigma)
    return sum(cosine(h[sigma[p]], h[sigma[(p + 1) % n]]) for p in range(n))


@dataclass
class RingOrder:
    sigma: list
    cost: float
    identity_cost: float
    moves: int = 0
    history: list = field(default_factory=list, repr=False)

    @property
    def savings(self) -> float:
        if self.identity_cost <= 0:
            return 0.0
        return 1.0 - self.cost / self.identity_cost

    def to_json(self) -> str:
        return json.dumps({"sigma": [int(s) for s in self.sigma], "cost": self.cost,
                           "savings": self.savings})


def two_opt(histograms, tol: float = MOVE_TOL) -> RingOrder:
    """Best-improvement 2-opt from the identity ring.

    A move reverses the position segment ``i..j``; only the two boundary
    edges change because similarity is symmetric. Scan order is fixed
    (``i`` ascending, then ``j``), and the first strictly best move wins.
    """
    h = np.asarray(histograms, dtype=np.float64)
    n = len(h)
    sim = similarity_matrix(h)
    seq = list(range(n))

    def total(s):
        return float(sum(sim[s[p], s[(p + 1) % n]] for p in range(n)))

    start = total(seq)
    order = RingOrder(seq, start, start, history=[start])
    if n < 4:  # every ring on <= 3 nodes is the same cycle
        return order
    while True:
        best, best_ij = -tol, None
        for i in range(1, n - 1):
            a, b = seq[i - 1], seq[i]
            for j in range(i + 1, n):
                if i == 1 and j == n - 1:
                    continue
                c, d = seq[j], seq[(j + 1) % n]
                delta = sim[a, c] + sim[b, d] - sim[a, b] - sim[c, d]
                if delta < best:
                    best, best_ij = delta, (i, j)
        if best_ij is None:
            break
        i, j = best_ij
        seq[i: j + 1] = seq[i: j + 1][::-1]
        order.moves += 1
        order.history.append(total(seq))
    order.sigma = seq
    order.cost = total(seq)
    return order


def improving_move_exists(sigma: Sequence[int], histograms, tol: float = MOVE_TOL) -> bool:
    """Check every segment reversal by recomputing the full ring cost."""
    base = ring_cost(sigma, histograms)
    s = list(sigma)
    n = len(s)
    for i in range(n):
        for j in range(i + 1, n):
            cand = s[:i] + s[i: j + 1][::-1] + s[j + 1:]
            if ring_cost(cand, histograms) < base - tol:
                return True
    return False


# ------------------------------------------------------------ mixing matrix


@dataclass(frozen=True)
class MixingMatrix:
    n: int
    gamma: float
    left: float  # (1 - gamma) * alpha_norm
    right: float  # (1 - gamma) * beta_norm

    def dense(self) -> np.ndarray:
        m = np.zeros((self.n, self.n))
        for i in range(self.n):
            m[i, i] += self.gamma
            m[i, (i - 1) % self.n] += self.left
            m[i, (i + 1) % self.n] += self.right
        return m

    def eigenvalues(self) -> np.ndarray:
        """Closed form ``gamma + left*w^k + right*w^-k`` with ``w = exp(2*pi*i/N)``."""
        k = np.arange(self.n)
        w = np.exp(2j * np.pi * k / self.n)
        lam = self.gamma + self.left * w + self.right * np.conj(w)
        lam[0] = self.gamma + self.left + self.right
        return lam

    def spectral_radius_excluding_one(self) -> float:
        return float(np.max(np.abs(self.eigenvalues()[1:])))

    def spectrum_json(self) -> str:
        lam = self.eigenvalues()
        return json.dumps({"lambda_re": lam.real.tolist(), "lambda_im": lam.imag.tolist(),
                           "rho": self.spectral_radius_excluding_one()})


def mixing_matrix(n: int, gamma: float, alpha_norm: float | None = None,
                  beta_norm: float | None = None) -> MixingMatrix:
    """Row-stochastic circulant: self ``gamma``, left ``(1-gamma)*alpha_norm``,
    right ``(1-gamma)*beta_norm``. Defaults to the golden-ratio pair."""
    if n < 2:
        raise ShapeError("a ring needs at least 2 clients")
    if not 0.0 < gamma < 1.0:
        raise ValueError(f"gamma={gamma} outside (0, 1)")
    if alpha_norm is None:
        fw = fib_weights()
        alpha_norm, beta_norm = fw.alpha, fw.beta
    if alpha_norm <= 0 or beta_norm <= 0 or abs(alpha_norm + beta_norm - 1.0) > 1e-12:
        raise ValueError("neighbour weights must be positive and sum to 1")
    return MixingMatrix(n, gamma, (1.0 - gamma) * alpha_norm, (1.0 - gamma) * beta_norm)


def uniform_spectral_radius(n: int, gamma: float) -> float:
    """rho for the symmetric (1/2, 1/2) ring at the same self weight."""
    return mixing_matrix(n, gamma, 0.5, 0.5).spectral_radius_excluding_one()


def coverage_check(mix: MixingMatrix, k: int) -> bool:
    """True iff every entry of ``mix**k`` is strictly positive."""
    if k < 1:
        raise ValueError("k must be >= 1")
    return bool(np.all(np.linalg.matrix_power(mix.dense(), k) > 0))


# --------------------------------------------------------- retention / gamma


def gossip_passes(n: int) -> int:
    return math.ceil(n / 2)


def warmup_rounds(r: int) -> int:
    return r // 6


def calibrated_retention(gamma_r: float, k: int) -> float:
    """Per-pass retention whose ``k``-th power equals ``gamma_r``."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if not 0.0 < gamma_r <= 1.0:
        raise ValueError(f"gamma_r={gamma_r} outside (0, 1]")
    return math.exp(math.log(gamma_r) / k)


@dataclass(frozen=True)
class GammaSchedule:
    gamma_start: float
    gamma_end: float
    warmup: int
    rounds: int

    def __post_init__(self):
        if self.warmup >= self.rounds:
            raise ConfigError(f"warmup W={self.warmup} must be < R={self.rounds}")


def gamma_at_round(schedule: GammaSchedule, r: int) -> float:
    """Cosine-annealed retention for post-warmup round ``r`` (1-based).

    ``r_eff`` counts post-warmup rounds from 0, so round ``W+1`` gets
    ``gamma_start`` and round ``R`` gets ``gamma_end``.
    """
    if not schedule.warmup < r <= schedule.rounds:
        raise ValueError(f"round {r} is not a post-warmup round (W={schedule.warmup})")
    r_eff = r - schedule.warmup - 1
    R_eff = schedule.rounds - schedule.warmup - 1
    if R_eff <= 0:
        return schedule.gamma_start
    return schedule.gamma_end + 0.5 * (schedule.gamma_start - schedule.gamma_end) * (
        1.0 + math.cos(math.pi * r_eff / R_eff)
    )
