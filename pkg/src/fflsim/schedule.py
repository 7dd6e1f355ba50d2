"""Round planning: picking local steps tau_k and sparsity budget s_k.

The per-round error bound being minimized is

    psi(tau, s) = A * (Y + alpha * s / tau) + (B + C * (tau - 1)) * (sigma1 / s + sigma2)

with A = 2 * (F_k - F_inf) / (eta * T), B = eta * L / M and C = (eta * L)^2.
Two planners are provided: `optimal_full` minimizes psi directly (an
alternating fixed point on the two closed-form stationary equations, always
cross-checked against the exact per-tau minimizer so the result is never
worse than a grid search), and `plan_next` applies the constant-free
cube-root schedule tau_k ~ F_k^(1/3), s_k ~ F_k^(-1/3) driven by the
smoothed training loss.
"""

from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass, replace

import numpy as np

log = logging.getLogger(__name__)

FIXED_POINT_TOL = 1e-6
FIXED_POINT_MAX_ITERS = 100


@dataclass
class BoundParams:
    """Constants of the per-round error bound.

    Y_k is the computation time per local update in seconds; alpha the
    transmission seconds per atom; T_k the wall-clock budget the bound is
    evaluated over.  beta (the gradient-proportional part of the compression
    variance bound) is recorded for completeness but the bound itself does
    not consume it.
    """

    eta: float
    L: float
    sigma1: float
    sigma2: float
    alpha: float
    M: int
    T_k: float
    Y_k: float
    F_inf: float = 0.0
    beta: float = 0.0

    def __post_init__(self) -> None:
        if self.eta <= 0:
            raise ValueError(f"eta must be > 0, got {self.eta}")
        if self.L <= 0:
            raise ValueError(f"L must be > 0, got {self.L}")
        if self.sigma1 < 0:
            raise ValueError(f"sigma1 must be >= 0, got {self.sigma1}")
        if self.alpha <= 0:
            raise ValueError(f"alpha must be > 0, got {self.alpha}")
        if self.M < 1:
            raise ValueError(f"M must be >= 1, got {self.M}")
        if self.T_k <= 0:
            raise ValueError(f"T_k must be > 0, got {self.T_k}")
        if self.Y_k < 0:
            raise ValueError(f"Y_k must be >= 0, got {self.Y_k}")
        if self.F_inf < 0:
            raise ValueError(f"F_inf must be >= 0, got {self.F_inf}")


@dataclass
class RoundPlan:
    tau_k: int
    s_k: float

    def __post_init__(self) -> None:
        if self.tau_k < 1:
            raise ValueError(f"tau_k must be >= 1, got {self.tau_k}")
        if self.s_k < 1:
            raise ValueError(f"s_k must be >= 1, got {self.s_k}")


@dataclass
class SchedulerState:
    """Mutable schedule state: anchors (tau0, s0, F0), bounds, and the
    exponentially smoothed loss.  loss_smoothing is the weight kept on the
    previous smoothed value (0 disables smoothing)."""

    tau0: int
    s0: float
    tau_ub: int
    s_ub: float
    loss_smoothing: float = 0.3
    F0: float | None = None
    smoothed: float | None = None

    def __post_init__(self) -> None:
        if self.tau_ub < 1 or not 1 <= self.tau0 <= self.tau_ub:
            raise ValueError(
                f"need 1 <= tau0 <= tau_ub, got tau0={self.tau0}, tau_ub={self.tau_ub}"
            )
        if self.s_ub < 1 or not 1 <= self.s0 <= self.s_ub:
            raise ValueError(f"need 1 <= s0 <= s_ub, got s0={self.s0}, s_ub={self.s_ub}")
        if not 0.0 <= self.loss_smoothing < 1.0:
            raise ValueError(f"loss_smoothing must be in [0, 1), got {self.loss_smoothing}")
        if self.F0 is not None and self.F0 <= 0:
            raise ValueError(f"F0 must be > 0, got {self.F0}")


def _abc(p: BoundParams, F_k: float) -> tuple[float, float, float]:
    a = 2.0 * (F_k - p.F_inf) / (p.eta * p.T_k)
    b = p.eta * p.L / p.M
    c = (p.eta * p.L) ** 2
    return a, b, c


def psi(tau: float, s: float, p: BoundParams, F_k: float) -> float:
    """The per-round error bound at real-valued (tau, s)."""
    if tau < 1 or s < 1:
        raise ValueError(f"psi needs tau >= 1 and s >= 1, got tau={tau}, s={s}")
    if F_k < p.F_inf:
        raise ValueError(f"F_k={F_k} below F_inf={p.F_inf}")
    a, b, c = _abc(p, F_k)
    noise = p.sigma1 / s + p.sigma2
    return a * (p.Y_k + p.alpha * s / tau) + b * noise + c * noise * (tau - 1.0)


def hessian(tau: float, s: float, p: BoundParams, F_k: float) -> np.ndarray:
    """Exact 2x2 Hessian of psi in (tau, s)."""
    a, b, c = _abc(p, F_k)
    h_tt = 2.0 * a * p.alpha * s / tau**3
    h_ts = -a * p.alpha / tau**2 - c * p.sigma1 / s**2
    h_ss = 2.0 * b * p.sigma1 / s**3 + 2.0 * c * (tau - 1.0) * p.sigma1 / s**3
    return np.array([[h_tt, h_ts], [h_ts, h_ss]])


def hessian_check(tau: float, s: float, p: BoundParams, F_k: float) -> tuple[bool, np.ndarray]:
    """(is positive semidefinite, Hessian); PSD means both diagonal entries
    are non-negative and the determinant is >= -1e-12."""
    h = hessian(tau, s, p, F_k)
    det = h[0, 0] * h[1, 1] - h[0, 1] * h[1, 0]
    psd = h[0, 0] >= 0.0 and h[1, 1] >= 0.0 and det >= -1e-12
    return psd, h


def _clamp(x: float, lo: float, hi: float) -> float:
    return min(max(x, lo), hi)


def _paper_tau_fixed_point(s: float, p: BoundParams, F_k: float) -> float:
    """Stationary tau given s, as printed in the source derivation."""
    num = 2.0 * p.alpha * (F_k - p.F_inf) * s * s
    den = p.eta**3 * p.L**2 * (p.sigma1 + p.sigma2 * s)
    if num <= 0.0:
        return 1.0
    if den <= 0.0:
        return math.inf
    return math.sqrt(num / den)


def _paper_s_fixed_point(tau: float, p: BoundParams, F_k: float) -> float:
    """Stationary s given tau, as printed in the source derivation."""
    num = p.sigma1 * p.eta**2 * p.L * p.T_k * (1.0 - p.eta * p.L * (tau - 1.0)) * tau
    den = 2.0 * p.alpha * (F_k - p.F_inf)
    if den <= 0.0:
        return math.inf
    if num <= 0.0:
        return 0.0
    return math.sqrt(num / den)


def _exact_s_given_tau(tau: float, p: BoundParams, F_k: float, s_ub: float) -> float:
    """Unique minimizer of psi over s in [1, s_ub] for a fixed tau.

    psi is convex in s (d2psi/ds2 = 2 (B + C (tau-1)) sigma1 / s^3 >= 0), so
    the clamped stationary point sqrt((B + C (tau-1)) sigma1 tau / (A alpha))
    is the constrained optimum.
    """
    a, b, c = _abc(p, F_k)
    if p.sigma1 == 0.0:
        return 1.0  # psi is increasing in s once the 1/s term vanishes
    if a <= 0.0:
        return s_ub  # no s-cost left, push the variance term down
    s_star = math.sqrt((b + c * (tau - 1.0)) * p.sigma1 * tau / (a * p.alpha))
    return _clamp(s_star, 1.0, s_ub)


def optimal_full(
    p: BoundParams,
    F_k: float,
    tau_ub: int,
    s_ub: float,
    tau0: float | None = None,
    s0: float | None = None,
) -> RoundPlan:
    """Exact minimizer of psi over {1..tau_ub} x [1, s_ub].

    Runs the alternating fixed point on the two closed-form stationary
    equations from (tau0, s0), then evaluates, for every integer tau, the
    exact optimal s; the best candidate wins.  The second pass guarantees the
    result is never worse than any grid point, and a diagnostic is logged
    when the fixed point is not the winner (the fixed-point update rules
    drop lower-order terms, so this does happen).
    """
    if F_k < p.F_inf:
        raise ValueError(f"F_k={F_k} below F_inf={p.F_inf}")
    if tau_ub < 1 or s_ub < 1:
        raise ValueError(f"need tau_ub >= 1 and s_ub >= 1, got {tau_ub}, {s_ub}")
    tau = _clamp(float(tau0) if tau0 is not None else (1.0 + tau_ub) / 2.0, 1.0, float(tau_ub))
    s = _clamp(float(s0) if s0 is not None else (1.0 + s_ub) / 2.0, 1.0, s_ub)
    converged = False
    for _ in range(FIXED_POINT_MAX_ITERS):
        tau_new = _clamp(_paper_tau_fixed_point(s, p, F_k), 1.0, float(tau_ub))
        s_new = _clamp(_paper_s_fixed_point(tau_new, p, F_k), 1.0, s_ub)
        if abs(tau_new - tau) < FIXED_POINT_TOL and abs(s_new - s) < FIXED_POINT_TOL:
            tau, s = tau_new, s_new
            converged = True
            break
        tau, s = tau_new, s_new

    candidates: list[tuple[int, float]] = []
    if converged:
        for t in {int(math.floor(tau)), int(math.ceil(tau))}:
            t = int(_clamp(t, 1, tau_ub))
            candidates.append((t, s))
    for t in range(1, tau_ub + 1):
        candidates.append((t, _exact_s_given_tau(float(t), p, F_k, s_ub)))
    best = min(candidates, key=lambda c: psi(c[0], c[1], p, F_k))
    if not converged:
        log.info("fixed-point iteration did not converge; using the exhaustive minimizer")
    elif abs(best[0] - tau) > 0.5 + 1e-9 or abs(best[1] - s) > 1e-3:
        log.debug(
            "fixed point (%.3f, %.3f) was not optimal; exact minimizer picked (%d, %.3f)",
            tau, s, best[0], best[1],
        )
    return RoundPlan(best[0], float(best[1]))


def observe_loss(state: SchedulerState, F_k: float) -> float:
    """Fold a fresh loss observation into the smoothed loss; anchors F0 on
    the first observation if it was not preset.  Returns the smoothed loss."""
    if not math.isfinite(F_k) or F_k <= 0:
        raise ValueError(f"loss observation must be finite and > 0, got {F_k}")
    if state.smoothed is None:
        state.smoothed = float(F_k)
    else:
        c = state.loss_smoothing
        state.smoothed = c * state.smoothed + (1.0 - c) * float(F_k)
    if state.F0 is None:
        state.F0 = state.smoothed
    return state.smoothed


def conclusive_raw(F_hat: float, F0: float, tau0: float, s0: float) -> tuple[float, float]:
    """Pre-clamp, pre-rounding cube-root schedule values:
    tau = (F_hat / F0)^(1/3) * tau0 and s = (F0 / F_hat)^(1/3) * s0."""
    if F_hat <= 0 or F0 <= 0:
        raise ValueError(f"losses must be > 0, got F_hat={F_hat}, F0={F0}")
    ratio = (F_hat / F0) ** (1.0 / 3.0)
    return ratio * tau0, s0 / ratio


def plan_next(state: SchedulerState, F_k: float) -> RoundPlan:
    """Cube-root schedule step: smooth the loss, scale (tau0, s0) by the
    smoothed-loss ratio, round tau to the nearest integer (ties to even) and
    clamp both to their bounds."""
    f_hat = observe_loss(state, F_k)
    raw_tau, raw_s = conclusive_raw(f_hat, state.F0, state.tau0, state.s0)
    tau = int(_clamp(round(raw_tau), 1, state.tau_ub))
    s = _clamp(raw_s, 1.0, state.s_ub)
    return RoundPlan(tau, s)


@dataclass
class ProbeRound:
    """Telemetry from one calibration round.

    weights/gradient are flat vectors at the server iterate; sigma_pairs is
    a (sigma1, sigma2) pair per worker from its decomposition that round;
    atom_seconds the measured transmission seconds per atom, if any.
    """

    weights: np.ndarray
    gradient: np.ndarray
    sigma_pairs: list[tuple[float, float]]
    atom_seconds: float | None = None
    sgd_variance: float = 0.0


def estimate_constants(
    probe_runs: list[ProbeRound],
    defaults: BoundParams,
    bits_per_atom: float | None = None,
    uplink_rate_bps: float | None = None,
) -> BoundParams:
    """Fill the bound constants from probe telemetry.

    L-hat is the max gradient-difference ratio over probe pairs; sigma1/sigma2
    take the worst round-mean of the per-worker terms (sigma2 also absorbs
    the SGD-noise estimate); alpha = bits_per_atom / uplink_rate when given,
    else the measured per-atom seconds, else the default.  With fewer than
    two probes the defaults are returned unchanged.
    """
    if len(probe_runs) < 2:
        log.info("insufficient probe telemetry (%d rounds); keeping configured constants",
                 len(probe_runs))
        return defaults
    l_hat = 0.0
    for a, b in itertools.combinations(probe_runs, 2):
        dw = float(np.linalg.norm(a.weights - b.weights))
        if dw < 1e-12:
            continue
        l_hat = max(l_hat, float(np.linalg.norm(a.gradient - b.gradient)) / dw)
    if l_hat <= 0.0:
        l_hat = defaults.L
    sigma1_hat = 0.0
    sigma2_hat = -math.inf
    for probe in probe_runs:
        if probe.sigma_pairs:
            sigma1_hat = max(sigma1_hat, float(np.mean([p[0] for p in probe.sigma_pairs])))
            sigma2_hat = max(sigma2_hat, float(np.mean([p[1] for p in probe.sigma_pairs])))
    if not math.isfinite(sigma2_hat):
        sigma1_hat, sigma2_hat = defaults.sigma1, defaults.sigma2
    else:
        sigma2_hat += max((p.sgd_variance for p in probe_runs), default=0.0)
    if bits_per_atom is not None and uplink_rate_bps:
        alpha_hat = bits_per_atom / uplink_rate_bps
    else:
        measured = [p.atom_seconds for p in probe_runs if p.atom_seconds]
        alpha_hat = float(np.mean(measured)) if measured else defaults.alpha
    return replace(defaults, L=l_hat, sigma1=sigma1_hat, sigma2=sigma2_hat, alpha=alpha_hat)
