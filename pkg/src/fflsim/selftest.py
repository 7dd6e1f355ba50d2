"""Fast self-checks of the statistical and analytic properties.

Each check re-verifies one load-bearing claim with an independent method:
Monte Carlo for the estimator moments, a projected-gradient minimizer for
the selection probabilities, central finite differences for backprop, and
direct ratio arithmetic for the schedule.  The full test suite runs larger
versions of the same checks; this subset is sized to finish in seconds.
"""

from __future__ import annotations

import numpy as np

from . import compress, nn, schedule
from .data import MiniBatch


def _project_budget_box(p: np.ndarray, s: float, lo: float = 1e-12) -> np.ndarray:
    """Euclidean projection onto {sum p = s, lo <= p <= 1} by bisecting the
    Lagrange shift."""
    shift_lo = p.min() - 1.0
    shift_hi = p.max() - lo
    for _ in range(100):
        shift = 0.5 * (shift_lo + shift_hi)
        total = np.clip(p - shift, lo, 1.0).sum()
        if total > s:
            shift_lo = shift
        else:
            shift_hi = shift
    return np.clip(p - 0.5 * (shift_lo + shift_hi), lo, 1.0)


def minimize_variance_numeric(lam: np.ndarray, s: float, iters: int = 4000) -> float:
    """Projected-gradient minimum of sum lambda_i^2 / p_i over the budget box."""
    lam2 = lam**2
    p = _project_budget_box(np.full(lam.size, s / lam.size), s)
    best = float(np.sum(lam2 / p))
    step = 0.1 / max(1.0, lam2.max())
    for it in range(iters):
        grad = -lam2 / p**2
        p = _project_budget_box(p - step * grad / (1.0 + it / 50.0), s)
        best = min(best, float(np.sum(lam2 / p)))
    return best


def _check_unbiasedness() -> tuple[bool, str]:
    rng = np.random.default_rng(7)
    g = rng.standard_normal(24) * np.exp(rng.standard_normal(24))
    decomp = compress.decompose_elementwise(g)
    probs = compress.probabilities(decomp, 6.0)
    n = 20000
    total = np.zeros(decomp.dim)
    total_sq = np.zeros(decomp.dim)
    masks = rng.random((n, decomp.n_atoms)) < probs.probs
    for mask in masks:
        vec = compress.reconstruct(compress.select(decomp, probs, mask))
        total += vec
        total_sq += vec**2
    mean = total / n
    var = np.maximum(total_sq / n - mean**2, 0.0)
    stderr = np.sqrt(var / n)
    gap = np.abs(mean - decomp.reconstruct_full())
    ok = bool(np.all(gap <= 3.0 * stderr + 1e-9))
    return ok, f"max |mean - g| = {gap.max():.2e}"


def _check_variance_law() -> tuple[bool, str]:
    rng = np.random.default_rng(11)
    worst = 0.0
    for _ in range(3):
        size = int(rng.integers(5, 20))
        g = rng.standard_normal(size) * np.exp(rng.standard_normal(size))
        decomp = compress.decompose_elementwise(g)
        s = float(rng.uniform(1.0, size))
        probs = compress.probabilities(decomp, s)
        closed = compress.variance_closed_form(decomp, probs)
        n = 50000
        dense = decomp.reconstruct_full()
        acc = 0.0
        masks = rng.random((n, decomp.n_atoms)) < probs.probs
        for mask in masks:
            diff = compress.reconstruct(compress.select(decomp, probs, mask)) - dense
            acc += float(diff @ diff)
        emp = acc / n
        if closed > 0:
            worst = max(worst, abs(emp - closed) / closed)
    ok = worst <= 0.08
    return ok, f"worst relative variance gap = {worst:.3f}"


def _check_probability_optimality() -> tuple[bool, str]:
    rng = np.random.default_rng(13)
    worst = -np.inf
    for trial in range(10):
        size = int(rng.integers(2, 7))
        lam = np.exp(rng.standard_normal(size))
        if trial < 3:  # force clipping cases too
            lam[0] *= 20.0
        s = float(rng.uniform(1.0, size))
        decomp = compress.decompose_elementwise(lam)
        probs = compress.probabilities(decomp, s)
        closed = float(np.sum(lam**2 / probs.probs))
        numeric = minimize_variance_numeric(lam, s)
        worst = max(worst, closed - numeric)
    ok = worst <= 1e-6
    return ok, f"max closed-form excess over numeric minimum = {worst:.2e}"


def _check_gradient() -> tuple[bool, str]:
    rng = np.random.default_rng(17)
    worst = 0.0
    for sizes in ((4, 6, 3), (5, 4, 4, 2)):
        spec = nn.MlpSpec(sizes, "tanh")
        params = nn.init_params(spec, rng)
        batch = MiniBatch(rng.standard_normal((6, sizes[0])), rng.integers(0, sizes[-1], 6))
        _, grad = nn.loss_and_grad(params, batch)
        flat = params.flatten()
        gflat = grad.flatten()
        h = 1e-5
        for i in range(flat.size):
            bumped = flat.copy()
            bumped[i] += h
            up, _ = nn.loss_and_grad(params.from_flat(bumped), batch)
            bumped[i] -= 2 * h
            down, _ = nn.loss_and_grad(params.from_flat(bumped), batch)
            fd = (up - down) / (2 * h)
            worst = max(worst, abs(fd - gflat[i]) / max(abs(fd), abs(gflat[i]), 1e-6))
    ok = worst < 1e-4
    return ok, f"max relative gradient error = {worst:.2e}"


def _check_schedule() -> tuple[bool, str]:
    state = schedule.SchedulerState(tau0=30, s0=5.0, tau_ub=30, s_ub=9.0, loss_smoothing=0.0, F0=2.0)
    plan = schedule.plan_next(state, 0.25)
    if (plan.tau_k, plan.s_k) != (15, 9.0):
        return False, f"expected (15, 9.0), got {(plan.tau_k, plan.s_k)}"
    fa, fb = 1.7, 0.23
    tau_a, s_a = schedule.conclusive_raw(fa, 2.0, 30, 5.0)
    tau_b, s_b = schedule.conclusive_raw(fb, 2.0, 30, 5.0)
    ratio = (fa / fb) ** (1.0 / 3.0)
    if abs(tau_a / tau_b - ratio) > 1e-12 or abs(s_b / s_a - ratio) > 1e-12:
        return False, "cube-root ratio law violated"
    losses = np.linspace(2.0, 0.05, 40)
    raw = [schedule.conclusive_raw(f, 2.0, 30, 5.0) for f in losses]
    taus = [r[0] for r in raw]
    esses = [r[1] for r in raw]
    monotone = all(a >= b for a, b in zip(taus, taus[1:])) and all(
        a <= b for a, b in zip(esses, esses[1:])
    )
    return monotone, "identity, ratio law, and monotonicity hold"


def run_selftest() -> bool:
    checks = [
        ("compression unbiasedness", _check_unbiasedness),
        ("compression variance law", _check_variance_law),
        ("selection probability optimality", _check_probability_optimality),
        ("backprop gradient check", _check_gradient),
        ("cube-root schedule", _check_schedule),
    ]
    all_ok = True
    for name, check in checks:
        ok, detail = check()
        all_ok &= ok
        print(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
    return all_ok
