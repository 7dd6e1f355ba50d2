"""Unbiased gradient compression by atomic decomposition.

A gradient g in R^d is written as sum_i lambda_i * a_i over unit-norm atoms:
either standard-basis vectors at the nonzero entries of g ("elementwise"),
or flattened rank-1 outer products from a deflated power-iteration SVD of
each layer block ("lowrank").  Each atom is kept independently with
probability p_i and rescaled by 1/p_i, which keeps the estimator unbiased
with variance sum_i lambda_i^2 * (1/p_i - 1).

For a sparsity budget s (expected number of transmitted atoms), the variance
-minimizing probabilities are p_i = |lambda_i| * s / ||lambda||_1 whenever
that stays <= 1 for every atom.  Oversized coefficients are clipped to
p = 1 and the rule is re-applied to the remaining atoms with the leftover
budget until it is feasible.
"""

from __future__ import annotations

import logging
import math
import struct
from dataclasses import dataclass

import numpy as np

from .nn import GradientBundle

log = logging.getLogger(__name__)

# Power iteration: tolerance on the singular-value change between sweeps and
# the per-triple iteration cap before falling back to elementwise atoms.
POWER_TOL = 1e-10
POWER_ITER_CAP = 1000
_POWER_SEED = 0x5EED  # fixed: a decomposition is a pure function of its input
_DROP_TOL = 1e-12  # singular values this small are treated as zero atoms

BASIS_KINDS = ("elementwise", "lowrank")


@dataclass
class OuterAtom:
    """Rank-1 atom: the flattened outer product u v^T placed at `offset` in
    the flat gradient vector (both factors unit L2 norm)."""

    u: np.ndarray
    v: np.ndarray
    offset: int = 0


@dataclass
class AtomicDecomposition:
    basis_kind: str
    dim: int
    coeffs: np.ndarray  # (B,): signed for elementwise, non-negative for lowrank
    indices: np.ndarray | None = None  # elementwise: flat position per atom
    outer_atoms: list[OuterAtom] | None = None  # lowrank: one atom per coeff

    def __post_init__(self) -> None:
        if self.basis_kind not in BASIS_KINDS:
            raise ValueError(f"basis_kind must be one of {BASIS_KINDS}")
        self.coeffs = np.asarray(self.coeffs, dtype=np.float64)

    @property
    def n_atoms(self) -> int:
        return self.coeffs.size

    def reconstruct_full(self) -> np.ndarray:
        """Dense sum_i lambda_i * a_i (no sampling); mostly for verification."""
        out = np.zeros(self.dim)
        _scatter(out, self.basis_kind, self.coeffs, self.indices, self.outer_atoms)
        return out


@dataclass
class SelectionProbabilities:
    probs: np.ndarray

    def __post_init__(self) -> None:
        self.probs = np.asarray(self.probs, dtype=np.float64)


@dataclass
class VarianceTerms:
    """Per-worker constants of the variance bound: sigma1 scales like 1/s,
    sigma2 is the constant (negative) part."""

    sigma1: float
    sigma2: float


@dataclass
class CompressedGradient:
    basis_kind: str
    dim: int
    coeffs: np.ndarray  # scaled lambda_i / p_i for the selected atoms
    indices: np.ndarray | None = None
    outer_atoms: list[OuterAtom] | None = None

    @property
    def payload_atoms(self) -> int:
        return self.coeffs.size


def _scatter(out, basis_kind, coeffs, indices, outer_atoms) -> None:
    if basis_kind == "elementwise":
        if coeffs.size:
            out[indices] += coeffs
    else:
        for coeff, atom in zip(coeffs, outer_atoms or []):
            block = coeff * np.outer(atom.u, atom.v)
            out[atom.offset : atom.offset + block.size] += block.ravel()


def decompose_elementwise(grad: np.ndarray, offset: int = 0, dim: int | None = None) -> AtomicDecomposition:
    """Standard-basis decomposition at the nonzero entries of a flat vector."""
    g = np.asarray(grad, dtype=np.float64).ravel()
    if dim is None:
        dim = g.size + offset
    idx = np.flatnonzero(g)
    return AtomicDecomposition("elementwise", dim, g[idx].copy(), indices=idx + offset)


def _top_singular_triple(
    mat: np.ndarray, rng: np.random.Generator
) -> tuple[np.ndarray, float, np.ndarray] | None:
    """Leading singular triple (u, sigma, v) by power iteration on the Gram
    matrix of the thinner side; None if the tolerance is not met in time."""
    m, n = mat.shape
    transposed = m < n
    a = mat.T if transposed else mat  # a is tall: rows >= cols
    gram = a.T @ a
    x = rng.standard_normal(a.shape[1])
    x /= np.linalg.norm(x)
    sigma_prev = -1.0
    converged = False
    for _ in range(POWER_ITER_CAP):
        y = gram @ x
        norm_y = np.linalg.norm(y)
        if norm_y == 0.0:  # residual is exactly zero in this subspace
            return x * 0.0, 0.0, x * 0.0
        x = y / norm_y
        sigma = math.sqrt(max(float(x @ (gram @ x)), 0.0))
        if abs(sigma - sigma_prev) <= POWER_TOL * max(1.0, sigma):
            converged = True
            break
        sigma_prev = sigma
    if not converged:
        return None
    v = x
    av = a @ v
    sigma = float(np.linalg.norm(av))
    if sigma == 0.0:
        return v * 0.0, 0.0, v
    u = av / sigma
    if transposed:
        u, v = v, u
    return u, sigma, v


def decompose_lowrank(
    grad_matrix: np.ndarray, r: int, offset: int = 0, dim: int | None = None
) -> AtomicDecomposition:
    """Truncated SVD decomposition of one matrix into r rank-1 atoms.

    Uses deflated power iteration; zero singular values are dropped.  If any
    triple fails to converge within the iteration cap, the whole matrix falls
    back to an elementwise decomposition and a diagnostic is logged.
    """
    mat = np.asarray(grad_matrix, dtype=np.float64)
    if mat.ndim != 2:
        raise ValueError(f"expected a matrix, got shape {mat.shape}")
    if not 1 <= r <= min(mat.shape):
        raise ValueError(f"rank must be in [1, {min(mat.shape)}], got {r}")
    if dim is None:
        dim = mat.size + offset
    rng = np.random.default_rng(_POWER_SEED)
    residual = mat.copy()
    coeffs: list[float] = []
    atoms: list[OuterAtom] = []
    for _ in range(r):
        triple = _top_singular_triple(residual, rng)
        if triple is None:
            log.warning(
                "power iteration did not converge within %d iterations on a %s block;"
                " falling back to elementwise atoms",
                POWER_ITER_CAP,
                mat.shape,
            )
            return decompose_elementwise(mat.ravel(), offset=offset, dim=dim)
        u, sigma, v = triple
        if sigma <= _DROP_TOL * max(1.0, coeffs[0] if coeffs else 0.0):
            break
        coeffs.append(sigma)
        atoms.append(OuterAtom(u, v, offset))
        residual -= sigma * np.outer(u, v)
    order = sorted(range(len(coeffs)), key=lambda i: -coeffs[i])
    return AtomicDecomposition(
        "lowrank",
        dim,
        np.array([coeffs[i] for i in order]),
        outer_atoms=[atoms[i] for i in order],
    )


def decompose_bundle(bundle: GradientBundle, kind: str, s: float) -> AtomicDecomposition:
    """Decompose a whole layered gradient into one atom set.

    elementwise: standard-basis atoms over the flat vector.  lowrank: each
    layer block contributes up to ceil(s) rank-1 atoms (biases are treated as
    one-column matrices); a power-iteration failure in any block falls the
    whole bundle back to elementwise.
    """
    if kind == "elementwise":
        return decompose_elementwise(bundle.flatten())
    if kind != "lowrank":
        raise ValueError(f"basis kind must be one of {BASIS_KINDS}, got {kind!r}")
    dim = bundle.dim
    coeffs: list[np.ndarray] = []
    atoms: list[OuterAtom] = []
    for offset, arr in bundle.blocks():
        matrix = arr if arr.ndim == 2 else arr.reshape(-1, 1)
        rank = min(int(math.ceil(s)), min(matrix.shape))
        sub = decompose_lowrank(matrix, rank, offset=offset, dim=dim)
        if sub.basis_kind == "elementwise":
            log.warning("lowrank decomposition fell back to elementwise for the whole bundle")
            return decompose_elementwise(bundle.flatten())
        coeffs.append(sub.coeffs)
        atoms.extend(sub.outer_atoms or [])
    merged = np.concatenate(coeffs) if coeffs else np.empty(0)
    return AtomicDecomposition("lowrank", dim, merged, outer_atoms=atoms)


def probabilities(decomp: AtomicDecomposition, s: float) -> SelectionProbabilities:
    """Variance-minimizing keep probabilities under expected-payload budget s.

    p_i = |lambda_i| * s / ||lambda||_1, clipping to 1 and redistributing the
    leftover budget whenever a coefficient is too large for that rule.  The
    probabilities always sum to min(s, B).
    """
    if s < 1:
        raise ValueError(f"sparsity budget s must be >= 1, got {s}")
    lam = np.abs(decomp.coeffs)
    n = lam.size
    if n == 0:
        return SelectionProbabilities(np.empty(0))
    if np.any(lam == 0.0):
        raise ValueError("decomposition contains zero atoms; drop them first")
    if s >= n:
        return SelectionProbabilities(np.ones(n))
    p = np.ones(n)
    active = np.ones(n, dtype=bool)
    budget = float(s)
    while True:
        l1 = lam[active].sum()
        oversized = active & (lam * budget > l1)
        if not oversized.any():
            break
        budget -= int(oversized.sum())
        active &= ~oversized
        if not active.any():
            break
    if active.any():
        l1 = lam[active].sum()
        p[active] = lam[active] * (budget / l1)
    return SelectionProbabilities(p)


def select(
    decomp: AtomicDecomposition, probs: SelectionProbabilities, mask: np.ndarray
) -> CompressedGradient:
    """Deterministic half of sampling: keep the masked atoms, scale by 1/p."""
    picked = np.flatnonzero(mask)
    scaled = decomp.coeffs[picked] / probs.probs[picked]
    if decomp.basis_kind == "elementwise":
        idx = decomp.indices[picked] if decomp.indices is not None else picked
        return CompressedGradient("elementwise", decomp.dim, scaled, indices=idx)
    chosen = [decomp.outer_atoms[i] for i in picked] if decomp.outer_atoms else []
    return CompressedGradient("lowrank", decomp.dim, scaled, outer_atoms=chosen)


def sample(
    decomp: AtomicDecomposition, probs: SelectionProbabilities, rng: np.random.Generator
) -> CompressedGradient:
    """Independent Bernoulli(p_i) keep/drop per atom, kept atoms scaled by 1/p_i.

    An empty decomposition yields the zero compressed gradient (payload 0);
    the caller is expected to log that round as degenerate.
    """
    if decomp.n_atoms == 0:
        return CompressedGradient(decomp.basis_kind, decomp.dim, np.empty(0),
                                  indices=np.empty(0, dtype=np.int64), outer_atoms=[])
    mask = rng.random(decomp.n_atoms) < probs.probs
    return select(decomp, probs, mask)


def reconstruct(compressed: CompressedGradient) -> np.ndarray:
    """Dense estimator vector from a compressed payload."""
    out = np.zeros(compressed.dim)
    _scatter(out, compressed.basis_kind, compressed.coeffs, compressed.indices,
             compressed.outer_atoms)
    return out


def variance_closed_form(decomp: AtomicDecomposition, probs: SelectionProbabilities) -> float:
    """E ||ghat - g||^2 for orthonormal-atom decompositions:
    sum_i lambda_i^2 * (1/p_i - 1)."""
    if decomp.n_atoms == 0:
        return 0.0
    lam2 = decomp.coeffs**2
    return float(np.sum(lam2 * (1.0 / probs.probs - 1.0)))


def sigma_terms(decomp: AtomicDecomposition) -> VarianceTerms:
    """Budget-independent variance constants of one decomposition.

    With the optimal unclipped probabilities the sampling variance equals
    sigma1 / s + sigma2, where sigma1 = ||lambda||_1^2 (written as
    sum_i |lambda_i| * ||lambda||_1) and sigma2 = -sum_i lambda_i^2.
    """
    if decomp.n_atoms == 0:
        raise ValueError("sigma terms are undefined for an empty decomposition")
    lam = np.abs(decomp.coeffs)
    l1 = float(lam.sum())
    sigma1 = float(np.sum(lam * l1))
    sigma2 = -float(np.sum(lam * lam))
    return VarianceTerms(sigma1, sigma2)


def serialize(compressed: CompressedGradient) -> bytes:
    """Wire form for payload accounting.

    elementwise: little-endian (u32 atom id, f64 coefficient) pairs, 12 bytes
    per atom (96 bits).  lowrank: per atom a (u32 offset, u32 len(u),
    u32 len(v)) header, the two factor vectors as f64, then the coefficient.
    """
    if compressed.basis_kind == "elementwise":
        idx = compressed.indices if compressed.indices is not None else np.empty(0, dtype=np.int64)
        return b"".join(
            struct.pack("<Id", int(i), float(c)) for i, c in zip(idx, compressed.coeffs)
        )
    parts = []
    for coeff, atom in zip(compressed.coeffs, compressed.outer_atoms or []):
        parts.append(struct.pack("<III", int(atom.offset), atom.u.size, atom.v.size))
        parts.append(atom.u.astype("<f8").tobytes())
        parts.append(atom.v.astype("<f8").tobytes())
        parts.append(struct.pack("<d", float(coeff)))
    return b"".join(parts)
