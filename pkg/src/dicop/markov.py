"""Markov chains on the increasing factor consistent with calibrated marginals.

Both constructions couple consecutive marginals with upper-triangular support
(the factor never moves down). The chain starts at t = 0 from a point mass on
the first grid node, so the first matrix simply draws from the first marginal.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .copula import FactorMarginal

log = logging.getLogger(__name__)

IPF_TOL = 1e-12
IPF_MAX_SWEEPS = 100_000
DOMINANCE_TOL = 1e-12


class ChainError(ValueError):
    pass


@dataclass(frozen=True)
class TransitionChain:
    """Row-stochastic matrices between consecutive horizons (first horizon is 0)."""

    grid: np.ndarray = field(repr=False)
    horizons: tuple[float, ...]
    matrices: tuple[np.ndarray, ...] = field(repr=False)
    method: str = ""

    def __post_init__(self):
        if len(self.matrices) != len(self.horizons) - 1:
            raise ChainError("need one matrix per consecutive horizon pair")
        J = len(self.grid)
        for P in self.matrices:
            if P.shape != (J, J):
                raise ChainError(f"matrix shape {P.shape} does not match grid size {J}")

    @property
    def n_states(self) -> int:
        return len(self.grid)

    def initial(self) -> np.ndarray:
        """Point mass on the first grid node at t = 0."""
        q0 = np.zeros(self.n_states)
        q0[0] = 1.0
        return q0

    def marginals(self) -> list[np.ndarray]:
        """State distributions at every horizon (including t = 0)."""
        q = self.initial()
        out = [q]
        for P in self.matrices:
            q = q @ P
            out.append(q)
        return out

    def step(self, t_from: float) -> np.ndarray:
        for k, t in enumerate(self.horizons[:-1]):
            if abs(t - t_from) < 1e-12:
                return self.matrices[k]
        raise KeyError(f"no transition starting at {t_from}")


def _family(marginals: Sequence[FactorMarginal]) -> tuple[np.ndarray, list[float], list[np.ndarray]]:
    if not marginals:
        raise ChainError("need at least one marginal")
    grid = marginals[0].grid
    for m in marginals[1:]:
        if m.grid.shape != grid.shape or np.any(m.grid != grid):
            raise ChainError("marginals must share one grid")
    if grid[0] != 0.0:
        raise ChainError("grid must start at x = 0 so the chain can start from a point mass")
    hs = [m.horizon for m in marginals]
    if hs[0] <= 0 or np.any(np.diff(hs) <= 0):
        raise ChainError("marginal horizons must be positive and ascending")
    q0 = np.zeros(grid.size)
    q0[0] = 1.0
    return grid, [0.0] + hs, [q0] + [m.probs for m in marginals]


def _check_dominance(qa: np.ndarray, qb: np.ndarray, ta: float, tb: float) -> None:
    gap = np.max(np.cumsum(qb) - np.cumsum(qa))
    if gap > DOMINANCE_TOL:
        raise ChainError(
            f"marginals at {ta:g}Y and {tb:g}Y violate CDF dominance by {gap:.3e}; "
            "an increasing factor cannot connect them"
        )


def _cdf(q: np.ndarray) -> np.ndarray:
    F = np.cumsum(q)
    F[-1] = 1.0
    return F


def _degenerate_rows(P: np.ndarray, qa: np.ndarray) -> np.ndarray:
    """Rows carrying no probability become point masses on the same state."""
    empty = ~(qa > 0)
    if empty.any():
        idx = np.flatnonzero(empty)
        P[idx] = 0.0
        P[idx, idx] = 1.0
    return P


def comonotonic_coupling(qa: np.ndarray, qb: np.ndarray) -> np.ndarray:
    """Quantile coupling: joint(j, k) = |[F_a(j-1), F_a(j)] ∩ [F_b(k-1), F_b(k)]|."""
    Fa, Fb = _cdf(qa), _cdf(qb)
    lo_a = np.concatenate(([0.0], Fa[:-1]))
    lo_b = np.concatenate(([0.0], Fb[:-1]))
    upper = np.minimum(Fa[:, None], Fb[None, :])
    lower = np.maximum(lo_a[:, None], lo_b[None, :])
    joint = np.maximum(upper - lower, 0.0)
    # rounding in the CDFs can leave sub-ulp mass below the diagonal
    return np.triu(joint)


def comonotonic_chain(marginals: Sequence[FactorMarginal]) -> TransitionChain:
    grid, hs, qs = _family(marginals)
    mats = []
    for a in range(len(qs) - 1):
        _check_dominance(qs[a], qs[a + 1], hs[a], hs[a + 1])
        joint = comonotonic_coupling(qs[a], qs[a + 1])
        mats.append(_rows_from_joint(joint, qs[a]))
    return TransitionChain(grid, tuple(hs), tuple(mats), "comonotonic")


def _rows_from_joint(joint: np.ndarray, qa: np.ndarray) -> np.ndarray:
    rs = joint.sum(axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        P = np.where(rs[:, None] > 0, joint / rs[:, None], 0.0)
    return _degenerate_rows(P, rs)


def _ipf_block(qa: np.ndarray, qb: np.ndarray, tol: float, max_sweeps: int) -> tuple[np.ndarray, int]:
    """Entropy-maximal joint with marginals qa, qb on the upper-triangular mask."""
    n = qa.size
    M = np.triu(np.ones((n, n)))
    a = np.ones(n)
    b = np.ones(n)
    for sweep in range(1, max_sweeps + 1):
        Mb = M @ b
        a = np.where(qa > 0, qa / np.where(Mb > 0, Mb, 1.0), 0.0)
        Ma = M.T @ a
        b = np.where(qb > 0, qb / np.where(Ma > 0, Ma, 1.0), 0.0)
        # columns now match exactly; rows carry the remaining error
        err = np.max(np.abs(a * (M @ b) - qa))
        if err < tol:
            return a[:, None] * M * b[None, :], sweep
    raise ChainError(f"IPF did not converge in {max_sweeps} sweeps (row error {err:.3e})")


def max_entropy_coupling(
    qa: np.ndarray, qb: np.ndarray, tol: float = IPF_TOL, max_sweeps: int = IPF_MAX_SWEEPS
) -> tuple[np.ndarray, int]:
    """IPF on the masked all-ones kernel, split into independent blocks.

    Wherever the two CDFs touch, no mass may cross that node, so the coupling
    is block diagonal there; solving blocks separately avoids the very slow
    IPF convergence of entries that must vanish.
    """
    n = qa.size
    Fa, Fb = _cdf(qa), _cdf(qb)
    cuts = [m + 1 for m in range(n - 1) if Fa[m] - Fb[m] <= DOMINANCE_TOL * max(1.0, Fa[m]) and Fa[m] > 0]
    bounds = [0] + cuts + [n]
    joint = np.zeros((n, n))
    sweeps = 0
    for lo, hi in zip(bounds[:-1], bounds[1:]):
        qa_blk, qb_blk = qa[lo:hi], qb[lo:hi]
        mass = qa_blk.sum()
        if mass <= 0:
            continue
        # the block's two marginals carry the same mass up to the cut tolerance
        qb_blk = qb_blk * (mass / qb_blk.sum()) if qb_blk.sum() > 0 else qb_blk
        blk, s = _ipf_block(qa_blk, qb_blk, tol * max(mass, 1e-300), max_sweeps)
        joint[lo:hi, lo:hi] = blk
        sweeps = max(sweeps, s)
    return joint, sweeps


def max_entropy_chain(
    marginals: Sequence[FactorMarginal], tol: float = IPF_TOL, max_sweeps: int = IPF_MAX_SWEEPS
) -> TransitionChain:
    grid, hs, qs = _family(marginals)
    mats = []
    for a in range(len(qs) - 1):
        _check_dominance(qs[a], qs[a + 1], hs[a], hs[a + 1])
        joint, sweeps = max_entropy_coupling(qs[a], qs[a + 1], tol, max_sweeps)
        log.debug("IPF %g->%g converged in %d sweeps", hs[a], hs[a + 1], sweeps)
        mats.append(_rows_from_joint(joint, qs[a]))
    return TransitionChain(grid, tuple(hs), tuple(mats), "maxent")


def build_chain(marginals: Sequence[FactorMarginal], method: str) -> TransitionChain:
    if method in ("comono", "comonotonic"):
        return comonotonic_chain(marginals)
    if method in ("maxent", "max-entropy"):
        return max_entropy_chain(marginals)
    raise ChainError(f"unknown chain method {method!r}")


@dataclass
class ChainDiagnostics:
    row_sum_error: float
    marginal_error: float
    support_violation: float
    negative_entries: float

    def ok(self, tol: float = 1e-10) -> bool:
        return max(self.row_sum_error, self.marginal_error, self.support_violation, self.negative_entries) < tol

    def to_csv(self) -> str:
        return (
            "row_sum_error,marginal_error,support_violation,negative_entries\n"
            f"{self.row_sum_error:.6e},{self.marginal_error:.6e},{self.support_violation:.6e},{self.negative_entries:.6e}\n"
        )


def validate_chain(chain: TransitionChain, marginals: Sequence[FactorMarginal]) -> ChainDiagnostics:
    """Row sums, marginal push-forward against the calibrated family, and support."""
    row_err = max(float(np.max(np.abs(P.sum(axis=1) - 1.0))) for P in chain.matrices)
    neg = max(float(np.max(np.maximum(-P, 0.0))) for P in chain.matrices)
    support = max(float(np.max(np.abs(np.tril(P, -1)))) for P in chain.matrices)
    pushed = chain.marginals()[1:]
    by_t = {m.horizon: m.probs for m in marginals}
    marg_err = 0.0
    for t, q in zip(chain.horizons[1:], pushed):
        ref = next((v for h, v in by_t.items() if abs(h - t) < 1e-12), None)
        if ref is None:
            marg_err = np.inf
            continue
        marg_err = max(marg_err, float(np.max(np.abs(q - ref))))
    return ChainDiagnostics(row_err, marg_err, support, neg)


def coupling_joint(chain: TransitionChain, k: int) -> np.ndarray:
    """Joint distribution of (X_{t_k}, X_{t_{k+1}})."""
    q = chain.marginals()[k]
    return q[:, None] * chain.matrices[k]


def save_chain(chain: TransitionChain, path: str | Path) -> None:
    """Sparse ``t, j, k, pi`` triplets (t is the start of the period), plus the grid."""
    with open(path, "w") as fh:
        fh.write(f"# method={chain.method}\n")
        fh.write("# horizons=" + ";".join(f"{h:g}" for h in chain.horizons) + "\n")
        fh.write("# grid=" + ";".join(repr(float(x)) for x in chain.grid) + "\n")
        fh.write("t,j,k,pi\n")
        for t, P in zip(chain.horizons[:-1], chain.matrices):
            js, ks = np.nonzero(P)
            for j, k in zip(js, ks):
                fh.write(f"{t:g},{j},{k},{float(P[j, k])!r}\n")


def load_chain(path: str | Path) -> TransitionChain:
    meta = {}
    rows = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                key, _, val = line[1:].strip().partition("=")
                meta[key] = val
                continue
            if line.startswith("t,"):
                continue
            t, j, k, p = line.split(",")
            rows.append((float(t), int(j), int(k), float(p)))
    try:
        horizons = tuple(float(h) for h in meta["horizons"].split(";"))
        grid = np.array([float(x) for x in meta["grid"].split(";")])
    except KeyError as exc:
        raise ChainError(f"chain file missing header field {exc}") from None
    J = grid.size
    mats = [np.zeros((J, J)) for _ in horizons[:-1]]
    index = {h: i for i, h in enumerate(horizons[:-1])}
    for t, j, k, p in rows:
        i = next((index[h] for h in index if abs(h - t) < 1e-9), None)
        if i is None:
            raise ChainError(f"transition at t={t} not among horizons")
        mats[i][j, k] = p
    return TransitionChain(grid, horizons, tuple(mats), meta.get("method", ""))
