"""Markov-chain view of a GFlowNet.

Identifying the source with the sink turns every complete trajectory into a
loop through one root state. This module builds the resulting kernels and
computes their stationary measure, time reversal, mixtures, fundamental
matrix, period and spectrum, together with the balance checks that link the
chain back to the training objectives.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import reduce

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components

from .eigen import eigvals
from .graph import DagGraph, MergedChainGraph, merge_terminal

STATE_CAP = 2000
STRUCTURAL_TOL = 1e-8


class ReducibleChain(ValueError):
    pass


# --------------------------------------------------------------- kernels

def build_kernel(mg: MergedChainGraph, probs, tol: float = 1e-12) -> np.ndarray:
    """Dense kernel from per-edge probabilities aligned with ``mg.edges``."""
    probs = np.asarray(probs, dtype=np.float64)
    if probs.shape != (len(mg.edges),):
        raise ValueError("need one probability per merged edge")
    if np.any(probs <= 0):
        raise ValueError("edge probabilities must be positive")
    n = mg.num_states
    if n > STATE_CAP:
        raise ValueError(f"{n} merged states exceed the dense cap of {STATE_CAP}")
    P = np.zeros((n, n))
    src = np.array([u for u, _ in mg.edges], dtype=np.int64)
    dst = np.array([v for _, v in mg.edges], dtype=np.int64)
    np.add.at(P, (src, dst), probs)
    _check_stochastic(P, tol)
    return P


def _check_stochastic(P: np.ndarray, tol: float = 1e-12) -> None:
    bad = np.flatnonzero(np.abs(P.sum(axis=1) - 1.0) > tol)
    if bad.size:
        raise ValueError(f"row {int(bad[0])} sums to {P[bad[0]].sum():.17g}, not 1")


def forward_kernel(g: DagGraph, pf: np.ndarray) -> tuple[np.ndarray, MergedChainGraph]:
    """Kernel of the merged chain driven by the per-edge forward policy."""
    mg = merge_terminal(g)
    return build_kernel(mg, pf), mg


def policy_mixed_kernel(g: DagGraph, pf: np.ndarray, pb: np.ndarray, alpha: float,
                        strict: bool = True) -> np.ndarray:
    """alpha * P_F + (1 - alpha) * P_B on the merged chain.

    ``pb`` is per DAG edge and its terminal entries must hold P_B(x | sink).
    From the root the backward moves go to terminals; from a terminal one
    forward move returns to the root. With R(x) / Z as the terminal rule the
    root row only sums to 1 at the true normaliser; ``strict=False`` skips the
    stochasticity check so loop products can still be compared.
    """
    mg = merge_terminal(g)
    n = mg.num_states
    P = np.zeros((n, n))
    u = mg.to_merged[g.edge_src]
    v = mg.to_merged[g.edge_dst]
    np.add.at(P, (u, v), alpha * np.asarray(pf))
    np.add.at(P, (v, u), (1.0 - alpha) * np.asarray(pb))
    if strict:
        _check_stochastic(P, 1e-10)
    return P


def is_irreducible(P: np.ndarray) -> bool:
    n_comp, _ = connected_components(csr_matrix(P > 0), directed=True, connection="strong")
    return n_comp == 1


def stationary(P: np.ndarray) -> np.ndarray:
    """Unique stationary distribution of an irreducible kernel."""
    n = P.shape[0]
    if not is_irreducible(P):
        raise ReducibleChain("kernel is reducible; stationary distribution is not unique")
    A = np.eye(n) - P.T
    A[-1, :] = 1.0
    b = np.zeros(n)
    b[-1] = 1.0
    pi = np.linalg.solve(A, b)
    return pi


def reversed_kernel(P: np.ndarray, pi: np.ndarray, tol: float = 1e-10) -> np.ndarray:
    """Time reversal P~[s, s'] = pi[s'] P[s', s] / pi[s]."""
    if np.max(np.abs(pi @ P - pi)) > tol:
        raise ValueError("pi is not stationary for P")
    return (P.T * pi[None, :]) / pi[:, None]


def mixed_kernel(P: np.ndarray, P_other: np.ndarray, alpha: float) -> np.ndarray:
    if P.shape != P_other.shape:
        raise ValueError("kernel shapes differ")
    return alpha * P + (1.0 - alpha) * P_other


def fundamental_matrix(P: np.ndarray, pi: np.ndarray, tol: float = 1e-8) -> np.ndarray:
    """Z = (I - P + Pi)^-1 with Pi the matrix whose rows all equal pi."""
    n = P.shape[0]
    M = np.eye(n) - P + np.tile(pi, (n, 1))
    Z = np.linalg.solve(M, np.eye(n))
    if np.max(np.abs(Z @ M - np.eye(n))) > tol:
        raise np.linalg.LinAlgError("fundamental matrix inversion is inaccurate")
    return Z


# ---------------------------------------------------------- GFNMC criterion

@dataclass
class CriterionReport:
    residuals: np.ndarray
    is_gfnmc: bool
    tolerance: float
    root: int

    @property
    def max_residual(self) -> float:
        return float(np.max(np.abs(self.residuals))) if self.residuals.size else 0.0


def gfnmc_criterion(P: np.ndarray, pi: np.ndarray, Z: np.ndarray, root: int,
                    tol: float = STRUCTURAL_TOL) -> CriterionReport:
    """Residual pi_s (Z_rr - Z_sr) + pi_r (Z_ss - Z_rs) - pi_r for every s != r."""
    r = root
    others = np.array([s for s in range(P.shape[0]) if s != r], dtype=np.int64)
    d = np.diag(Z)
    lhs = pi[others] * (Z[r, r] - Z[others, r]) + pi[r] * (d[others] - Z[r, others])
    res = lhs - pi[r]
    full = np.zeros(P.shape[0])
    full[others] = res
    ok = bool(np.all(np.abs(res) <= tol))
    return CriterionReport(full, ok, tol, r)


def escape_probabilities(P: np.ndarray, root: int) -> np.ndarray:
    """For each s, the probability that the chain started at s reaches the
    root before returning to s (1 at the root itself).

    Computed by a separate absorbing-chain solve per state, independent of the
    fundamental matrix.
    """
    n = P.shape[0]
    out = np.ones(n)
    for s in range(n):
        if s == root:
            continue
        free = np.array([u for u in range(n) if u not in (s, root)], dtype=np.int64)
        # h(u) = P_u[hit root before s], h(root) = 1, h(s) = 0
        h = np.zeros(n)
        h[root] = 1.0
        if free.size:
            A = np.eye(free.size) - P[np.ix_(free, free)]
            h[free] = np.linalg.solve(A, P[free, root])
        out[s] = float(P[s] @ h)
    return out


def has_inner_loop(P: np.ndarray, root: int) -> bool:
    """True when some directed cycle of positive transitions avoids the root."""
    n = P.shape[0]
    keep = np.array([s for s in range(n) if s != root], dtype=np.int64)
    if keep.size == 0:
        return False
    sub = P[np.ix_(keep, keep)] > 0
    if np.any(np.diag(sub)):
        return True
    n_comp, labels = connected_components(csr_matrix(sub), directed=True, connection="strong")
    return n_comp < keep.size


def periodicity(P: np.ndarray, root: int = 0) -> int:
    """Period of an irreducible kernel from BFS levels: gcd over positive
    transitions (u, v) of level(u) + 1 - level(v)."""
    n = P.shape[0]
    adj = P > 0
    level = np.full(n, -1, dtype=np.int64)
    level[root] = 0
    frontier = [root]
    while frontier:
        nxt = []
        for u in frontier:
            for v in np.flatnonzero(adj[u]):
                if level[v] < 0:
                    level[v] = level[u] + 1
                    nxt.append(int(v))
        frontier = nxt
    if np.any(level < 0):
        raise ReducibleChain("not every state is reachable from the root")
    us, vs = np.nonzero(adj)
    diffs = np.abs(level[us] + 1 - level[vs])
    return int(reduce(math.gcd, diffs.tolist(), 0))


def eigen_moduli(P: np.ndarray, cap: int = STATE_CAP) -> tuple[np.ndarray, float]:
    """Eigenvalue moduli sorted descending and the second largest (beta)."""
    if P.shape[0] > cap:
        raise ValueError(f"matrix dimension {P.shape[0]} exceeds cap {cap}")
    mod = np.sort(np.abs(eigvals(P)))[::-1]
    beta = float(mod[1]) if mod.size > 1 else 0.0
    return mod, beta


# --------------------------------------------------------- balance checks

def reversibility_residuals(pi: np.ndarray, pf: np.ndarray, pb: np.ndarray, g: DagGraph,
                            alpha: float) -> np.ndarray:
    """Per DAG edge: log(alpha pi(s) P_F(s'|s)) - log((1 - alpha) pi(s') P_B(s|s')).

    ``pi`` is a positive measure over DAG states including the sink; ``pb``
    holds P_B(x | sink) on terminal edges.
    """
    s, s2 = g.edge_src, g.edge_dst
    lpi = np.log(pi)
    return (math.log(alpha) + lpi[s] + np.log(pf)) - (math.log1p(-alpha) + lpi[s2] + np.log(pb))


def reversibility_check(pi: np.ndarray, pf: np.ndarray, pb: np.ndarray, g: DagGraph,
                        alpha: float) -> float:
    """Largest edge-level violation of reversibility for the alpha-mixed kernel."""
    return float(np.max(np.abs(reversibility_residuals(pi, pf, pb, g, alpha))))


def kolmogorov_loop_check(pi: np.ndarray, P: np.ndarray, loop) -> float:
    """|log(pi(s_0) prod P(s_i | s_i-1)) - log(pi(s_n) prod P(s_i-1 | s_i))|."""
    loop = list(loop)
    if len(loop) < 2 or loop[0] != loop[-1]:
        raise ValueError("loop must be closed (first state == last state)")
    fwd = math.log(pi[loop[0]])
    bwd = math.log(pi[loop[-1]])
    for a, b in zip(loop[:-1], loop[1:]):
        if P[a, b] <= 0 and P[b, a] <= 0:
            raise ValueError(f"transition {a} <-> {b} has zero probability in both directions")
        fwd += math.log(P[a, b]) if P[a, b] > 0 else -math.inf
        bwd += math.log(P[b, a]) if P[b, a] > 0 else -math.inf
    if math.isinf(fwd) or math.isinf(bwd):
        return math.inf
    return abs(fwd - bwd)


def fl_prior_transform(pi_tilde: np.ndarray, energies: np.ndarray) -> np.ndarray:
    """Unnormalised measure pi_tilde * exp(-energy) (entrywise)."""
    pi_tilde = np.asarray(pi_tilde, dtype=np.float64)
    energies = np.asarray(energies, dtype=np.float64)
    if pi_tilde.shape != energies.shape:
        raise ValueError("measure and energies must have equal length")
    return pi_tilde * np.exp(-energies)


# ------------------------------------------------------------------ bundle

@dataclass
class ChainBundle:
    kernel: np.ndarray
    pi: np.ndarray
    reversed: np.ndarray
    mixed: dict[float, np.ndarray]
    fundamental: np.ndarray
    pi_matrix: np.ndarray
    moduli: np.ndarray
    beta: float
    beta_mixed: dict[float, float]
    period: int
    period_mixed: dict[float, int]
    criterion: CriterionReport
    z_state: float | None = None
    merged: MergedChainGraph | None = field(default=None, repr=False)


def analyze_chain(P: np.ndarray, root: int = 0, alphas=(), flows: np.ndarray | None = None,
                  mg: MergedChainGraph | None = None, with_spectrum: bool = True,
                  tol: float = STRUCTURAL_TOL) -> ChainBundle:
    """Full chain summary. ``flows`` (over merged states) sets ``z_state``."""
    pi = stationary(P)
    Pt = reversed_kernel(P, pi)
    Z = fundamental_matrix(P, pi)
    mixed = {float(a): mixed_kernel(P, Pt, a) for a in alphas}
    moduli, beta = eigen_moduli(P) if with_spectrum else (np.array([]), math.nan)
    beta_mixed = {a: eigen_moduli(M)[1] for a, M in mixed.items()} if with_spectrum else {}
    return ChainBundle(
        kernel=P, pi=pi, reversed=Pt, mixed=mixed, fundamental=Z,
        pi_matrix=np.tile(pi, (P.shape[0], 1)), moduli=moduli, beta=beta, beta_mixed=beta_mixed,
        period=periodicity(P, root), period_mixed={a: periodicity(M, root) for a, M in mixed.items()},
        criterion=gfnmc_criterion(P, pi, Z, root, tol),
        z_state=None if flows is None else float(np.sum(flows)), merged=mg,
    )
