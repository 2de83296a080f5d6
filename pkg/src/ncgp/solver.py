"""Probabilistic linear solver over representer weights.

Solves (K + W^-1) v = rhs one projection at a time. Each iteration picks
an action s from a policy, observes the projected residual s'r, and grows
a low-rank root Q of the approximate inverse C = Q Q'. Actions and their
kernel products are buffered so later solves against a different W can be
seeded for free: the virtual solver run rebuilds C_0 = S (S' Khat S)^-1 S'
from the cache, optionally truncating its eigendecomposition to bound
memory.
"""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .exceptions import DimensionMismatch, InvalidInput, PolicyExhausted
from .linalg import LowRankRoot, apply_lowrank, sym_eigh_truncated

logger = logging.getLogger(__name__)

# eta <= ETA_BREAKDOWN_RTOL * |s| * |z| terminates the solve; slightly
# stricter than eta <= 0 to catch ill-conditioning before it corrupts Q
ETA_BREAKDOWN_RTOL = 1e-12

# eigenvalues of the recycled Gram matrix at or below this relative floor
# are dropped before inversion; numerically dependent recycled actions
# otherwise produce unstable 1/sqrt(eigenvalue) scalings
EIGENVALUE_FLOOR_RTOL = 1e-10


class Termination(str, enum.Enum):
    CONVERGED = "converged"
    MAX_ITERS = "max_iters"
    ETA_BREAKDOWN = "eta_breakdown"


@dataclass
class RegressionSystem:
    """Operator handles and right-hand side of one regression problem."""

    apply_kernel: Callable[[np.ndarray], np.ndarray]
    apply_noise: Callable[[np.ndarray], np.ndarray]
    rhs: np.ndarray

    def __post_init__(self):
        self.rhs = np.asarray(self.rhs, dtype=np.float64)
        if not np.isfinite(self.rhs).all():
            raise InvalidInput("right-hand side contains non-finite entries")

    @property
    def dim(self):
        return self.rhs.shape[0]


class SolverBuffers:
    """Past actions S and their kernel products T = K S, column-buffered.

    Appends amortize through capacity doubling; views returned by
    :attr:`actions` / :attr:`products` stay valid until the next append or
    replace.
    """

    def __init__(self, dim: int):
        self.dim = dim
        self.count = 0
        self._actions = np.empty((dim, 0))
        self._products = np.empty((dim, 0))

    @classmethod
    def empty(cls, dim: int) -> "SolverBuffers":
        return cls(dim)

    @property
    def actions(self) -> np.ndarray:
        return self._actions[:, :self.count]

    @property
    def products(self) -> np.ndarray:
        return self._products[:, :self.count]

    def append(self, action: np.ndarray, product: np.ndarray) -> None:
        if action.shape != (self.dim,) or product.shape != (self.dim,):
            raise DimensionMismatch("buffer columns must have length dim")
        if self.count == self._actions.shape[1]:
            cap = max(8, 2 * self.count)
            self._actions = self._grow(self._actions, cap)
            self._products = self._grow(self._products, cap)
        self._actions[:, self.count] = action
        self._products[:, self.count] = product
        self.count += 1

    def replace(self, actions: np.ndarray, products: np.ndarray) -> None:
        if actions.shape != products.shape or actions.shape[0] != self.dim:
            raise DimensionMismatch("replacement buffers must share shape (dim, B)")
        self._actions = np.array(actions)
        self._products = np.array(products)
        self.count = actions.shape[1]

    def _grow(self, arr, cap):
        out = np.empty((self.dim, cap))
        out[:, :self.count] = arr[:, :self.count]
        return out


class PolicyKind(str, enum.Enum):
    UNIT_VECTOR = "unit"
    RESIDUAL = "residual"


class UnitVectorPolicy:
    """Cycles the standard basis e_1, e_2, ... in data order.

    Conditioning on the first j unit vectors reproduces exact regression
    on the first j coordinates, which in CN layout means the first data
    points with all their outputs.
    """

    kind = PolicyKind.UNIT_VECTOR

    def __init__(self, dim: int):
        self.dim = dim
        self._next = 0

    def next_action(self, residual: np.ndarray) -> np.ndarray:
        if self._next >= self.dim:
            raise PolicyExhausted(f"all {self.dim} unit actions used")
        s = np.zeros(self.dim)
        s[self._next] = 1.0
        self._next += 1
        return s


class ResidualPolicy:
    """Returns the current residual, the conjugate-gradient action choice."""

    kind = PolicyKind.RESIDUAL

    def __init__(self, dim: int):
        self.dim = dim

    def next_action(self, residual: np.ndarray) -> np.ndarray:
        return residual.copy()


def make_policy(kind, dim: int):
    kind = PolicyKind(kind)
    if kind == PolicyKind.UNIT_VECTOR:
        return UnitVectorPolicy(dim)
    return ResidualPolicy(dim)


@dataclass(frozen=True)
class InnerConfig:
    """Iteration budget and residual tolerances of one inner solve."""

    max_iters: int
    abs_tol: float = 1e-5
    rel_tol: float = 1e-5

    def __post_init__(self):
        if self.max_iters < 0:
            raise InvalidInput("max_iters must be nonnegative")
        if self.abs_tol <= 0 or self.rel_tol <= 0:
            raise InvalidInput("tolerances must be positive")


def inner_stop(residual: np.ndarray, rhs: np.ndarray, iters: int,
               config: InnerConfig) -> bool:
    """True when |r| < max(abs_tol, rel_tol |rhs|) or the budget is spent."""
    if iters >= config.max_iters:
        return True
    bound = max(config.abs_tol, config.rel_tol * float(np.linalg.norm(rhs)))
    return float(np.linalg.norm(residual)) < bound


@dataclass
class IterationRecord:
    """Per-iteration trace: index, pre-action residual norm, alpha, eta."""

    iteration: int
    residual_norm: float
    alpha: float
    eta: float


@dataclass
class SolverOutcome:
    weights: np.ndarray
    root: LowRankRoot
    buffers: SolverBuffers
    iterations_run: int
    termination: Termination
    kernel_matvecs: int
    residual_norm: float
    records: list[IterationRecord] = field(default_factory=list)


def itergp_solve(system: RegressionSystem, policy, buffers: SolverBuffers,
                 config: InnerConfig,
                 initial_root: Optional[LowRankRoot] = None,
                 on_iteration=None) -> SolverOutcome:
    """Run the projection solver from a (possibly recycled) initial belief.

    Per iteration: the residual r = rhs - K v - W^-1 v is recomputed
    explicitly, the policy picks an action s, the observation alpha = s'r
    is taken, t = K s is cached in the buffers, the Khat-deflated direction
    d = s - C (t + W^-1 s) is normalized by eta = z'd into a new column of
    Q, and v += (alpha / eta) d.

    ``on_iteration(j, weights, root, matvecs)`` fires after each completed
    iteration with read-only views of the current state.
    """
    dim = system.dim
    if buffers.dim != dim:
        raise DimensionMismatch(f"buffer dim {buffers.dim} != system dim {dim}")
    if initial_root is None:
        initial_root = LowRankRoot.zero(dim)
    if initial_root.dim != dim:
        raise DimensionMismatch(
            f"initial root dim {initial_root.dim} != system dim {dim}")

    base = initial_root.rank
    q_store = np.empty((dim, base + config.max_iters))
    q_store[:, :base] = initial_root.columns
    ncols = base

    rhs = system.rhs
    v = apply_lowrank(initial_root, rhs) if base else np.zeros(dim)
    v_is_zero = base == 0
    matvecs = 0
    records: list[IterationRecord] = []
    rnorm = float(np.linalg.norm(rhs))
    tol = max(config.abs_tol, config.rel_tol * float(np.linalg.norm(rhs)))

    j = 0
    termination = Termination.MAX_ITERS
    while True:
        if j >= config.max_iters:
            termination = Termination.MAX_ITERS
            break
        if v_is_zero:
            r = rhs.copy()
        else:
            r = rhs - system.apply_kernel(v) - system.apply_noise(v)
            matvecs += 1
        rnorm = float(np.linalg.norm(r))
        if rnorm < tol:
            termination = Termination.CONVERGED
            break
        try:
            s = policy.next_action(r)
        except PolicyExhausted:
            # nothing left to condition on; treat like an exhausted budget
            termination = Termination.MAX_ITERS
            break
        alpha = float(s @ r)
        t = system.apply_kernel(s)
        matvecs += 1
        buffers.append(s, t)
        z = t + system.apply_noise(s)
        d = s if ncols == 0 else s - q_store[:, :ncols] @ (q_store[:, :ncols].T @ z)
        eta = float(z @ d)
        if eta <= ETA_BREAKDOWN_RTOL * float(np.linalg.norm(s)) * float(np.linalg.norm(z)):
            termination = Termination.ETA_BREAKDOWN
            logger.warning("solver breakdown at iteration %d: eta=%.3e", j + 1, eta)
            records.append(IterationRecord(j + 1, rnorm, alpha, eta))
            break
        q_store[:, ncols] = d / np.sqrt(eta)
        ncols += 1
        v = v + (alpha / eta) * d
        v_is_zero = False
        j += 1
        records.append(IterationRecord(j, rnorm, alpha, eta))
        if on_iteration is not None:
            on_iteration(j, v, LowRankRoot(q_store[:, :ncols]), matvecs)

    return SolverOutcome(
        weights=v,
        root=LowRankRoot(q_store[:, :ncols]),
        buffers=buffers,
        iterations_run=j,
        termination=termination,
        kernel_matvecs=matvecs,
        residual_norm=rnorm,
        records=records,
    )


def virtual_solver_run(buffers: SolverBuffers, apply_noise,
                       rank_bound: Optional[int] = None):
    """Rebuild an initial belief from cached actions, optionally compressed.

    Forms M = S'(T + W^-1 S) with the *current* noise operator, keeps the
    eigenpairs above the numerical floor (at most ``rank_bound`` of them,
    largest first), rotates the buffers into that basis, and returns the
    root Q_0 = S_new diag(eigenvalues)^-1/2 together with the updated
    buffers. No kernel products are spent.
    """
    dim = buffers.dim
    if buffers.count == 0:
        return LowRankRoot.zero(dim), buffers
    if rank_bound is not None and rank_bound < 0:
        raise InvalidInput("rank bound must be nonnegative")
    S = buffers.actions
    T = buffers.products
    M = S.T @ (T + apply_noise(S))
    pairs = sym_eigh_truncated(M, buffers.count)
    lam_max = float(pairs.values[0]) if pairs.values.size else 0.0
    keep = pairs.values > EIGENVALUE_FLOOR_RTOL * max(lam_max, 0.0)
    dropped = int(buffers.count - keep.sum())
    if dropped:
        logger.warning(
            "virtual solver run dropped %d eigenpair(s) at the numerical floor",
            dropped)
    values = pairs.values[keep]
    vectors = pairs.vectors[:, keep]
    if rank_bound is not None and values.shape[0] > rank_bound:
        values = values[:rank_bound]
        vectors = vectors[:, :rank_bound]
    S_new = S @ vectors
    T_new = T @ vectors
    buffers.replace(S_new, T_new)
    if values.size == 0:
        return LowRankRoot.zero(dim), buffers
    root = LowRankRoot(S_new / np.sqrt(values)[None, :])
    return root, buffers
