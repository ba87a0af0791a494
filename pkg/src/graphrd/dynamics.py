"""Layer physics for graph reaction-diffusion networks.

One layer advances node features U by a diffusion term -Lhat U diag(sigma)
and a pointwise learnable reaction f(U, U0, t), either with an explicit
(forward Euler / ResNet) step or an implicit-explicit (IMEX) step. The IMEX
step treats the stiff diffusion implicitly,

    V = U + h f(U, U0, t)
    (I + h sigma_j Lhat) u_j = v_j   for each channel j,

which is the block-diagonal decomposition of the full Kronecker system
(I + h Sigma kron Lhat) vec(U') = vec(V) for diagonal Sigma. The solves use
conjugate gradients with zero initial guess and no preconditioner, and the
backward pass differentiates through the solve implicitly instead of
tracing the CG iterations:

    gbar_b     = (I + h sigma_j Lhat)^{-1} gbar_x
    gbar_sigma = -h * gbar_b^T (Lhat x).

The adjoint solve runs at a tighter tolerance than the forward one; loose
forward residuals are tolerated by training but corrupt gradient checks.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .graph import NormalizedLaplacian


class ConvergenceError(RuntimeError):
    """CG failed to reach the requested tolerance within max_iter."""

    def __init__(self, message: str, residuals: Optional[np.ndarray] = None):
        super().__init__(message)
        self.residuals = residuals


@dataclass
class ReactionWeights:
    """One additive reaction branch: sigma(U K_u + U0 K_u0 + sin(t e_f) K_t).

    ``k_u0`` is None when the branch ignores the initial embedding, and the
    time pair (k_t, e_f) is None outside the time-embedded variant.
    """

    k_u: Tensor
    k_u0: Optional[Tensor] = None
    k_t: Optional[Tensor] = None
    e_f: Optional[Tensor] = None


@dataclass
class ReactionParams:
    """Reaction weights for one layer. ``second`` exists only when the
    multiplicative branch is active; its weights are disjoint from
    ``first``, which the additive term and the product share."""

    first: ReactionWeights
    second: Optional[ReactionWeights] = None


@dataclass
class DiffusionParams:
    """Raw diagonal diffusion parameters, realized via exp(-relu(.))."""

    sigma_hat: Tensor
    e_sigma: Optional[Tensor] = None


@dataclass
class LayerParams:
    reaction: Optional[ReactionParams]
    diffusion: DiffusionParams


REACTION_MODES = ("off", "additive", "additive_u0", "multiplicative", "all")


def _activate(z: Tensor, activation: str) -> Tensor:
    if activation == "relu":
        return ad.relu(z)
    if activation == "identity":
        return z
    raise ValueError(f"unknown activation {activation!r}")


def diffusion_coefficients(params: DiffusionParams, t: float, variant: str) -> Tensor:
    """Realized per-channel diffusion coefficients, a 1 x c tensor in (0, 1].

    Variant T adds a sinusoidal time embedding inside the clamp; variants
    S and I use the time-independent form exp(-relu(sigma_hat)).
    """
    z = params.sigma_hat
    if variant == "T" and params.e_sigma is not None:
        z = ad.add(z, ad.sine(ad.scale(params.e_sigma, t)))
    return ad.exp_neg_relu(z)


def reaction_additive(U: Tensor, U0: Tensor, t: float, weights: ReactionWeights,
                      variant: str, activation: str = "relu",
                      include_u0: bool = True) -> Tensor:
    """Additive reaction branch. The time term is dropped unless the model
    is the time-embedded variant."""
    z = ad.matmul(U, weights.k_u)
    if include_u0 and weights.k_u0 is not None:
        z = ad.add(z, ad.matmul(U0, weights.k_u0))
    if variant == "T" and weights.k_t is not None:
        time_row = ad.sine(ad.scale(weights.e_f, t))
        z = ad.add(z, ad.matmul(ad.broadcast_row(time_row, U.shape[0]), weights.k_t))
    return _activate(z, activation)


def reaction_multiplicative(U: Tensor, U0: Tensor, t: float, params: ReactionParams,
                            variant: str, activation: str = "relu") -> Tensor:
    """Hadamard product of two additive branches with disjoint weights."""
    if params.second is None:
        raise ValueError("multiplicative reaction needs a second weight set")
    f1 = reaction_additive(U, U0, t, params.first, variant, activation)
    f2 = reaction_additive(U, U0, t, params.second, variant, activation)
    return ad.hadamard(f1, f2)


def reaction_total(U: Tensor, U0: Tensor, t: float, params: Optional[ReactionParams],
                   variant: str, mode: str, activation: str = "relu") -> Optional[Tensor]:
    """Full reaction term for the requested mode; None when reaction is off.

    additive      -- single branch, initial embedding excluded
    additive_u0   -- single branch including the initial embedding
    multiplicative-- product of the two branches
    all           -- branch one plus the product, with branch one shared
    """
    if mode == "off":
        return None
    if params is None:
        raise ValueError(f"reaction mode {mode!r} needs reaction parameters")
    if mode == "additive":
        return reaction_additive(U, U0, t, params.first, variant, activation, include_u0=False)
    if mode == "additive_u0":
        return reaction_additive(U, U0, t, params.first, variant, activation)
    if mode == "multiplicative":
        return reaction_multiplicative(U, U0, t, params, variant, activation)
    if mode == "all":
        f1 = reaction_additive(U, U0, t, params.first, variant, activation)
        f2 = reaction_additive(U, U0, t, params.second, variant, activation)
        return ad.add(f1, ad.hadamard(f1, f2))
    raise ValueError(f"unknown reaction mode {mode!r}")


def explicit_step(U: Tensor, lap: NormalizedLaplacian, coeffs: Tensor,
                  f: Optional[Tensor], h: float) -> Tensor:
    """Forward Euler step U - h (Lhat U diag(coeffs) - f)."""
    if h <= 0:
        raise ValueError(f"step size must be positive, got {h}")
    diff = ad.hadamard(ad.sparse_apply(lap, U), ad.broadcast_row(coeffs, U.shape[0]))
    rhs = diff if f is None else ad.sub(diff, f)
    return ad.sub(U, ad.scale(rhs, h))


# ---------------------------------------------------------------------------
# Conjugate gradients for (I + h kappa_j Lhat) x_j = b_j
# ---------------------------------------------------------------------------

def _shifted_apply(lap: NormalizedLaplacian, kappas: np.ndarray, h: float,
                   X: np.ndarray) -> np.ndarray:
    return X + h * (lap.csr @ X) * kappas


def cg_solve_channels(lap: NormalizedLaplacian, kappas: np.ndarray, h: float,
                      B: np.ndarray, tol: float = 1e-2, max_iter: int = 50) -> np.ndarray:
    """Solve (I + h kappa_j Lhat) x_j = b_j for every column j at once.

    Columns iterate independently (own alpha, beta, and stopping test) but
    share the sparse matvec. Columns with kappa_j = 0 or b_j = 0 are
    returned directly without iterating. Convergence is declared at
    ||r_j|| <= tol * ||b_j||.
    """
    kappas = np.asarray(kappas, dtype=np.float64).ravel()
    B = np.asarray(B, dtype=np.float64)
    squeeze = B.ndim == 1
    if squeeze:
        B = B.reshape(-1, 1)
    if B.shape[0] != lap.n or B.shape[1] != kappas.size:
        raise ValueError(f"rhs shape {B.shape} vs n={lap.n}, channels={kappas.size}")
    if not np.all(np.isfinite(B)) or not np.all(np.isfinite(kappas)):
        raise ValueError("non-finite right-hand side or coefficients")
    if np.any(kappas < 0):
        raise ValueError("diffusion coefficients must be non-negative")
    if h <= 0:
        raise ValueError(f"step size must be positive, got {h}")

    X = np.zeros_like(B)
    bnorm = np.sqrt(np.sum(B * B, axis=0))
    direct = (kappas == 0.0) | (bnorm == 0.0)
    X[:, direct & (bnorm > 0.0)] = B[:, direct & (bnorm > 0.0)]

    active = ~direct
    if not np.any(active):
        return X[:, 0] if squeeze else X

    ka = kappas[active]
    Ba = B[:, active]
    thresh = (tol * bnorm[active]) ** 2

    Xa = np.zeros_like(Ba)
    R = Ba.copy()
    P = R.copy()
    rs = np.sum(R * R, axis=0)
    live = rs > thresh

    for _ in range(max_iter):
        if not np.any(live):
            break
        Q = _shifted_apply(lap, ka, h, P)
        pq = np.sum(P * Q, axis=0)
        alpha = np.zeros_like(rs)
        np.divide(rs, pq, out=alpha, where=live & (pq > 0))
        Xa += alpha * P
        R -= alpha * Q
        rs_new = np.sum(R * R, axis=0)
        live_new = live & (rs_new > thresh)
        beta = np.zeros_like(rs)
        np.divide(rs_new, rs, out=beta, where=live_new)
        P = R + beta * P
        rs = rs_new
        live = live_new
    if np.any(live):
        rel = np.sqrt(rs) / np.maximum(bnorm[active], 1e-300)
        raise ConvergenceError(
            f"CG did not reach tol={tol} within {max_iter} iterations; "
            f"worst relative residual {rel[live].max():.3e}",
            residuals=rel,
        )

    X[:, active] = Xa
    return X[:, 0] if squeeze else X


def cg_solve(lap: NormalizedLaplacian, kappa: float, h: float, b: np.ndarray,
             tol: float = 1e-2, max_iter: int = 50) -> np.ndarray:
    """Solve (I + h kappa Lhat) x = b for one vector.

    kappa = 0 returns b immediately (identity system, zero iterations),
    and a zero right-hand side returns zero.
    """
    b = np.asarray(b, dtype=np.float64)
    if b.ndim != 1:
        raise ValueError(f"cg_solve expects a vector, got shape {b.shape}")
    return cg_solve_channels(lap, np.array([kappa]), h, b, tol=tol, max_iter=max_iter)


def implicit_solve_adjoint(lap: NormalizedLaplacian, kappa: float, h: float,
                           x: np.ndarray, g_x: np.ndarray,
                           tol: float = 1e-4, max_iter: int = 400) -> tuple[np.ndarray, float]:
    """Gradients of the solve x = (I + h kappa Lhat)^{-1} b.

    Returns (gbar_b, gbar_kappa) where gbar_b solves the same symmetric
    system against the upstream gradient and
    gbar_kappa = -h * gbar_b^T (Lhat x).
    """
    g_b = cg_solve(lap, kappa, h, np.asarray(g_x, dtype=np.float64).ravel(),
                   tol=tol, max_iter=max_iter)
    g_kappa = -h * float(g_b @ (lap.csr @ np.asarray(x, dtype=np.float64).ravel()))
    return g_b, g_kappa


def implicit_diffusion(lap: NormalizedLaplacian, v: Tensor, coeffs: Tensor, h: float,
                       tol: float = 1e-2, max_iter: int = 50,
                       adjoint_tol: float = 1e-4, adjoint_max_iter: int = 400) -> Tensor:
    """Differentiable per-channel solve (I + h kappa_j Lhat) u_j = v_j."""
    if coeffs.shape[0] != 1 or coeffs.shape[1] != v.shape[1]:
        raise ad.ShapeError(f"coefficients {coeffs.shape} vs features {v.shape}")
    tape = v.tape
    kappas = coeffs.values.ravel().copy()
    X = cg_solve_channels(lap, kappas, h, v.values, tol=tol, max_iter=max_iter)

    def bwd(g: np.ndarray) -> None:
        GB = cg_solve_channels(lap, kappas, h, g, tol=adjoint_tol, max_iter=adjoint_max_iter)
        tape.add_grad(v, GB)
        LX = lap.csr @ X
        g_kappa = -h * np.einsum("ij,ij->j", GB, LX)
        tape.add_grad(coeffs, g_kappa.reshape(1, -1))

    return tape.record(X, (v, coeffs), bwd, "implicit_diffusion")


def imex_step(U: Tensor, U0: Tensor, lap: NormalizedLaplacian, params: LayerParams,
              h: float, t: float, variant: str, mode: str, *,
              activation: str = "relu", hidden_dropout: float = 0.0,
              training: bool = False, rng: Optional[np.random.Generator] = None,
              cg_tol: float = 1e-2, cg_max_iter: int = 50,
              adjoint_tol: float = 1e-4, adjoint_max_iter: int = 400) -> Tensor:
    """One IMEX layer: explicit reaction substep, then the implicit
    per-channel diffusion solve."""
    if h <= 0:
        raise ValueError(f"step size must be positive, got {h}")
    f = reaction_total(U, U0, t, params.reaction, variant, mode, activation)
    if f is not None and training and hidden_dropout > 0:
        f = ad.dropout(f, hidden_dropout, rng, training)
    v = U if f is None else ad.add(U, ad.scale(f, h))
    coeffs = diffusion_coefficients(params.diffusion, t, variant)
    return implicit_diffusion(lap, v, coeffs, h, tol=cg_tol, max_iter=cg_max_iter,
                              adjoint_tol=adjoint_tol, adjoint_max_iter=adjoint_max_iter)
