"""Linearized stability analysis and layer-dynamics tracing.

The linearization of one reaction-diffusion system around a state U is

    G = -Sigma kron Lhat + J,     J = d f / d vec(U),

with vec taken channel-major (channel 1's n entries first), which makes
the Kronecker term literally block diagonal. Positive-real-part
eigenvalues of G mark unstable directions. The interesting regime is the
Turing one: both parts stable on their own, the sum unstable.

The Jacobian here is built by central finite differences on purpose, so
the analysis stays independent of the differentiation engine it audits.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import model as model_mod
from .graph import Graph, NormalizedLaplacian, dirichlet_energy, normalized_laplacian

DENSE_BUDGET = 4096


class AnalysisError(ValueError):
    """Raised when an analysis request exceeds the dense budget or the
    supplied operands are inconsistent."""


@dataclass
class StabilityReport:
    """Eigenvalue summary of the linearized operator with verdicts.

    ``turing`` is true exactly when the combined operator is unstable
    while the diffusion part (always negative semi-definite) and the
    reaction Jacobian are each stable alone.
    """

    eigenvalues: np.ndarray            # complex, sorted by descending real part
    max_real_part: float
    positive_count: int
    diffusion_stable: bool
    jacobian_stable: bool
    combined_unstable: bool
    turing: bool
    jacobian_max_real_part: float
    diffusion_max_eigenvalue: float
    n: int
    channels: int

    def to_dict(self) -> dict:
        return {
            "eigenvalues": [[float(ev.real), float(ev.imag)] for ev in self.eigenvalues],
            "max_real_part": self.max_real_part,
            "positive_count": self.positive_count,
            "diffusion_stable": self.diffusion_stable,
            "jacobian_stable": self.jacobian_stable,
            "combined_unstable": self.combined_unstable,
            "turing": self.turing,
            "jacobian_max_real_part": self.jacobian_max_real_part,
            "diffusion_max_eigenvalue": self.diffusion_max_eigenvalue,
            "n": self.n,
            "channels": self.channels,
        }


def reaction_jacobian(f, u_point: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Dense nc x nc Jacobian of a reaction map at ``u_point`` by central
    differences, in channel-major vec ordering."""
    u_point = np.asarray(u_point, dtype=np.float64)
    if u_point.ndim != 2:
        raise AnalysisError(f"linearization point must be 2-D, got shape {u_point.shape}")
    n, c = u_point.shape
    nc = n * c
    if nc > DENSE_BUDGET:
        raise AnalysisError(f"dense budget exceeded: n*c = {nc} > {DENSE_BUDGET}")
    J = np.empty((nc, nc))
    for k in range(nc):
        row, col = k % n, k // n
        up = u_point.copy()
        um = u_point.copy()
        up[row, col] += eps
        um[row, col] -= eps
        J[:, k] = (np.asarray(f(up)) - np.asarray(f(um))).ravel(order="F") / (2.0 * eps)
    if not np.all(np.isfinite(J)):
        raise AnalysisError("reaction map produced non-finite values during linearization")
    return J


def stability_matrix(lap: NormalizedLaplacian, sigma: np.ndarray, J: np.ndarray) -> np.ndarray:
    """Assemble G = -Sigma kron Lhat + J with -sigma_j Lhat blocks on the
    diagonal of the Kronecker term."""
    sigma = np.asarray(sigma, dtype=np.float64).ravel()
    c = sigma.size
    n = lap.n
    if J.shape != (n * c, n * c):
        raise AnalysisError(f"Jacobian shape {J.shape} vs expected {(n * c, n * c)}")
    if n * c > DENSE_BUDGET:
        raise AnalysisError(f"dense budget exceeded: n*c = {n * c} > {DENSE_BUDGET}")
    G = np.array(J, dtype=np.float64, copy=True)
    Ld = lap.dense()
    for j in range(c):
        sl = slice(j * n, (j + 1) * n)
        G[sl, sl] -= sigma[j] * Ld
    return G


def eigenvalues(M: np.ndarray, return_vectors: bool = False,
                residual_tol: float = 1e-8):
    """All eigenvalues of a dense (possibly nonsymmetric) matrix, sorted by
    descending real part, delegating to LAPACK's QR iteration.

    With ``return_vectors`` the right eigenvectors come back column-matched
    and each pair is residual-checked against ||M v - lambda v|| <=
    residual_tol * ||M||.
    """
    M = np.asarray(M, dtype=np.float64)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise AnalysisError(f"matrix must be square, got shape {M.shape}")
    if M.shape[0] > DENSE_BUDGET:
        raise AnalysisError(f"dense budget exceeded: k = {M.shape[0]} > {DENSE_BUDGET}")
    if return_vectors:
        w, V = np.linalg.eig(M)
        order = np.lexsort((-w.imag, -w.real))
        w, V = w[order], V[:, order]
        scale = np.linalg.norm(M)
        for i in range(w.size):
            res = np.linalg.norm(M @ V[:, i] - w[i] * V[:, i])
            if res > residual_tol * max(scale, 1e-300):
                raise AnalysisError(
                    f"eigenpair {i} residual {res:.3e} exceeds {residual_tol:.1e} * ||M||")
        return w, V
    w = np.linalg.eigvals(M)
    order = np.lexsort((-w.imag, -w.real))
    return w[order]


def turing_check(lap: NormalizedLaplacian, sigma: np.ndarray, reaction,
                 u_point: np.ndarray, eps: float = 1e-6,
                 tol: float = 1e-9) -> StabilityReport:
    """Linearize the reaction at ``u_point``, assemble the combined
    operator, and classify its spectrum."""
    u_point = np.asarray(u_point, dtype=np.float64)
    n, c = u_point.shape
    sigma = np.asarray(sigma, dtype=np.float64).ravel()
    if sigma.size != c:
        raise AnalysisError(f"{sigma.size} diffusion coefficients for {c} channels")

    J = reaction_jacobian(reaction, u_point, eps=eps)
    G = stability_matrix(lap, sigma, J)
    gw = eigenvalues(G)
    jw = eigenvalues(J)

    Ld = lap.dense()
    diff_op = -np.kron(np.diag(sigma), Ld)
    dw = np.linalg.eigvalsh(0.5 * (diff_op + diff_op.T))
    diffusion_max = float(dw.max()) if dw.size else 0.0

    max_real = float(gw[0].real)
    jac_max_real = float(jw[0].real)
    diffusion_stable = diffusion_max <= tol
    jacobian_stable = jac_max_real < 0.0
    combined_unstable = max_real > tol
    return StabilityReport(
        eigenvalues=gw,
        max_real_part=max_real,
        positive_count=int(np.sum(gw.real > tol)),
        diffusion_stable=diffusion_stable,
        jacobian_stable=jacobian_stable,
        combined_unstable=combined_unstable,
        turing=bool(combined_unstable and jacobian_stable and diffusion_stable),
        jacobian_max_real_part=jac_max_real,
        diffusion_max_eigenvalue=diffusion_max,
        n=n,
        channels=c,
    )


def model_stability(graph: Graph, X: np.ndarray, params, t: float = 0.0,
                    layer: int = 0) -> StabilityReport:
    """Stability report for a trained model, linearized at the embedded
    input (the default linearization point; pass a different layer or time
    to probe other operating points of per-layer variants)."""
    u0 = model_mod.embed_values(params, X)
    f = model_mod.reaction_closure(params, u0, t=t, layer=layer)
    sigma = model_mod.diffusion_values(params, t=t, layer=layer)
    lap = normalized_laplacian(graph)
    return turing_check(lap, sigma, f, u0)


def dynamics_trace(graph: Graph, states: list[np.ndarray]) -> list[dict]:
    """Per-layer records for a forward trace: layer index (0 = initial
    embedding), Dirichlet energy, and Frobenius feature norm."""
    records = []
    for layer, U in enumerate(states):
        records.append({
            "layer": layer,
            "dirichlet_energy": dirichlet_energy(graph, U),
            "feature_norm": float(np.linalg.norm(U)),
        })
    return records
