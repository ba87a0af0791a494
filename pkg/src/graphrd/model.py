"""Full model assembly: input dropout, embedding, L reaction-diffusion
layers, output dropout, and an affine readout.

Three weight-sharing variants are supported:

    I -- independent weights per layer,
    S -- one weight set shared by all layers,
    T -- shared weights plus sinusoidal time embeddings in both the
         reaction term and the diffusion coefficients.

Parameters live in a flat name -> array dict so optimizers can group them
(embedding/readout, diffusion, reaction) and checkpoints stay simple.
"""

from __future__ import annotations

import io
import json
import os
import tempfile
from dataclasses import dataclass, asdict
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .dynamics import (DiffusionParams, LayerParams, ReactionParams,
                       ReactionWeights, REACTION_MODES, diffusion_coefficients,
                       explicit_step, imex_step, reaction_total)
from .graph import Graph, NormalizedLaplacian, normalized_laplacian

VARIANTS = ("I", "S", "T")
INTEGRATIONS = ("explicit", "imex")
ACTIVATIONS = ("relu", "identity")


class ConfigError(ValueError):
    """Raised for structurally invalid model configuration."""


@dataclass(frozen=True)
class ModelConfig:
    """Architecture and solver settings.

    ``activation`` applies to the reaction branches only; the embedding
    always uses ReLU. ``cg_tol`` is the forward solve tolerance and
    ``cg_adjoint_tol`` the (tighter) backward one.
    """

    c_in: int
    c_out: int
    variant: str = "I"
    layers: int = 2
    channels: int = 16
    h: float = 0.5
    integration: str = "imex"
    reaction_mode: str = "all"
    activation: str = "relu"
    input_dropout: float = 0.0
    output_dropout: float = 0.0
    hidden_dropout: float = 0.0
    seed: int = 0
    cg_tol: float = 1e-2
    cg_max_iter: int = 50
    cg_adjoint_tol: float = 1e-4
    cg_adjoint_max_iter: int = 400

    def __post_init__(self):
        if self.c_in < 1 or self.c_out < 1:
            raise ConfigError(f"c_in and c_out must be >= 1, got {self.c_in}, {self.c_out}")
        if self.layers < 1:
            raise ConfigError(f"layers must be >= 1, got {self.layers}")
        if self.channels < 1:
            raise ConfigError(f"channels must be >= 1, got {self.channels}")
        if self.h <= 0:
            raise ConfigError(f"step size must be positive, got {self.h}")
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.integration not in INTEGRATIONS:
            raise ConfigError(f"integration must be one of {INTEGRATIONS}, got {self.integration!r}")
        if self.reaction_mode not in REACTION_MODES:
            raise ConfigError(f"reaction_mode must be one of {REACTION_MODES}, got {self.reaction_mode!r}")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"activation must be one of {ACTIVATIONS}, got {self.activation!r}")
        for name in ("input_dropout", "output_dropout", "hidden_dropout"):
            p = getattr(self, name)
            if not 0.0 <= p <= 0.9:
                raise ConfigError(f"{name} must lie in [0, 0.9], got {p}")
        if self.cg_tol <= 0 or self.cg_adjoint_tol <= 0:
            raise ConfigError("solver tolerances must be positive")
        if self.cg_max_iter < 1 or self.cg_adjoint_max_iter < 1:
            raise ConfigError("solver iteration caps must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f for f in cls.__dataclass_fields__}
        return cls(**{k: v for k, v in d.items() if k in known})


def _branch_names(mode: str) -> tuple[str, ...]:
    if mode in ("multiplicative", "all"):
        return ("react1", "react2")
    if mode in ("additive", "additive_u0"):
        return ("react1",)
    return ()


def _layer_prefixes(cfg: ModelConfig) -> list[str]:
    if cfg.variant == "I":
        return [f"layers.{i}" for i in range(cfg.layers)]
    return ["shared"]


def expected_param_count(cfg: ModelConfig) -> int:
    """Closed-form scalar parameter count; shared variants are independent
    of depth, the per-layer variant is affine in it."""
    c, ci, co = cfg.channels, cfg.c_in, cfg.c_out
    embed = ci * c + c
    readout = c * co + co
    per_branch = c * c
    if cfg.reaction_mode != "additive" and cfg.reaction_mode != "off":
        per_branch += c * c
    if cfg.variant == "T":
        per_branch += c * c + c
    per_layer = len(_branch_names(cfg.reaction_mode)) * per_branch
    per_layer += c  # sigma_hat
    if cfg.variant == "T":
        per_layer += c  # e_sigma
    return embed + readout + len(_layer_prefixes(cfg)) * per_layer


def group_of(name: str) -> str:
    """Optimizer group for a parameter name: embed_out, diffusion, reaction."""
    if name.startswith(("embed.", "readout.")):
        return "embed_out"
    if ".diff." in name:
        return "diffusion"
    return "reaction"


@dataclass
class ModelParams:
    """All learnable state, as a flat name -> float64 array dict."""

    cfg: ModelConfig
    values: dict[str, np.ndarray]

    def copy(self) -> "ModelParams":
        return ModelParams(self.cfg, {k: v.copy() for k, v in self.values.items()})

    def param_count(self) -> int:
        return int(sum(v.size for v in self.values.values()))


def init_params(cfg: ModelConfig, seed: Optional[int] = None) -> ModelParams:
    """Glorot-uniform weights (bound sqrt(6 / (fan_in + fan_out))), zero
    biases, and zero sigma_hat so the diffusion coefficients start at one."""
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    c, ci, co = cfg.channels, cfg.c_in, cfg.c_out

    def glorot(rows: int, cols: int) -> np.ndarray:
        bound = np.sqrt(6.0 / (rows + cols))
        return rng.uniform(-bound, bound, size=(rows, cols))

    vals: dict[str, np.ndarray] = {}
    vals["embed.weight"] = glorot(ci, c)
    vals["embed.bias"] = np.zeros((1, c))
    for prefix in _layer_prefixes(cfg):
        for branch in _branch_names(cfg.reaction_mode):
            vals[f"{prefix}.{branch}.k_u"] = glorot(c, c)
            if cfg.reaction_mode != "additive":
                vals[f"{prefix}.{branch}.k_u0"] = glorot(c, c)
            if cfg.variant == "T":
                vals[f"{prefix}.{branch}.k_t"] = glorot(c, c)
                vals[f"{prefix}.{branch}.e_f"] = glorot(1, c)
        vals[f"{prefix}.diff.sigma_hat"] = np.zeros((1, c))
        if cfg.variant == "T":
            vals[f"{prefix}.diff.e_sigma"] = glorot(1, c)
    vals["readout.weight"] = glorot(c, co)
    vals["readout.bias"] = np.zeros((1, co))

    params = ModelParams(cfg, vals)
    assert params.param_count() == expected_param_count(cfg)
    return params


def _layer_params(leaves: dict[str, Tensor], cfg: ModelConfig, layer: int) -> LayerParams:
    prefix = f"layers.{layer}" if cfg.variant == "I" else "shared"

    def branch(name: str) -> ReactionWeights:
        return ReactionWeights(
            k_u=leaves[f"{prefix}.{name}.k_u"],
            k_u0=leaves.get(f"{prefix}.{name}.k_u0"),
            k_t=leaves.get(f"{prefix}.{name}.k_t"),
            e_f=leaves.get(f"{prefix}.{name}.e_f"),
        )

    branches = _branch_names(cfg.reaction_mode)
    reaction = None
    if branches:
        reaction = ReactionParams(
            first=branch("react1"),
            second=branch("react2") if len(branches) > 1 else None,
        )
    diffusion = DiffusionParams(
        sigma_hat=leaves[f"{prefix}.diff.sigma_hat"],
        e_sigma=leaves.get(f"{prefix}.diff.e_sigma"),
    )
    return LayerParams(reaction=reaction, diffusion=diffusion)


def embed_input(x: Tensor, weight: Tensor, bias: Tensor, input_dropout: float = 0.0,
                training: bool = False, rng: Optional[np.random.Generator] = None) -> Tensor:
    """U0 = relu(dropout(X) W + b); dropout is active only in training."""
    x = ad.dropout(x, input_dropout, rng, training)
    return ad.relu(ad.add(ad.matmul(x, weight), ad.broadcast_row(bias, x.shape[0])))


def readout(u: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Affine map from hidden node state to task outputs (raw logits)."""
    return ad.add(ad.matmul(u, weight), ad.broadcast_row(bias, u.shape[0]))


@dataclass
class ForwardPass:
    """Output logits plus the leaf tensors whose .grad fields are filled by
    a subsequent backward call. ``trace`` holds per-layer feature snapshots
    (layer 0 first) when requested."""

    output: Tensor
    leaves: dict[str, Tensor]
    tape: Tape
    trace: Optional[list[np.ndarray]] = None


def forward(X: np.ndarray, graph: Graph, params: ModelParams, *,
            t_offset: float = 0.0, training: bool = False,
            rng: Optional[np.random.Generator] = None, trace: bool = False,
            lap: Optional[NormalizedLaplacian] = None,
            check_finite: bool = False) -> ForwardPass:
    """Run the full architecture once on a fresh tape.

    Layer l (zero-based) integrates from time t_offset + h*l. Raw logits
    are returned for classification; regression uses them as-is.
    """
    cfg = params.cfg
    X = np.asarray(X, dtype=np.float64)
    if X.shape != (graph.n, cfg.c_in):
        raise ad.ShapeError(f"features must be ({graph.n}, {cfg.c_in}), got {X.shape}")
    if lap is None:
        lap = normalized_laplacian(graph)

    tape = Tape(check_finite=check_finite)
    leaves = {name: tape.leaf(v, name) for name, v in params.values.items()}
    x = tape.leaf(X, "input")

    u = embed_input(x, leaves["embed.weight"], leaves["embed.bias"],
                    cfg.input_dropout, training, rng)
    u0 = u
    snaps = [u.values.copy()] if trace else None

    for l in range(cfg.layers):
        t_l = t_offset + cfg.h * l
        lp = _layer_params(leaves, cfg, l)
        if cfg.integration == "imex":
            u = imex_step(u, u0, lap, lp, cfg.h, t_l, cfg.variant, cfg.reaction_mode,
                          activation=cfg.activation, hidden_dropout=cfg.hidden_dropout,
                          training=training, rng=rng, cg_tol=cfg.cg_tol,
                          cg_max_iter=cfg.cg_max_iter, adjoint_tol=cfg.cg_adjoint_tol,
                          adjoint_max_iter=cfg.cg_adjoint_max_iter)
        else:
            f = reaction_total(u, u0, t_l, lp.reaction, cfg.variant,
                               cfg.reaction_mode, cfg.activation)
            if f is not None and training and cfg.hidden_dropout > 0:
                f = ad.dropout(f, cfg.hidden_dropout, rng, training)
            coeffs = diffusion_coefficients(lp.diffusion, t_l, cfg.variant)
            u = explicit_step(u, lap, coeffs, f, cfg.h)
        if trace:
            snaps.append(u.values.copy())

    u = ad.dropout(u, cfg.output_dropout, rng, training)
    y = readout(u, leaves["readout.weight"], leaves["readout.bias"])
    return ForwardPass(output=y, leaves=leaves, tape=tape, trace=snaps)


# ---------------------------------------------------------------------------
# Untracked evaluation helpers (scratch tapes, values only)
# ---------------------------------------------------------------------------

def embed_values(params: ModelParams, X: np.ndarray) -> np.ndarray:
    """Initial embedding U0 in eval mode, values only."""
    tape = Tape()
    x = tape.leaf(np.asarray(X, dtype=np.float64))
    w = tape.leaf(params.values["embed.weight"])
    b = tape.leaf(params.values["embed.bias"])
    return embed_input(x, w, b).values.copy()


def diffusion_values(params: ModelParams, t: float = 0.0, layer: int = 0) -> np.ndarray:
    """Realized diffusion coefficients as a flat length-c vector."""
    cfg = params.cfg
    prefix = f"layers.{layer}" if cfg.variant == "I" else "shared"
    tape = Tape()
    dp = DiffusionParams(
        sigma_hat=tape.leaf(params.values[f"{prefix}.diff.sigma_hat"]),
        e_sigma=(tape.leaf(params.values[f"{prefix}.diff.e_sigma"])
                 if f"{prefix}.diff.e_sigma" in params.values else None),
    )
    return diffusion_coefficients(dp, t, cfg.variant).values.ravel().copy()


def reaction_closure(params: ModelParams, u0: np.ndarray, t: float = 0.0, layer: int = 0):
    """Value-level reaction map U -> f(U, U0, t) at fixed parameters,
    suitable for numerical linearization."""
    cfg = params.cfg
    u0 = np.asarray(u0, dtype=np.float64)
    if cfg.reaction_mode == "off":
        return lambda U: np.zeros_like(np.asarray(U, dtype=np.float64))
    prefix = f"layers.{layer}" if cfg.variant == "I" else "shared"

    def f(U: np.ndarray) -> np.ndarray:
        tape = Tape()
        leaves = {name: tape.leaf(v) for name, v in params.values.items()
                  if name.startswith(prefix)}
        ut = tape.leaf(np.asarray(U, dtype=np.float64))
        u0t = tape.leaf(u0)
        lp = _layer_params(leaves, cfg, layer)
        out = reaction_total(ut, u0t, t, lp.reaction, cfg.variant,
                             cfg.reaction_mode, cfg.activation)
        return out.values.copy()

    return f


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

_CFG_KEY = "__config__"


def save_checkpoint(path: str, params: ModelParams) -> None:
    """Write config plus all named parameter arrays to one npz container.

    The file holds a JSON-encoded config under ``__config__`` and one
    float64 array per parameter name. Writes are atomic (temp + rename).
    """
    buf = io.BytesIO()
    np.savez(buf, **{_CFG_KEY: json.dumps(params.cfg.to_dict())}, **params.values)
    directory = os.path.dirname(os.path.abspath(path)) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(buf.getvalue())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_checkpoint(path: str) -> ModelParams:
    with np.load(path) as data:
        if _CFG_KEY not in data:
            raise ConfigError(f"{path} is not a model checkpoint (missing config entry)")
        cfg = ModelConfig.from_dict(json.loads(str(data[_CFG_KEY])))
        values = {k: np.asarray(data[k], dtype=np.float64)
                  for k in data.files if k != _CFG_KEY}
    params = ModelParams(cfg, values)
    if params.param_count() != expected_param_count(cfg):
        raise ConfigError(f"checkpoint parameter count {params.param_count()} "
                          f"does not match config ({expected_param_count(cfg)})")
    return params
