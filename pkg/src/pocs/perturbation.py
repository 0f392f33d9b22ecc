"""Stochastic perturbation operators confined to the complement subspace.

Each step applies A = [(1 - epsilon) I + epsilon Q] D inside complement
coordinates, where Q is Haar-uniform orthogonal and D is a random
diagonal scaling with entries in [1 - delta, 1 + delta]. The principal
component of the state is passed through untouched, so in ambient
coordinates a step is z -> P z + U_perp A U_perp^T z.

Operators are drawn from the pinned counter-based streams in
``_streams``, keyed by (seed, sample index, step), which makes every
trajectory reproducible regardless of scheduling. Under the default
``shared_sequence`` policy the sample index is fixed to 0, so all
samples are measured against the same operator sequence.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ._streams import DOMAIN_PERTURBATION, stream
from .subspace import SubspaceModel, _check_vector

SHARED_SEQUENCE = "shared_sequence"
PER_SAMPLE = "per_sample"
SHARING_MODES = (SHARED_SEQUENCE, PER_SAMPLE)


@dataclass(frozen=True)
class PerturbationConfig:
    """Mixing weight epsilon, diagonal spread delta, step count, seed."""

    epsilon: float = 0.1
    delta: float = 0.1
    t_steps: int = 1
    seed: int = 0
    sharing: str = SHARED_SEQUENCE

    def __post_init__(self) -> None:
        if not 0.0 <= self.epsilon <= 1.0:
            raise ValueError(f"epsilon must be in [0, 1], got {self.epsilon}")
        if self.delta < 0.0:
            raise ValueError(f"delta must be >= 0, got {self.delta}")
        if int(self.t_steps) != self.t_steps or self.t_steps < 0:
            raise ValueError(f"t_steps must be a non-negative integer, got {self.t_steps}")
        if self.sharing not in SHARING_MODES:
            raise ValueError(f"sharing must be one of {SHARING_MODES}, got {self.sharing!r}")

    def to_dict(self) -> dict:
        return {
            "epsilon": self.epsilon,
            "delta": self.delta,
            "t_steps": self.t_steps,
            "seed": self.seed,
            "sharing": self.sharing,
        }


@dataclass(frozen=True, eq=False)
class OrthoPerturbation:
    """One sampled operator A = [(1 - eps) I + eps Q] diag(D)."""

    a_matrix: np.ndarray
    q_matrix: np.ndarray
    d_diag: np.ndarray

    def __post_init__(self) -> None:
        a = np.ascontiguousarray(self.a_matrix, dtype=np.float64)
        q = np.ascontiguousarray(self.q_matrix, dtype=np.float64)
        dd = np.ascontiguousarray(self.d_diag, dtype=np.float64)
        m = a.shape[0]
        if a.shape != (m, m) or q.shape != (m, m) or dd.shape != (m,):
            raise ValueError(
                f"inconsistent perturbation shapes: A {a.shape}, Q {q.shape}, D {dd.shape}"
            )
        for name, arr in (("A", a), ("Q", q), ("D", dd)):
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"perturbation matrix {name} contains non-finite values")
        for arr in (a, q, dd):
            arr.setflags(write=False)
        object.__setattr__(self, "a_matrix", a)
        object.__setattr__(self, "q_matrix", q)
        object.__setattr__(self, "d_diag", dd)

    @property
    def dim(self) -> int:
        return self.a_matrix.shape[0]


def sample_haar_orthogonal(m: int, rng: np.random.Generator) -> np.ndarray:
    """Draw a Haar-uniform m x m orthogonal matrix.

    QR of an i.i.d. standard Gaussian matrix with the signs of R's
    diagonal folded into Q; plain QR alone is not Haar.
    """
    if m < 1:
        raise ValueError(f"dimension must be >= 1, got {m}")
    g = rng.standard_normal((m, m))
    q, r = np.linalg.qr(g)
    return q * np.where(np.diag(r) < 0.0, -1.0, 1.0)


def sample_perturbation(
    m: int, cfg: PerturbationConfig, rng: np.random.Generator
) -> OrthoPerturbation:
    """Sample one operator: Q Haar, D ~ Uniform[1 - delta, 1 + delta]^m."""
    q = sample_haar_orthogonal(m, rng)
    d_diag = rng.uniform(1.0 - cfg.delta, 1.0 + cfg.delta, size=m)
    mix = (1.0 - cfg.epsilon) * np.eye(m) + cfg.epsilon * q
    return OrthoPerturbation(a_matrix=mix * d_diag, q_matrix=q, d_diag=d_diag)


def stream_for(cfg: PerturbationConfig, sample_index: int, step: int) -> np.random.Generator:
    """The pinned stream feeding (sample_index, step); see module docstring."""
    index = 0 if cfg.sharing == SHARED_SEQUENCE else sample_index
    return stream(cfg.seed, DOMAIN_PERTURBATION, index, step)


def perturbation_sequence(
    m: int, cfg: PerturbationConfig, sample_index: int = 0
) -> tuple[OrthoPerturbation, ...]:
    """Sample the operators for steps 0 .. t_steps-1 of one trajectory."""
    return tuple(
        sample_perturbation(m, cfg, stream_for(cfg, sample_index, t))
        for t in range(cfg.t_steps)
    )


def ocd_step(model: SubspaceModel, z_t: np.ndarray, pert: OrthoPerturbation) -> np.ndarray:
    """One update z -> P z + U_perp A U_perp^T z.

    The principal coordinates are preserved exactly up to floating
    error; only the complement coordinates are transformed by A.
    """
    z = _check_vector(model, z_t)
    if pert.dim != model.complement_dim:
        raise ValueError(
            f"perturbation dimension {pert.dim} does not match complement "
            f"dimension {model.complement_dim}"
        )
    coeff_k = model.basis_k.T @ z
    coeff_p = model.basis_perp.T @ z
    return model.basis_k @ coeff_k + model.basis_perp @ (pert.a_matrix @ coeff_p)
