"""Principal/complement subspace fitting, projections, and diagnostics.

The fitted model centers in-distribution features at their mean and
splits feature space into a k-dimensional principal subspace (top right
singular directions of the centered data) and its full orthogonal
complement. The two orthonormal bases carry the projectors used by the
perturbation dynamics and scorers downstream.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ._streams import DOMAIN_COMPLETION, stream
from .features import FeatureMatrix, _write_npy, _read_npy

ORTHONORMALITY_TOL = 1e-8
CROSS_ORTHOGONALITY_TOL = 1e-8
COMPLETENESS_TOL = 1e-7

# Fixed entropy for completing a thin basis to a full one; keeps fit a
# pure function of its inputs.
_COMPLETION_SEED = 0x5EEDC0DE

MODEL_META_FILE = "meta.json"
_MODEL_ARRAYS = {
    "mu": "mu.npy",
    "basis_k": "basis_k.npy",
    "basis_perp": "basis_perp.npy",
    "singular_values": "singular_values.npy",
}


@dataclass(frozen=True)
class RankPolicy:
    """How to choose the principal dimension k.

    Either a fixed k, or the smallest k whose cumulative squared
    singular values reach a fraction tau of the total.
    """

    mode: str
    k: int | None = None
    tau: float | None = None

    def __post_init__(self) -> None:
        if self.mode == "fixed_k":
            if self.k is None or int(self.k) < 1:
                raise ValueError(f"fixed_k policy needs k >= 1, got {self.k}")
            object.__setattr__(self, "k", int(self.k))
        elif self.mode == "variance_threshold":
            if self.tau is None or not 0.0 < float(self.tau) < 1.0:
                raise ValueError(f"variance_threshold policy needs 0 < tau < 1, got {self.tau}")
            object.__setattr__(self, "tau", float(self.tau))
        else:
            raise ValueError(f"unknown rank policy mode {self.mode!r}")

    @classmethod
    def fixed(cls, k: int) -> "RankPolicy":
        return cls(mode="fixed_k", k=k)

    @classmethod
    def variance(cls, tau: float) -> "RankPolicy":
        return cls(mode="variance_threshold", tau=tau)

    def to_dict(self) -> dict:
        return {"mode": self.mode, "k": self.k, "tau": self.tau}


DEFAULT_POLICY = RankPolicy.variance(0.95)


@dataclass(frozen=True, eq=False)
class SubspaceModel:
    """Mean, principal basis, complement basis, and the singular spectrum.

    basis_k (d x k) and basis_perp (d x (d-k)) are orthonormal, mutually
    orthogonal, and together resolve the identity on R^d; these
    invariants are checked at construction.
    """

    mu: np.ndarray
    basis_k: np.ndarray
    basis_perp: np.ndarray
    singular_values: np.ndarray
    k: int

    def __post_init__(self) -> None:
        mu = np.ascontiguousarray(self.mu, dtype=np.float64)
        bk = np.ascontiguousarray(self.basis_k, dtype=np.float64)
        bp = np.ascontiguousarray(self.basis_perp, dtype=np.float64)
        sv = np.ascontiguousarray(self.singular_values, dtype=np.float64)
        k = int(self.k)

        if mu.ndim != 1:
            raise ValueError(f"mu must be a vector, got shape {mu.shape}")
        d = mu.shape[0]
        if bk.shape != (d, k):
            raise ValueError(f"basis_k must be {d} x {k}, got {bk.shape}")
        if bp.shape != (d, d - k):
            raise ValueError(f"basis_perp must be {d} x {d - k}, got {bp.shape}")
        if not 1 <= k < d:
            raise ValueError(f"need 1 <= k < d, got k={k}, d={d}")
        if sv.ndim != 1:
            raise ValueError(f"singular_values must be a vector, got shape {sv.shape}")
        for name, arr in (("mu", mu), ("basis_k", bk), ("basis_perp", bp),
                          ("singular_values", sv)):
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} contains non-finite values")
        if np.any(sv < 0):
            raise ValueError("singular values must be non-negative")
        if np.any(np.diff(sv) > 0):
            raise ValueError("singular values must be non-increasing")

        gram_k = bk.T @ bk - np.eye(k)
        if np.max(np.abs(gram_k)) > ORTHONORMALITY_TOL:
            raise ValueError("basis_k is not orthonormal within tolerance")
        gram_p = bp.T @ bp - np.eye(d - k)
        if np.max(np.abs(gram_p)) > ORTHONORMALITY_TOL:
            raise ValueError("basis_perp is not orthonormal within tolerance")
        cross = bk.T @ bp
        if np.max(np.abs(cross)) > CROSS_ORTHOGONALITY_TOL:
            raise ValueError("basis_k and basis_perp are not mutually orthogonal")
        resolution = bk @ bk.T + bp @ bp.T - np.eye(d)
        if np.max(np.abs(resolution)) > COMPLETENESS_TOL:
            raise ValueError("bases do not resolve the identity within tolerance")

        for arr in (mu, bk, bp, sv):
            arr.setflags(write=False)
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "basis_k", bk)
        object.__setattr__(self, "basis_perp", bp)
        object.__setattr__(self, "singular_values", sv)
        object.__setattr__(self, "k", k)

    @property
    def dim(self) -> int:
        return self.mu.shape[0]

    @property
    def complement_dim(self) -> int:
        return self.dim - self.k


@dataclass(frozen=True, eq=False)
class VarianceDiagnostics:
    """Per-component explained-variance ratios in two frames.

    basis_ratios: share of total (model-centered) variance along each
    direction of the fitted basis, principal columns first.
    complement_ratios: PCA explained-variance ratios of the
    complement-projected coordinates. A degenerate flag marks frames
    whose total variance is numerically zero (ratios reported as 0).
    """

    basis_ratios: np.ndarray
    complement_ratios: np.ndarray
    basis_degenerate: bool
    complement_degenerate: bool


def _check_vector(model: SubspaceModel, z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 1 or z.shape[0] != model.dim:
        raise ValueError(f"expected a length-{model.dim} vector, got shape {z.shape}")
    if not np.all(np.isfinite(z)):
        raise ValueError("vector contains non-finite values")
    return z


def _fix_column_signs(basis: np.ndarray) -> np.ndarray:
    """Make each column's largest-magnitude entry non-negative."""
    idx = np.argmax(np.abs(basis), axis=0)
    signs = np.where(basis[idx, np.arange(basis.shape[1])] < 0.0, -1.0, 1.0)
    return basis * signs


def _complete_basis(cols: np.ndarray, d: int) -> np.ndarray:
    """Extend d x m orthonormal columns to a full d x d orthonormal basis.

    New columns are seeded random Gaussian vectors orthonormalized
    against all existing columns with repeated re-orthogonalization, so
    the result is deterministic for a given input.
    """
    m = cols.shape[1]
    if m == d:
        return cols
    basis = np.empty((d, d), dtype=np.float64)
    basis[:, :m] = cols
    rng = stream(_COMPLETION_SEED, DOMAIN_COMPLETION, d, m)
    j = m
    while j < d:
        v = rng.standard_normal(d)
        for _ in range(2):
            v = v - basis[:, :j] @ (basis[:, :j].T @ v)
        norm = np.linalg.norm(v)
        if norm > 1e-6:
            basis[:, j] = v / norm
            j += 1
    return basis


def fit(id_features: FeatureMatrix, policy: RankPolicy = DEFAULT_POLICY) -> SubspaceModel:
    """Fit mean and principal/complement bases on in-distribution features.

    Centers the data, takes its SVD, picks k per the rank policy, and
    completes the right singular directions to a full orthonormal basis
    of R^d when the thin SVD cannot span it (N < d). Column signs follow
    the largest-entry-non-negative convention, making the fit
    deterministic for identical input bytes and policy.
    """
    x = id_features.data
    n, d = x.shape
    if n < 2:
        raise ValueError(f"fitting needs N >= 2 samples, got N={n}")

    mu = x.mean(axis=0)
    xc = x - mu
    s_values = np.linalg.svd(xc, compute_uv=False)
    scale = max(1.0, float(np.max(np.abs(x))))
    if s_values[0] <= 1e-12 * scale * np.sqrt(n * d):
        raise ValueError("degenerate input: centered features have zero variance")
    _, s, vh = np.linalg.svd(xc, full_matrices=False)

    energy = s**2
    total = energy.sum()
    if policy.mode == "fixed_k":
        k = policy.k
    else:
        cumulative = np.cumsum(energy) / total
        k = int(np.searchsorted(cumulative, policy.tau, side="left")) + 1
    if not 1 <= k < d:
        raise ValueError(f"rank policy selected k={k}, which violates 1 <= k < d={d}")

    basis = _fix_column_signs(_complete_basis(vh.T, d))
    return SubspaceModel(
        mu=mu,
        basis_k=basis[:, :k],
        basis_perp=basis[:, k:],
        singular_values=s,
        k=k,
    )


def project_principal(model: SubspaceModel, z: np.ndarray) -> np.ndarray:
    """Project z onto the principal subspace (idempotent)."""
    z = _check_vector(model, z)
    return model.basis_k @ (model.basis_k.T @ z)


def project_complement(model: SubspaceModel, z: np.ndarray) -> np.ndarray:
    """Project z onto the orthogonal complement (idempotent)."""
    z = _check_vector(model, z)
    return model.basis_perp @ (model.basis_perp.T @ z)


def explained_variance_at(model: SubspaceModel, k: int | None = None) -> float:
    """Cumulative explained-variance fraction at the model's k."""
    k = model.k if k is None else k
    energy = model.singular_values**2
    return float(energy[:k].sum() / energy.sum())


def variance_diagnostics(
    model: SubspaceModel, features: FeatureMatrix, n_components: int
) -> VarianceDiagnostics:
    """Explained-variance ratios of ``features`` in the fitted frames.

    Frame 1 measures mean squared coordinates of the model-centered
    features along each fitted basis direction (principal first), as a
    fraction of the total. Frame 2 runs a fresh PCA on the
    complement-projected coordinates and reports its explained-variance
    ratios. Each frame sums to at most 1 over all its components.
    """
    d, k = model.dim, model.k
    if features.dim != d:
        raise ValueError(f"feature dimension {features.dim} does not match model d={d}")
    if n_components < 1 or n_components > d:
        raise ValueError(f"n_components must be in [1, {d}], got {n_components}")
    if n_components > d - k:
        raise ValueError(
            f"n_components must be <= d - k = {d - k} for the complement frame, "
            f"got {n_components}"
        )

    xc = features.data - model.mu
    tiny = (1e-10 * (1.0 + float(np.max(np.abs(xc))))) ** 2

    coords = xc @ np.hstack([model.basis_k, model.basis_perp])
    mean_sq = np.mean(coords**2, axis=0)
    total = float(mean_sq.sum())
    basis_degenerate = total <= tiny
    basis_ratios = np.zeros(n_components)
    if not basis_degenerate:
        basis_ratios = mean_sq[:n_components] / total

    comp = xc @ model.basis_perp
    comp_centered = comp - comp.mean(axis=0)
    sv = np.linalg.svd(comp_centered, compute_uv=False)
    comp_energy = sv**2
    comp_total = float(comp_energy.sum())
    complement_degenerate = comp_total <= features.n_samples * tiny
    complement_ratios = np.zeros(n_components)
    if not complement_degenerate:
        take = min(n_components, comp_energy.size)
        complement_ratios[:take] = comp_energy[:take] / comp_total

    return VarianceDiagnostics(
        basis_ratios=basis_ratios,
        complement_ratios=complement_ratios,
        basis_degenerate=basis_degenerate,
        complement_degenerate=complement_degenerate,
    )


def export_diagnostics_csv(
    model: SubspaceModel,
    id_features: FeatureMatrix,
    ood_features: FeatureMatrix,
    n_components: int,
    out_dir: str | Path,
) -> tuple[Path, Path]:
    """Write ID-vs-OOD variance-ratio curves for both frames as CSV."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    diag_id = variance_diagnostics(model, id_features, n_components)
    diag_ood = variance_diagnostics(model, ood_features, n_components)

    paths = (out_dir / "diagnostics_basis.csv", out_dir / "diagnostics_complement.csv")
    curves = (
        (diag_id.basis_ratios, diag_ood.basis_ratios),
        (diag_id.complement_ratios, diag_ood.complement_ratios),
    )
    for path, (ratio_id, ratio_ood) in zip(paths, curves):
        lines = ["component_index,ratio_id,ratio_ood"]
        for i in range(n_components):
            lines.append(f"{i},{ratio_id[i]:.17g},{ratio_ood[i]:.17g}")
        path.write_text("\n".join(lines) + "\n")
    return paths


def save_model(
    model: SubspaceModel,
    directory: str | Path,
    policy: RankPolicy | None = None,
    extra_meta: dict | None = None,
) -> Path:
    """Persist a model bundle: four arrays plus meta.json."""
    from . import __version__

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for attr, filename in _MODEL_ARRAYS.items():
        _write_npy(directory / filename, getattr(model, attr))
    meta = {
        "schema_version": 1,
        "tool_version": __version__,
        "d": model.dim,
        "k": model.k,
        "policy": policy.to_dict() if policy is not None else None,
        "tolerances": {
            "orthonormality": ORTHONORMALITY_TOL,
            "cross_orthogonality": CROSS_ORTHOGONALITY_TOL,
            "completeness": COMPLETENESS_TOL,
        },
    }
    if extra_meta:
        meta.update(extra_meta)
    (directory / MODEL_META_FILE).write_text(
        json.dumps(meta, indent=2, sort_keys=True) + "\n"
    )
    return directory


def load_model(directory: str | Path) -> SubspaceModel:
    """Load and re-validate a model bundle written by save_model."""
    directory = Path(directory)
    if not directory.is_dir():
        raise FileNotFoundError(f"no such model directory: {directory}")
    meta_path = directory / MODEL_META_FILE
    if not meta_path.is_file():
        raise FileNotFoundError(f"{directory}: missing {MODEL_META_FILE}")
    meta = json.loads(meta_path.read_text())
    arrays = {
        attr: _read_npy(directory / filename) for attr, filename in _MODEL_ARRAYS.items()
    }
    return SubspaceModel(k=int(meta["k"]), **arrays)
