"""OOD scorers: complement-perturbation displacement plus baselines.

Every scorer emits "higher means more OOD". The primary scorer centers a
feature at the fitted mean, runs the complement-confined dynamics for T
steps, and accumulates the Euclidean step lengths; at T = 0 it falls
back to the norm of the complement projection (also exposed standalone
as ``complement_norm``). Baselines cover max-softmax-probability,
energy, class-conditional Mahalanobis distance, and their
ReAct-rectified variants.
"""

from __future__ import annotations

import hashlib
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy.special import logsumexp

from .features import FeatureMatrix, LinearHead
from .perturbation import (
    PerturbationConfig,
    SHARED_SEQUENCE,
    OrthoPerturbation,
    ocd_step,
    perturbation_sequence,
)
from .subspace import SubspaceModel, _check_vector

SCORERS = (
    "pocs",
    "msp",
    "energy",
    "mahalanobis",
    "react_msp",
    "react_energy",
    "react_mahalanobis",
    "complement_norm",
)

DEFAULT_REACT_PERCENTILE = 90.0
DEFAULT_TEMPERATURE = 1.0


@dataclass(frozen=True)
class ScoreRecord:
    """One sample's score under one scorer configuration."""

    sample_id: str
    scorer: str
    value: float
    params_digest: str = ""

    def __post_init__(self) -> None:
        if self.scorer not in SCORERS:
            raise ValueError(f"unknown scorer {self.scorer!r}, expected one of {SCORERS}")
        if not np.isfinite(self.value):
            raise ValueError(f"score value must be finite, got {self.value}")


@dataclass(frozen=True, eq=False)
class MahalanobisStats:
    """Per-class means and the inverse of the shared pooled covariance."""

    class_means: np.ndarray
    shared_covariance_inverse: np.ndarray
    classes: np.ndarray

    def __post_init__(self) -> None:
        means = np.ascontiguousarray(self.class_means, dtype=np.float64)
        inv = np.ascontiguousarray(self.shared_covariance_inverse, dtype=np.float64)
        classes = np.ascontiguousarray(self.classes, dtype=np.int64)
        if means.ndim != 2:
            raise ValueError(f"class_means must be C x d, got shape {means.shape}")
        c, d = means.shape
        if classes.shape != (c,):
            raise ValueError(f"classes must be a length-{c} vector, got {classes.shape}")
        if inv.shape != (d, d):
            raise ValueError(f"covariance inverse must be {d} x {d}, got {inv.shape}")
        if not (np.all(np.isfinite(means)) and np.all(np.isfinite(inv))):
            raise ValueError("Mahalanobis statistics contain non-finite values")
        if np.max(np.abs(inv - inv.T)) > 1e-8:
            raise ValueError("covariance inverse is not symmetric within tolerance")
        for arr in (means, inv, classes):
            arr.setflags(write=False)
        object.__setattr__(self, "class_means", means)
        object.__setattr__(self, "shared_covariance_inverse", inv)
        object.__setattr__(self, "classes", classes)

    @property
    def dim(self) -> int:
        return self.class_means.shape[1]


def config_digest(params: dict) -> str:
    """Short stable hash of a scorer configuration."""
    blob = json.dumps(params, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:12]


# ---------------------------------------------------------------------------
# Primary scorer


def complement_norm_score(model: SubspaceModel, z_raw: np.ndarray) -> float:
    """Norm of the complement projection of the centered feature."""
    z0 = _check_vector(model, z_raw) - model.mu
    return float(np.linalg.norm(model.basis_perp.T @ z0))


def pocs_score_with_sequence(
    model: SubspaceModel,
    sequence: Sequence[OrthoPerturbation],
    z_raw: np.ndarray,
) -> float:
    """Accumulated displacement of the centered feature along a trajectory.

    Empty sequences fall back to the complement-norm score.
    """
    if not sequence:
        return complement_norm_score(model, z_raw)
    z = _check_vector(model, z_raw) - model.mu
    total = 0.0
    for pert in sequence:
        z_next = ocd_step(model, z, pert)
        total += float(np.linalg.norm(z_next - z))
        z = z_next
    return total


def pocs_score(
    model: SubspaceModel,
    cfg: PerturbationConfig,
    z_raw: np.ndarray,
    sample_index: int = 0,
) -> float:
    """Score one feature vector under the perturbation dynamics.

    Samples the operator sequence for (cfg.seed, sample_index) per the
    sharing policy, centers the raw feature at the model mean, and sums
    the Euclidean step lengths over cfg.t_steps updates. T = 0 returns
    the complement-norm fallback.
    """
    if cfg.t_steps == 0:
        return complement_norm_score(model, z_raw)
    sequence = perturbation_sequence(model.complement_dim, cfg, sample_index)
    return pocs_score_with_sequence(model, sequence, z_raw)


# ---------------------------------------------------------------------------
# Logit-based baselines


def _check_logits(logits: np.ndarray) -> np.ndarray:
    arr = np.asarray(logits, dtype=np.float64).ravel()
    if arr.size == 0:
        raise ValueError("logits must be non-empty")
    if not np.all(np.isfinite(arr)):
        raise ValueError("logits contain non-finite values")
    return arr


def msp_score(logits: np.ndarray) -> float:
    """Negated maximum softmax probability (higher = more OOD)."""
    arr = _check_logits(logits)
    shifted = arr - arr.max()
    probs = np.exp(shifted)
    return float(-(probs.max() / probs.sum()))


def energy_score(logits: np.ndarray, temperature: float = DEFAULT_TEMPERATURE) -> float:
    """Negated temperature-scaled log-sum-exp of the logits."""
    if temperature <= 0:
        raise ValueError(f"temperature must be > 0, got {temperature}")
    arr = _check_logits(logits)
    return float(-temperature * logsumexp(arr / temperature))


# ---------------------------------------------------------------------------
# Mahalanobis baseline


def fit_mahalanobis(id_features: FeatureMatrix, ridge: float | None = None) -> MahalanobisStats:
    """Class means plus inverse of the ridge-regularized pooled covariance.

    The shared covariance is the unbiased pooled within-class covariance
    (normalized by N - C). ``ridge`` is an absolute diagonal loading;
    when omitted it defaults to 1e-6 * trace(pooled) / d.
    """
    if id_features.class_labels is None:
        raise ValueError("mahalanobis requires class labels on the ID features")
    x = id_features.data
    labels = id_features.class_labels
    n, d = x.shape
    classes = np.unique(labels)
    if classes.size < 2:
        raise ValueError(f"mahalanobis requires >= 2 classes, got {classes.size}")

    means = np.empty((classes.size, d))
    scatter = np.zeros((d, d))
    for i, label in enumerate(classes):
        rows = x[labels == label]
        if rows.shape[0] < 2:
            raise ValueError(f"class {label} has {rows.shape[0]} samples, need >= 2")
        means[i] = rows.mean(axis=0)
        centered = rows - means[i]
        scatter += centered.T @ centered

    pooled = scatter / (n - classes.size)
    lam = ridge if ridge is not None else 1e-6 * float(np.trace(pooled)) / d
    cov = pooled + lam * np.eye(d)
    if np.linalg.eigvalsh(cov).min() <= 0:
        raise ValueError("pooled covariance is singular after regularization")
    inv = np.linalg.inv(cov)
    inv = (inv + inv.T) / 2.0
    return MahalanobisStats(class_means=means, shared_covariance_inverse=inv, classes=classes)


def mahalanobis_score(stats: MahalanobisStats, z: np.ndarray) -> float:
    """Minimum class-conditional squared Mahalanobis distance."""
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 1 or z.shape[0] != stats.dim:
        raise ValueError(f"expected a length-{stats.dim} vector, got shape {z.shape}")
    diffs = stats.class_means - z
    quad = np.einsum("ij,jk,ik->i", diffs, stats.shared_covariance_inverse, diffs)
    return float(quad.min())


# ---------------------------------------------------------------------------
# ReAct rectification


def react_threshold(id_features: FeatureMatrix, percentile: float) -> float:
    """Clamp level: the given percentile of all pooled ID activations."""
    if not 0.0 < percentile <= 100.0:
        raise ValueError(f"percentile must be in (0, 100], got {percentile}")
    return float(np.percentile(id_features.data, percentile))


def react_rectify(
    id_features: FeatureMatrix, percentile: float, z: np.ndarray
) -> np.ndarray:
    """Clamp z elementwise at the pooled ID activation percentile."""
    threshold = react_threshold(id_features, percentile)
    return np.minimum(np.asarray(z, dtype=np.float64), threshold)


# ---------------------------------------------------------------------------
# Batch scoring


def _logit_rows(dataset: FeatureMatrix, head: LinearHead | None, scorer: str) -> np.ndarray:
    if dataset.logits is not None:
        return dataset.logits
    if head is not None:
        return head.logits(dataset.data)
    raise ValueError(
        f"scorer {scorer!r} needs logits: provide a logits companion or a linear head"
    )


def _require(value, scorer: str, what: str):
    if value is None:
        raise ValueError(f"scorer {scorer!r} requires {what}")
    return value


def score_batch(
    dataset: FeatureMatrix,
    scorer: str,
    *,
    model: SubspaceModel | None = None,
    pert_cfg: PerturbationConfig | None = None,
    stats: MahalanobisStats | None = None,
    head: LinearHead | None = None,
    train_features: FeatureMatrix | None = None,
    percentile: float = DEFAULT_REACT_PERCENTILE,
    temperature: float = DEFAULT_TEMPERATURE,
    ridge: float | None = None,
    n_jobs: int = 1,
) -> list[ScoreRecord]:
    """Score every sample of a dataset under one scorer.

    Returns one record per row in dataset order. Scoring is a pure
    function of the inputs: per-sample random streams are keyed by
    (seed, sample index, step), so serial and parallel execution
    produce identical results, and each value equals the corresponding
    single-sample call.
    """
    if scorer not in SCORERS:
        raise ValueError(f"unknown scorer {scorer!r}, expected one of {SCORERS}")

    params: dict = {"scorer": scorer}
    score_one: Callable[[int], float]

    if scorer in ("pocs", "complement_norm"):
        model = _require(model, scorer, "a fitted subspace model")
        if dataset.dim != model.dim:
            raise ValueError(
                f"feature dimension {dataset.dim} does not match model dimension {model.dim}"
            )
        params.update({"d": model.dim, "k": model.k})
        if scorer == "pocs":
            cfg = _require(pert_cfg, scorer, "a perturbation config")
            params.update(cfg.to_dict())
            if cfg.t_steps == 0:
                score_one = lambda i: complement_norm_score(model, dataset.data[i])
            elif cfg.sharing == SHARED_SEQUENCE:
                shared = perturbation_sequence(model.complement_dim, cfg, 0)
                score_one = lambda i: pocs_score_with_sequence(model, shared, dataset.data[i])
            else:
                score_one = lambda i: pocs_score(model, cfg, dataset.data[i], sample_index=i)
        else:
            score_one = lambda i: complement_norm_score(model, dataset.data[i])

    elif scorer in ("msp", "energy"):
        logit_rows = _logit_rows(dataset, head, scorer)
        params["logits_source"] = "companion" if dataset.logits is not None else "head"
        if scorer == "msp":
            score_one = lambda i: msp_score(logit_rows[i])
        else:
            params["temperature"] = temperature
            score_one = lambda i: energy_score(logit_rows[i], temperature)

    elif scorer == "mahalanobis":
        if stats is None:
            stats = fit_mahalanobis(
                _require(train_features, scorer, "fitted stats or labeled ID training features"),
                ridge,
            )
        if dataset.dim != stats.dim:
            raise ValueError(
                f"feature dimension {dataset.dim} does not match statistics dimension {stats.dim}"
            )
        params.update({"n_classes": int(stats.classes.size), "ridge": ridge})
        fitted = stats
        score_one = lambda i: mahalanobis_score(fitted, dataset.data[i])

    elif scorer in ("react_msp", "react_energy", "react_mahalanobis"):
        train = _require(train_features, scorer, "ID training features for the clamp threshold")
        threshold = react_threshold(train, percentile)
        params.update({"percentile": percentile, "threshold": threshold})
        if scorer == "react_mahalanobis":
            rectified_train = FeatureMatrix(
                data=np.minimum(train.data, threshold),
                class_labels=train.class_labels,
            )
            react_stats = fit_mahalanobis(rectified_train, ridge)
            if dataset.dim != react_stats.dim:
                raise ValueError(
                    f"feature dimension {dataset.dim} does not match statistics "
                    f"dimension {react_stats.dim}"
                )
            params.update({"n_classes": int(react_stats.classes.size), "ridge": ridge})
            score_one = lambda i: mahalanobis_score(
                react_stats, np.minimum(dataset.data[i], threshold)
            )
        else:
            hd = _require(head, scorer, "a linear head to map rectified features to logits")
            if scorer == "react_energy":
                params["temperature"] = temperature
                score_one = lambda i: energy_score(
                    hd.logits(np.minimum(dataset.data[i], threshold)), temperature
                )
            else:
                score_one = lambda i: msp_score(
                    hd.logits(np.minimum(dataset.data[i], threshold))
                )
    else:  # pragma: no cover - SCORERS membership enforced above
        raise AssertionError(scorer)

    digest = config_digest(params)
    indices = range(dataset.n_samples)
    if n_jobs > 1:
        with ThreadPoolExecutor(max_workers=n_jobs) as executor:
            values = list(executor.map(score_one, indices))
    else:
        values = [score_one(i) for i in indices]
    return [
        ScoreRecord(dataset.sample_ids[i], scorer, values[i], digest) for i in indices
    ]


# ---------------------------------------------------------------------------
# Score file IO

SCORES_CSV_HEADER = "sample_id,scorer,value"


def write_scores_csv(records: Sequence[ScoreRecord], path: str | Path) -> None:
    lines = [SCORES_CSV_HEADER]
    for rec in records:
        if "," in rec.sample_id or "\n" in rec.sample_id:
            raise ValueError(f"sample id {rec.sample_id!r} cannot contain ',' or newlines")
        lines.append(f"{rec.sample_id},{rec.scorer},{rec.value:.17g}")
    Path(path).write_text("\n".join(lines) + "\n")


def write_scores_jsonl(records: Sequence[ScoreRecord], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(
                json.dumps(
                    {
                        "sample_id": rec.sample_id,
                        "scorer": rec.scorer,
                        "value": rec.value,
                        "params_digest": rec.params_digest,
                    },
                    sort_keys=True,
                )
                + "\n"
            )


def read_scores_csv(path: str | Path) -> list[ScoreRecord]:
    path = Path(path)
    lines = path.read_text().splitlines()
    if not lines or lines[0] != SCORES_CSV_HEADER:
        raise ValueError(f"{path}: expected header {SCORES_CSV_HEADER!r}")
    records = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split(",")
        if len(parts) != 3:
            raise ValueError(f"{path}:{lineno}: expected 3 fields, got {len(parts)}")
        sample_id, scorer, value = parts
        records.append(ScoreRecord(sample_id, scorer, float(value)))
    if not records:
        raise ValueError(f"{path}: no score rows")
    return records
