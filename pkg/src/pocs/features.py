"""Feature matrices, dataset directories, and synthetic data generation.

Arrays are interchanged as NPY version 1.0 files (little-endian, C-order,
1-D or 2-D, f32/f64 payloads; i64 for label vectors) with headerless CSV
as a human-readable fallback. A dataset directory holds ``features.npy``
plus optional companions discovered by name: ``labels.npy``,
``logits.npy``, and ``head_w.npy``/``head_b.npy`` for a linear classifier
head. All values are widened to float64 for computation regardless of
the on-disk dtype.
"""

from __future__ import annotations

import numpy.lib.format as npy_format
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ._streams import DOMAIN_SYNTHESIS, stream

_REAL_DESCRS = {"<f4", "<f8"}
_LABEL_DESCRS = {"<i4", "<i8", "<u4", "<u8"}

FEATURES_FILE = "features.npy"
FEATURES_CSV_FILE = "features.csv"
LABELS_FILE = "labels.npy"
LOGITS_FILE = "logits.npy"
HEAD_WEIGHTS_FILE = "head_w.npy"
HEAD_BIAS_FILE = "head_b.npy"


def _require_finite(name: str, arr: np.ndarray) -> None:
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")


def _frozen_f64(arr: np.ndarray) -> np.ndarray:
    out = np.ascontiguousarray(arr, dtype=np.float64)
    out.setflags(write=False)
    return out


@dataclass(frozen=True, eq=False)
class FeatureMatrix:
    """N x d real feature activations with optional per-sample companions.

    Immutable after construction; the backing arrays are marked
    read-only so instances are safe to share across workers.
    """

    data: np.ndarray
    sample_ids: tuple[str, ...] = ()
    class_labels: np.ndarray | None = None
    logits: np.ndarray | None = None
    storage_dtype: np.dtype = field(init=False)

    def __post_init__(self) -> None:
        data = np.asarray(self.data)
        if data.ndim != 2:
            raise ValueError(f"feature matrix must be 2-D, got shape {data.shape}")
        n, d = data.shape
        if n < 1:
            raise ValueError("feature matrix needs at least one row (N >= 1)")
        if d < 2:
            raise ValueError(f"feature dimension must be >= 2, got d={d}")
        storage = np.dtype(np.float32) if data.dtype == np.float32 else np.dtype(np.float64)
        data = np.ascontiguousarray(data, dtype=np.float64)
        _require_finite("features", data)
        data.setflags(write=False)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "storage_dtype", storage)

        ids = tuple(str(s) for s in self.sample_ids) if self.sample_ids else tuple(
            str(i) for i in range(n)
        )
        if len(ids) != n:
            raise ValueError(f"sample_ids length {len(ids)} does not match N={n}")
        object.__setattr__(self, "sample_ids", ids)

        if self.class_labels is not None:
            labels = np.asarray(self.class_labels)
            if labels.ndim != 1 or labels.shape[0] != n:
                raise ValueError(
                    f"class_labels must be a length-{n} vector, got shape {labels.shape}"
                )
            if labels.dtype.kind == "f":
                if not np.all(np.isfinite(labels)) or np.any(labels != np.floor(labels)):
                    raise ValueError("class_labels must be integral")
            labels = labels.astype(np.int64)
            if np.any(labels < 0):
                raise ValueError("class_labels must be >= 0")
            labels.setflags(write=False)
            object.__setattr__(self, "class_labels", labels)

        if self.logits is not None:
            logits = np.asarray(self.logits)
            if logits.ndim != 2 or logits.shape[0] != n:
                raise ValueError(
                    f"logits must be an N x C matrix with N={n}, got shape {logits.shape}"
                )
            if logits.shape[1] < 2:
                raise ValueError(f"logits need C >= 2 classes, got C={logits.shape[1]}")
            logits = np.ascontiguousarray(logits, dtype=np.float64)
            _require_finite("logits", logits)
            logits.setflags(write=False)
            object.__setattr__(self, "logits", logits)

    @property
    def n_samples(self) -> int:
        return self.data.shape[0]

    @property
    def dim(self) -> int:
        return self.data.shape[1]


@dataclass(frozen=True, eq=False)
class LinearHead:
    """Final linear classifier layer: logits = z @ weights.T + bias."""

    weights: np.ndarray
    bias: np.ndarray

    def __post_init__(self) -> None:
        weights = np.asarray(self.weights)
        bias = np.asarray(self.bias)
        if weights.ndim != 2:
            raise ValueError(f"head weights must be C x d, got shape {weights.shape}")
        if bias.ndim != 1 or bias.shape[0] != weights.shape[0]:
            raise ValueError(
                f"head bias must be a length-{weights.shape[0]} vector, got shape {bias.shape}"
            )
        if weights.shape[0] < 2:
            raise ValueError(f"head needs C >= 2 classes, got C={weights.shape[0]}")
        weights = _frozen_f64(weights)
        bias = _frozen_f64(bias)
        _require_finite("head weights", weights)
        _require_finite("head bias", bias)
        object.__setattr__(self, "weights", weights)
        object.__setattr__(self, "bias", bias)

    @property
    def n_classes(self) -> int:
        return self.weights.shape[0]

    @property
    def dim(self) -> int:
        return self.weights.shape[1]

    def logits(self, z: np.ndarray) -> np.ndarray:
        z = np.asarray(z, dtype=np.float64)
        if z.shape[-1] != self.dim:
            raise ValueError(
                f"feature dimension {z.shape[-1]} does not match head dimension {self.dim}"
            )
        return z @ self.weights.T + self.bias


@dataclass(frozen=True)
class SyntheticSpec:
    """Recipe for a synthetic ID/OOD pair.

    ID rows are random coefficients in a fixed random k_true-dimensional
    orthonormal frame plus isotropic noise of scale noise_sigma; OOD rows
    are isotropic Gaussian of scale ood_scale. Everything is a pure
    function of the seed.
    """

    d: int
    k_true: int
    n_id: int
    n_ood: int
    noise_sigma: float = 0.0
    ood_scale: float = 1.0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.d < 2:
            raise ValueError(f"ambient dimension must be >= 2, got d={self.d}")
        if not 1 <= self.k_true < self.d:
            raise ValueError(f"need 1 <= k_true < d, got k_true={self.k_true}, d={self.d}")
        if self.n_id < 1 or self.n_ood < 1:
            raise ValueError("n_id and n_ood must be >= 1")
        if self.noise_sigma < 0:
            raise ValueError(f"noise_sigma must be >= 0, got {self.noise_sigma}")
        if self.ood_scale <= 0:
            raise ValueError(f"ood_scale must be > 0, got {self.ood_scale}")


# ---------------------------------------------------------------------------
# NPY / CSV primitives


def _read_npy(path: Path, allow_int: bool = False) -> np.ndarray:
    """Read an NPY file enforcing the interchange subset.

    Accepts only version 1.0, C-order, 1-D or 2-D arrays with
    little-endian f32/f64 payloads (integer dtypes when allow_int).
    """
    with open(path, "rb") as fh:
        try:
            version = npy_format.read_magic(fh)
        except ValueError as exc:
            raise ValueError(f"{path}: not an NPY file ({exc})") from exc
        if version != (1, 0):
            raise ValueError(f"{path}: unsupported NPY version {version}, expected (1, 0)")
        try:
            shape, fortran_order, dtype = npy_format.read_array_header_1_0(fh)
        except ValueError as exc:
            raise ValueError(f"{path}: malformed NPY header ({exc})") from exc
        if fortran_order:
            raise ValueError(f"{path}: fortran-order arrays are outside the interchange subset")
        if len(shape) not in (1, 2):
            raise ValueError(f"{path}: expected a 1-D or 2-D array, got shape {shape}")
        descr = npy_format.dtype_to_descr(dtype)
        allowed = _REAL_DESCRS | (_LABEL_DESCRS if allow_int else set())
        if descr not in allowed:
            raise ValueError(f"{path}: dtype {descr!r} outside the supported set {sorted(allowed)}")
        count = int(np.prod(shape, dtype=np.int64))
        data = np.fromfile(fh, dtype=dtype, count=count)
        if data.size != count:
            raise ValueError(f"{path}: truncated payload ({data.size} of {count} items)")
        return data.reshape(shape)


def _write_npy(path: Path, arr: np.ndarray) -> None:
    arr = np.ascontiguousarray(arr)
    if arr.dtype.byteorder == ">":
        arr = arr.astype(arr.dtype.newbyteorder("<"))
    with open(path, "wb") as fh:
        npy_format.write_array(fh, arr, version=(1, 0))


def _read_csv(path: Path) -> np.ndarray:
    try:
        return np.loadtxt(path, delimiter=",", dtype=np.float64, ndmin=2)
    except ValueError as exc:
        raise ValueError(f"{path}: malformed CSV ({exc})") from exc


def _write_csv(path: Path, arr: np.ndarray) -> None:
    # 17 significant digits round-trips every float64 exactly.
    np.savetxt(path, np.asarray(arr, dtype=np.float64), delimiter=",", fmt="%.17g")


def _infer_format(path: Path, fmt: str | None) -> str:
    if fmt is None:
        fmt = "csv" if path.suffix.lower() == ".csv" else "npy"
    if fmt not in ("npy", "csv"):
        raise ValueError(f"unknown format {fmt!r}, expected 'npy' or 'csv'")
    return fmt


# ---------------------------------------------------------------------------
# Single-file operations


def load_features(path: str | Path, fmt: str | None = None) -> FeatureMatrix:
    """Load a feature matrix from a single .npy or .csv file."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no such file: {path}")
    fmt = _infer_format(path, fmt)
    data = _read_npy(path) if fmt == "npy" else _read_csv(path)
    if data.ndim != 2:
        raise ValueError(f"{path}: features must be 2-D, got shape {data.shape}")
    return FeatureMatrix(data=data)


def save_features(m: FeatureMatrix, path: str | Path, fmt: str | None = None) -> None:
    """Write the feature array of ``m`` to a single .npy or .csv file.

    NPY files keep the matrix's original storage dtype, so a file loaded
    and re-saved carries a bit-identical payload.
    """
    path = Path(path)
    fmt = _infer_format(path, fmt)
    if fmt == "npy":
        _write_npy(path, m.data.astype(m.storage_dtype))
    else:
        _write_csv(path, m.data)


# ---------------------------------------------------------------------------
# Dataset directories


def load_dataset(directory: str | Path) -> tuple[FeatureMatrix, LinearHead | None]:
    """Load features plus any companions from a dataset directory."""
    directory = Path(directory)
    if not directory.is_dir():
        raise FileNotFoundError(f"no such dataset directory: {directory}")

    npy_path = directory / FEATURES_FILE
    csv_path = directory / FEATURES_CSV_FILE
    if npy_path.is_file():
        data = _read_npy(npy_path)
    elif csv_path.is_file():
        data = _read_csv(csv_path)
    else:
        raise FileNotFoundError(f"{directory}: no {FEATURES_FILE} or {FEATURES_CSV_FILE}")
    if data.ndim != 2:
        raise ValueError(f"{directory}: features must be 2-D, got shape {data.shape}")

    labels = None
    labels_path = directory / LABELS_FILE
    if labels_path.is_file():
        labels = _read_npy(labels_path, allow_int=True)

    logits = None
    logits_path = directory / LOGITS_FILE
    if logits_path.is_file():
        logits = _read_npy(logits_path)

    matrix = FeatureMatrix(data=data, class_labels=labels, logits=logits)

    head = None
    w_path = directory / HEAD_WEIGHTS_FILE
    b_path = directory / HEAD_BIAS_FILE
    if w_path.is_file() != b_path.is_file():
        raise ValueError(
            f"{directory}: {HEAD_WEIGHTS_FILE} and {HEAD_BIAS_FILE} must be present together"
        )
    if w_path.is_file():
        head = LinearHead(weights=_read_npy(w_path), bias=_read_npy(b_path))
        if head.dim != matrix.dim:
            raise ValueError(
                f"{directory}: head dimension {head.dim} does not match features d={matrix.dim}"
            )
        if matrix.logits is not None and matrix.logits.shape[1] != head.n_classes:
            raise ValueError(
                f"{directory}: logits have C={matrix.logits.shape[1]} classes "
                f"but head has C={head.n_classes}"
            )
    return matrix, head


def save_dataset(
    m: FeatureMatrix, directory: str | Path, head: LinearHead | None = None
) -> Path:
    """Write ``m`` (and an optional head) as a dataset directory."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    _write_npy(directory / FEATURES_FILE, m.data.astype(m.storage_dtype))
    if m.class_labels is not None:
        _write_npy(directory / LABELS_FILE, m.class_labels.astype(np.int64))
    if m.logits is not None:
        _write_npy(directory / LOGITS_FILE, m.logits)
    if head is not None:
        if head.dim != m.dim:
            raise ValueError(
                f"head dimension {head.dim} does not match features d={m.dim}"
            )
        _write_npy(directory / HEAD_WEIGHTS_FILE, head.weights)
        _write_npy(directory / HEAD_BIAS_FILE, head.bias)
    return directory


# ---------------------------------------------------------------------------
# Synthetic data


def _random_frame(d: int, k: int, rng: np.random.Generator) -> np.ndarray:
    """Uniformly random d x k orthonormal frame (sign-corrected QR)."""
    g = rng.standard_normal((d, k))
    q, r = np.linalg.qr(g)
    return q * np.where(np.diag(r) < 0.0, -1.0, 1.0)


def generate_synthetic(spec: SyntheticSpec) -> tuple[FeatureMatrix, FeatureMatrix]:
    """Generate an (id_features, ood_features) pair realizing the spec.

    ID variance concentrates in a k_true-dimensional subspace while OOD
    rows spread isotropically, so OOD samples carry far more energy in
    the subspace's orthogonal complement. Two calls with the same spec
    produce byte-identical outputs.
    """
    frame = _random_frame(spec.d, spec.k_true, stream(spec.seed, DOMAIN_SYNTHESIS, 0, 0))
    coeff = stream(spec.seed, DOMAIN_SYNTHESIS, 1, 0).standard_normal((spec.n_id, spec.k_true))
    id_data = coeff @ frame.T
    if spec.noise_sigma > 0:
        noise = stream(spec.seed, DOMAIN_SYNTHESIS, 2, 0).standard_normal((spec.n_id, spec.d))
        id_data = id_data + spec.noise_sigma * noise
    ood_data = spec.ood_scale * stream(spec.seed, DOMAIN_SYNTHESIS, 3, 0).standard_normal(
        (spec.n_ood, spec.d)
    )
    return FeatureMatrix(data=id_data), FeatureMatrix(data=ood_data)
