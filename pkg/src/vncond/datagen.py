"""Synthetic benchmarks and file loaders.

Generators are pure functions of their spec and seed.
"""

from __future__ import annotations

import csv
import gzip
import io
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from vncond.spd import DatasetBatch, EIG_FLOOR

FRIEDMAN_DIM = 12
N_FRIEDMAN_DOMAINS = 6


def friedman_response(x, noise: bool = False, rng: np.random.Generator | None = None):
    """``10 sin(pi x1 x3) + 20 (x5 - 0.5)^2 + 10 x7 + 5 x9`` (+ N(0,1) noise).

    Indices are 1-based as in the usual statement of the benchmark. Accepts
    a single 12-vector or an ``n x 12`` matrix.
    """
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    x2 = x[None, :] if single else x
    if x2.shape[-1] != FRIEDMAN_DIM:
        raise ValueError(f"Friedman inputs must have {FRIEDMAN_DIM} columns, got {x2.shape[-1]}")
    y = (10.0 * np.sin(np.pi * x2[:, 0] * x2[:, 2]) + 20.0 * (x2[:, 4] - 0.5) ** 2
         + 10.0 * x2[:, 6] + 5.0 * x2[:, 8])
    if noise:
        if rng is None:
            raise ValueError("noisy response needs an rng")
        y = y + rng.standard_normal(y.shape)
    return float(y[0]) if single else y


@dataclass(frozen=True)
class FriedmanDomainSpec:
    """Domain ``index`` (1..6) of the diagonal covariate-shift benchmark.

    Unit diagonal; the off-diagonal pattern couples coordinate pairs
    around the domain's own position so neighbouring domains shift
    gradually in both mean and covariance.
    """

    index: int
    noise_std: float = 1.0

    def __post_init__(self):
        if not 1 <= self.index <= N_FRIEDMAN_DOMAINS:
            raise ValueError(f"domain index must be in 1..{N_FRIEDMAN_DOMAINS}, got {self.index}")

    @property
    def center(self) -> float:
        return -1.0 + (2.0 * self.index - 2.0) / 5.0

    @property
    def mean(self) -> np.ndarray:
        return np.full(FRIEDMAN_DIM, self.center)

    @property
    def covariance(self) -> np.ndarray:
        i = self.index
        s = np.eye(FRIEDMAN_DIM)

        def put(a, b, v):  # 1-based symmetric assignment
            s[a - 1, b - 1] = s[b - 1, a - 1] = v

        put(2 * i - 1, 2 * i, 0.1)
        if i < N_FRIEDMAN_DOMAINS:
            put(2 * i, 2 * i + 1, 0.07)
        if i > 1:
            put(2 * i - 1, 2 * i - 2, 0.07)
        for k in (i - 1, i + 1):
            if 1 <= k <= N_FRIEDMAN_DOMAINS:
                put(2 * k - 1, 2 * k, 0.5)
        w = np.linalg.eigvalsh(s)
        if w[0] < 0.0:
            s = s + (EIG_FLOOR - w[0]) * np.eye(FRIEDMAN_DIM)
        return s


def sample_friedman_domain(spec: FriedmanDomainSpec, n: int, seed: int,
                           noise: bool = True) -> DatasetBatch:
    rng = np.random.default_rng(seed)
    cov = spec.covariance
    w, v = np.linalg.eigh(cov)
    if w[0] < 0.0:
        raise ValueError(f"domain {spec.index} covariance is not PSD (min eig {w[0]:.3e})")
    x = spec.mean + rng.standard_normal((n, FRIEDMAN_DIM)) @ (v * np.sqrt(w)).T
    y = friedman_response(x)
    if noise and spec.noise_std > 0:
        y = y + spec.noise_std * rng.standard_normal(n)
    return DatasetBatch(x, y)


def friedman_domains(n: int, seed: int, noise: bool = True) -> list[DatasetBatch]:
    """All six domains; domain ``i`` is drawn with seed ``seed * 1000 + i``."""
    return [sample_friedman_domain(FriedmanDomainSpec(i), n, seed * 1000 + i, noise)
            for i in range(1, N_FRIEDMAN_DOMAINS + 1)]


# ---------------------------------------------------------------------------
# mixture-of-Gaussians label noise


@dataclass(frozen=True)
class MoGNoiseSpec:
    components: tuple  # of (weight, mean, std)
    scale: float = 1.0

    def __post_init__(self):
        comps = tuple(tuple(float(v) for v in c) for c in self.components)
        if not comps or any(len(c) != 3 for c in comps):
            raise ValueError("mixture components must be (weight, mean, std) triples")
        weights = np.array([c[0] for c in comps])
        if np.any(weights < 0) or abs(weights.sum() - 1.0) > 1e-9:
            raise ValueError(f"mixture weights must be nonnegative and sum to 1, got {weights}")
        if any(c[2] <= 0 for c in comps):
            raise ValueError("mixture standard deviations must be positive")
        if self.scale < 0:
            raise ValueError("noise scale must be nonnegative")
        object.__setattr__(self, "components", comps)

    def with_scale(self, scale: float) -> "MoGNoiseSpec":
        return MoGNoiseSpec(self.components, scale)

    @property
    def mean(self) -> float:
        return self.scale * sum(w * m for w, m, _ in self.components)

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        w = np.array([c[0] for c in self.components])
        mu = np.array([c[1] for c in self.components])
        sd = np.array([c[2] for c in self.components])
        k = rng.choice(len(w), size=n, p=w / w.sum())
        return self.scale * (mu[k] + sd[k] * rng.standard_normal(n))


MOG_2DPLANES = MoGNoiseSpec(((0.39, 2.62, 2.0), (0.37, 5.98, 2.1), (0.24, 4.3, 3.1)))
MOG_BANK8FM = MoGNoiseSpec(((0.4, 3.935, 4.0), (0.38, 5.693, 0.979), (0.22, 4.7, 3.1)))
MOG_CALHOUSING = MoGNoiseSpec(((0.55, 6.2, 2.2), (0.4, 4.5, 3.9), (0.05, 3.2, 2.9)))
MOG_PUMA8NH = MoGNoiseSpec(((0.58, 4.2, 0.8), (0.2, 5.0, 2.3), (0.22, 2.1, 1.1)))


def inject_mog_noise(batch: DatasetBatch, spec: MoGNoiseSpec, seed: int) -> DatasetBatch:
    if batch.response is None:
        raise ValueError("noise injection needs a labeled batch")
    if spec.scale == 0:
        return batch
    rng = np.random.default_rng(seed)
    z = spec.sample(batch.n, rng)
    return DatasetBatch(batch.features, batch.response + z[:, None])


# ---------------------------------------------------------------------------
# classification task streams


@dataclass(frozen=True)
class ClassificationTask:
    train: DatasetBatch
    test: DatasetBatch
    permutation: np.ndarray | None = None
    name: str = ""

    @property
    def width(self) -> int:
        return self.train.features.shape[1]

    @property
    def labels(self) -> np.ndarray:
        return self.train.response.ravel().astype(np.int64)


@dataclass(frozen=True)
class BlobTask:
    """Gaussian class blobs with isotropic unit-variance noise.

    Class means are random with the minimal pairwise distance scaled to
    ``separation`` noise standard deviations.
    """

    width: int = 784
    n_classes: int = 10
    separation: float = 4.0
    seed: int = 0
    means: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        rng = np.random.default_rng(self.seed)
        mu = rng.standard_normal((self.n_classes, self.width))
        d = np.sqrt(((mu[:, None, :] - mu[None, :, :]) ** 2).sum(-1))
        dmin = d[~np.eye(self.n_classes, dtype=bool)].min()
        object.__setattr__(self, "means", mu * (self.separation / dmin))

    def sample(self, n: int, seed: int) -> DatasetBatch:
        rng = np.random.default_rng(seed)
        labels = rng.integers(0, self.n_classes, size=n)
        x = self.means[labels] + rng.standard_normal((n, self.width))
        return DatasetBatch(x, labels.astype(np.float64))

    def task(self, n_train: int, n_test: int, seed: int) -> ClassificationTask:
        ss = np.random.SeedSequence([self.seed, seed])
        a, b = (int(s.generate_state(1)[0]) for s in ss.spawn(2))
        return ClassificationTask(self.sample(n_train, a), self.sample(n_test, b), name="blobs")


def permute_task(task: ClassificationTask, perm: np.ndarray, name: str = "") -> ClassificationTask:
    perm = np.asarray(perm)
    if sorted(perm.tolist()) != list(range(task.width)):
        raise ValueError("permutation must cover every input coordinate exactly once")
    return ClassificationTask(
        DatasetBatch(task.train.features[:, perm], task.train.response),
        DatasetBatch(task.test.features[:, perm], task.test.response),
        perm, name or task.name)


def task_permutation(width: int, index: int, seed: int) -> np.ndarray:
    """Permutation for task ``index`` (0-based); task 0 keeps the identity."""
    if index == 0:
        return np.arange(width)
    rng = np.random.default_rng([seed, index])
    return rng.permutation(width)


def permuted_task_stream(base: ClassificationTask | Callable[[], ClassificationTask],
                         num_tasks: int, seed: int) -> list[ClassificationTask]:
    base_task = base() if callable(base) else base
    if num_tasks < 1:
        raise ValueError("need at least one task")
    return [permute_task(base_task, task_permutation(base_task.width, t, seed),
                         name=f"{base_task.name or 'task'}-{t}")
            for t in range(num_tasks)]


# ---------------------------------------------------------------------------
# CSV and IDX files


def load_csv(path: str | Path, response: str | None) -> DatasetBatch:
    """Load a headered numeric CSV; ``response`` names the response column."""
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        rows = [r for r in csv.reader(line for line in fh if not line.startswith("#"))]
    if not rows:
        raise ValueError(f"{path}: empty file, header row required")
    header = [h.strip() for h in rows[0]]
    if len(set(header)) != len(header) or any(h == "" for h in header):
        raise ValueError(f"{path}: malformed header {header}")
    body = [r for r in rows[1:] if r]
    for i, r in enumerate(body, start=2):
        if len(r) != len(header):
            raise ValueError(f"{path}: row {i} has {len(r)} fields, header has {len(header)}")
    try:
        data = np.array([[float(v) for v in r] for r in body], dtype=np.float64)
    except ValueError as exc:
        raise ValueError(f"{path}: non-numeric value ({exc})") from None
    data = data.reshape(len(body), len(header))
    if response is None:
        return DatasetBatch(data)
    if response not in header:
        raise ValueError(f"{path}: unknown response column {response!r}; columns are {header}")
    j = header.index(response)
    keep = [k for k in range(len(header)) if k != j]
    return DatasetBatch(data[:, keep], data[:, j])


def csv_header(path: str | Path) -> list[str]:
    with Path(path).open(newline="", encoding="utf-8") as fh:
        for row in csv.reader(line for line in fh if not line.startswith("#")):
            return [h.strip() for h in row]
    return []


def write_csv(path: str | Path, batch: DatasetBatch, feature_names: Sequence[str] | None = None,
              response_name: str = "y", comment: str | None = None):
    d = batch.features.shape[1]
    names = list(feature_names) if feature_names else [f"x{i + 1}" for i in range(d)]
    buf = io.StringIO()
    if comment:
        buf.write(f"# {comment}\n")
    w = csv.writer(buf, lineterminator="\n")
    header = names + ([response_name] if batch.response is not None else [])
    w.writerow(header)
    y = batch.response
    for i in range(batch.n):
        row = list(batch.features[i])
        if y is not None:
            row += list(y[i])
        w.writerow([repr(float(v)) for v in row])
    Path(path).write_text(buf.getvalue(), encoding="utf-8")


def _open_maybe_gz(path: Path):
    return gzip.open(path, "rb") if path.suffix == ".gz" else path.open("rb")


def _read_idx(path: str | Path, expect_magic: int) -> np.ndarray:
    path = Path(path)
    with _open_maybe_gz(path) as fh:
        raw = fh.read()
    if len(raw) < 4:
        raise ValueError(f"{path}: truncated IDX header")
    magic = struct.unpack(">I", raw[:4])[0]
    if magic != expect_magic:
        raise ValueError(f"{path}: bad IDX magic 0x{magic:08x}, expected 0x{expect_magic:08x}")
    ndim = magic & 0xFF
    dims = struct.unpack(f">{ndim}I", raw[4:4 + 4 * ndim])
    data = np.frombuffer(raw, dtype=np.uint8, offset=4 + 4 * ndim)
    if data.size != int(np.prod(dims)):
        raise ValueError(f"{path}: payload has {data.size} bytes, header says {dims}")
    return data.reshape(dims)


def load_idx(images: str | Path, labels: str | Path) -> DatasetBatch:
    """MNIST-style IDX pair; pixels scaled to [0, 1] and flattened per item."""
    img = _read_idx(images, 0x00000803)
    lab = _read_idx(labels, 0x00000801)
    if img.shape[0] != lab.shape[0]:
        raise ValueError(f"{img.shape[0]} images but {lab.shape[0]} labels")
    if img.shape[0] == 0:
        raise ValueError("IDX files contain no items")
    x = img.reshape(img.shape[0], -1).astype(np.float64) / 255.0
    return DatasetBatch(x, lab.astype(np.float64))


def write_idx(path: str | Path, array: np.ndarray):
    arr = np.asarray(array, dtype=np.uint8)
    magic = 0x00000800 | arr.ndim
    head = struct.pack(f">I{arr.ndim}I", magic, *arr.shape)
    Path(path).write_bytes(head + arr.tobytes())
