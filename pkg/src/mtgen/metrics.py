"""Fréchet distance between Gaussian fits of image embeddings (FID-style scoring)."""

from dataclasses import dataclass

import numpy as np

from ._validation import check_random_state
from .errors import ParameterError

SYMMETRY_TOL = 1e-8
REGULARIZATION = 1e-6


@dataclass(frozen=True)
class GaussianStats:
    mean: np.ndarray
    covariance: np.ndarray
    count: int

    @property
    def dim(self):
        return self.mean.shape[0]


@dataclass(frozen=True)
class FidScore:
    value: float
    embedding: str = ""
    sizes: tuple = ()


@dataclass(frozen=True)
class FidReport:
    mean: float
    sd: float
    repeats: int
    sizes: tuple
    embedding: str = ""
    values: tuple = ()

    def text(self):
        """Key-value block; the headline line reads ``fid: <mean> ± <sd>``."""
        return "\n".join([
            f"fid: {self.mean:.4f} ± {self.sd:.4f}",
            f"fid_mean: {self.mean!r}",
            f"fid_sd: {self.sd!r}",
            f"repeats: {self.repeats}",
            f"real_count: {self.sizes[0]}",
            f"generated_count: {self.sizes[1]}",
            f"embedding: {self.embedding}",
        ]) + "\n"

    def to_dict(self):
        return {"fid_mean": self.mean, "fid_sd": self.sd, "repeats": self.repeats,
                "real_count": self.sizes[0], "generated_count": self.sizes[1],
                "embedding": self.embedding}


def embed(images, extractor):
    """Penultimate-layer features of ``extractor`` (dropout off), float64 ``[n, d]``.

    The extractor raises a dimension error on a width mismatch.
    """
    return np.asarray(extractor.transform(images), dtype=np.float64)


def gaussian_fit(features):
    """Sample mean and unbiased covariance of ``[n, d]`` features."""
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2:
        raise ParameterError(f"features must be [n, d], got shape {x.shape}")
    if x.shape[0] < 2:
        raise ParameterError(f"need at least 2 samples, got {x.shape[0]}")
    mean = x.mean(axis=0)
    centred = x - mean
    cov = centred.T @ centred / (x.shape[0] - 1)
    return GaussianStats(mean, (cov + cov.T) / 2.0, x.shape[0])


def matrix_sqrt_psd(m, tol=SYMMETRY_TOL):
    """Symmetric square root via ``eigh``, with negative eigenvalues clamped to 0."""
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ParameterError(f"expected a square matrix, got shape {m.shape}")
    scale = max(1.0, float(np.abs(m).max(initial=0.0)))
    if np.abs(m - m.T).max(initial=0.0) > tol * scale:
        raise ParameterError("matrix is not symmetric")
    vals, vecs = np.linalg.eigh((m + m.T) / 2.0)
    root = (vecs * np.sqrt(np.clip(vals, 0.0, None))) @ vecs.T
    return (root + root.T) / 2.0


def frechet_distance(a, b, embedding=""):
    """``|mu_a - mu_b|^2 + Tr(S_a + S_b - 2 (S_a^1/2 S_b S_a^1/2)^1/2)``, clamped at 0."""
    if a.dim != b.dim:
        raise ParameterError(f"dimension mismatch: {a.dim} vs {b.dim}")
    sa, sb = a.covariance, b.covariance
    if min(a.count, b.count) < a.dim:
        eye = REGULARIZATION * np.eye(a.dim)
        sa, sb = sa + eye, sb + eye
    diff = a.mean - b.mean
    root_a = matrix_sqrt_psd(sa)
    inner = root_a @ sb @ root_a
    cross = matrix_sqrt_psd((inner + inner.T) / 2.0, tol=np.inf)
    value = float(diff @ diff + np.trace(sa) + np.trace(sb) - 2.0 * np.trace(cross))
    if np.array_equal(a.mean, b.mean) and np.array_equal(a.covariance, b.covariance):
        value = 0.0
    return FidScore(max(value, 0.0), embedding, (a.count, b.count))


def fid_report(real_images, generated_images, extractor, repeats=1, rng=None, embedding=""):
    """FID between two image sets, as mean ± sd over bootstrap resamples.

    ``repeats=1`` scores the sets as given; larger values resample each set
    with replacement ``repeats`` times.
    """
    if repeats < 1:
        raise ParameterError("repeats must be >= 1")
    if len(real_images) == 0 or len(generated_images) == 0:
        raise ParameterError("both image sets must be nonempty")
    fa = embed(real_images, extractor)
    fb = embed(generated_images, extractor)
    if repeats == 1:
        values = [frechet_distance(gaussian_fit(fa), gaussian_fit(fb)).value]
    else:
        rng = check_random_state(rng)
        values = []
        for _ in range(repeats):
            ia = rng.integers(len(fa), size=len(fa))
            ib = rng.integers(len(fb), size=len(fb))
            values.append(frechet_distance(gaussian_fit(fa[ia]), gaussian_fit(fb[ib])).value)
    values = np.array(values)
    sd = float(values.std(ddof=1)) if repeats > 1 else 0.0
    return FidReport(float(values.mean()), sd, repeats, (len(fa), len(fb)), embedding, tuple(values.tolist()))
