"""Generative-image evaluation: SSIM, Frechet distance / FID with a pluggable
feature extractor, and the Inception Score with a pluggable classifier.

Large pre-trained feature networks are out of scope at desk scale, so FID
and IS run on small deterministic extractors/classifiers whose descriptor
string is embedded in every report; numbers are only comparable within one
descriptor.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from . import tensor as T
from .errors import ContractError, DataError, DimensionError, NumericError
from .tensor import Tensor

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
COV_SHRINKAGE = 1e-6


def _gaussian_kernel(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    k = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return k / k.sum()


def _filter_valid(img: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Separable 2-D correlation, valid region only."""
    k = kernel.size
    h, w = img.shape
    rows = np.zeros((h, w - k + 1))
    for i in range(k):
        rows += kernel[i] * img[:, i:i + w - k + 1]
    out = np.zeros((h - k + 1, w - k + 1))
    for i in range(k):
        out += kernel[i] * rows[i:i + h - k + 1]
    return out


def ssim(a: np.ndarray, b: np.ndarray, data_range: float = 2.0) -> float:
    """Mean local SSIM over an 11x11 Gaussian window (sigma 1.5).

    Accepts [H, W] or [H, W, C] images (channels are averaged); values must
    lie in a dynamic range of width ``data_range`` (2.0 for [-1, 1] images).
    Symmetric in its arguments, and exactly 1.0 when a and b are identical.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError(f"ssim: shapes differ: {a.shape} vs {b.shape}")
    if a.ndim == 3:
        vals = [ssim(a[:, :, c], b[:, :, c], data_range) for c in range(a.shape[2])]
        return float(np.mean(vals))
    if a.ndim != 2:
        raise DimensionError(f"ssim: expected 2-D or 3-D images, got shape {a.shape}")
    if min(a.shape) < SSIM_WINDOW:
        raise DimensionError(f"ssim: image {a.shape} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    kernel = _gaussian_kernel()
    mu_a = _filter_valid(a, kernel)
    mu_b = _filter_valid(b, kernel)
    var_a = _filter_valid(a * a, kernel) - mu_a * mu_a
    var_b = _filter_valid(b * b, kernel) - mu_b * mu_b
    cov = _filter_valid(a * b, kernel) - mu_a * mu_b
    num = (2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def matrix_sqrt_psd(s: np.ndarray, sym_tol: float = 1e-8) -> np.ndarray:
    """Principal square root of a symmetric PSD matrix via eigendecomposition.

    Negative eigenvalues from round-off are clamped to zero.  Raises if the
    input is asymmetric beyond ``sym_tol`` (relative to its largest entry).
    """
    s = np.asarray(s, dtype=np.float64)
    if s.ndim != 2 or s.shape[0] != s.shape[1]:
        raise DimensionError(f"matrix_sqrt_psd: expected a square matrix, got {s.shape}")
    scale = max(np.abs(s).max(), 1.0)
    if np.abs(s - s.T).max() > sym_tol * scale:
        raise NumericError("matrix_sqrt_psd: input is not symmetric within tolerance")
    eigvals, eigvecs = np.linalg.eigh(s)
    root = np.sqrt(np.maximum(eigvals, 0.0))
    return (eigvecs * root) @ eigvecs.T


def frechet_distance(mu1, sigma1, mu2, sigma2) -> float:
    """||mu1-mu2||^2 + Tr(S1 + S2 - 2 (S1 S2)^(1/2)) between two Gaussians.

    The cross term is computed as Tr((S1^(1/2) S2 S1^(1/2))^(1/2)), which is
    symmetric PSD whenever both inputs are.  Tiny negative results from
    round-off are clamped to 0.
    """
    mu1 = np.asarray(mu1, dtype=np.float64).ravel()
    mu2 = np.asarray(mu2, dtype=np.float64).ravel()
    sigma1 = np.atleast_2d(np.asarray(sigma1, dtype=np.float64))
    sigma2 = np.atleast_2d(np.asarray(sigma2, dtype=np.float64))
    if mu1.shape != mu2.shape or sigma1.shape != sigma2.shape:
        raise DimensionError("frechet_distance: mean/covariance shapes differ between the two Gaussians")
    root1 = matrix_sqrt_psd(sigma1)
    inner = root1 @ sigma2 @ root1
    inner = (inner + inner.T) / 2.0  # symmetrize round-off before the second root
    cross = matrix_sqrt_psd(inner)
    diff = mu1 - mu2
    dist = float(diff @ diff + np.trace(sigma1) + np.trace(sigma2) - 2.0 * np.trace(cross))
    if dist < 0.0:
        if dist < -1e-6:
            raise NumericError(f"frechet_distance: got {dist}, inputs are not valid covariances")
        dist = 0.0
    return dist


def _fit_gaussian(features: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Mean and (n-1)-normalized covariance with diagonal shrinkage."""
    n, d = features.shape
    mu = features.mean(axis=0)
    centered = features - mu
    if n > 1:
        cov = centered.T @ centered / (n - 1)
    else:
        cov = np.zeros((d, d))
    cov += COV_SHRINKAGE * np.eye(d)
    return mu, cov


def fid(real_images, generated_images, extractor) -> float:
    """Frechet distance between Gaussian fits of extracted features."""
    real = list(real_images)
    gen = list(generated_images)
    if not real or not gen:
        raise DataError("fid: image sets must be nonempty")
    f_real = extractor.extract(real)
    f_gen = extractor.extract(gen)
    mu_r, cov_r = _fit_gaussian(f_real)
    mu_g, cov_g = _fit_gaussian(f_gen)
    return frechet_distance(mu_r, cov_r, mu_g, cov_g)


def inception_score(generated_images, classifier, splits: int = 1) -> float:
    """exp(mean KL(p(y|x) || p(y))) over the generated set.

    ``classifier`` maps a list/array of images to per-image probability
    vectors; rows must sum to 1 within 1e-6.
    """
    images = list(generated_images)
    if not images:
        raise DataError("inception_score: image set is empty")
    probs = np.asarray(classifier(images), dtype=np.float64)
    if probs.ndim != 2 or probs.shape[0] != len(images):
        raise ContractError(f"classifier returned shape {probs.shape} for {len(images)} images")
    sums = probs.sum(axis=1)
    if np.abs(sums - 1.0).max() > 1e-6:
        raise ContractError("classifier output rows do not sum to 1 (not a probability vector)")
    scores = []
    for chunk in np.array_split(probs, splits):
        marginal = chunk.mean(axis=0)
        # p log(p/q) with 0 log 0 = 0; q > 0 wherever any p > 0
        mask = chunk > 0.0
        safe_p = np.where(mask, chunk, 1.0)
        safe_q = np.where(mask, marginal, 1.0)
        kl = (chunk * np.where(mask, np.log(safe_p) - np.log(safe_q), 0.0)).sum(axis=1).mean()
        scores.append(np.exp(kl))
    return float(np.mean(scores))


# ---------------------------------------------------------------------------
# feature extractors / classifiers


def _to_batch(images) -> np.ndarray:
    arr = np.stack([np.asarray(im, dtype=np.float64) for im in images])
    if arr.ndim == 3:
        arr = arr[..., None]
    return arr


class PixelDownsampleExtractor:
    """Average-pool each image onto a small grid and flatten; the cheapest
    deterministic feature map."""

    kind = "pixel_downsample"

    def __init__(self, grid: int = 4):
        self.grid = grid

    @property
    def descriptor(self) -> str:
        return f"pixel_downsample(grid={self.grid})"

    def extract(self, images) -> np.ndarray:
        arr = _to_batch(images)
        n, h, w, c = arr.shape
        # Average-pool over an even grid partition; exact and deterministic.
        ys = np.linspace(0, h, self.grid + 1).astype(int)
        xs = np.linspace(0, w, self.grid + 1).astype(int)
        feats = np.empty((n, self.grid, self.grid, c))
        for i in range(self.grid):
            for j in range(self.grid):
                feats[:, i, j, :] = arr[:, ys[i]:ys[i + 1], xs[j]:xs[j + 1], :].mean(axis=(1, 2))
        return feats.reshape(n, -1)

    @property
    def output_dim(self) -> int:
        return self.grid * self.grid * 3


class RandomProjectionExtractor:
    """Seeded Gaussian random projection of flattened pixels."""

    kind = "seeded_random_projection"

    def __init__(self, input_shape: tuple[int, int, int], output_dim: int = 16, seed: int = 0):
        self.input_shape = tuple(input_shape)
        self.output_dim = output_dim
        self.seed = seed
        rng = np.random.default_rng(seed)
        d = int(np.prod(self.input_shape))
        self.matrix = rng.normal(0.0, 1.0 / np.sqrt(d), size=(d, output_dim))

    @property
    def descriptor(self) -> str:
        return f"seeded_random_projection(dim={self.output_dim},seed={self.seed})"

    def extract(self, images) -> np.ndarray:
        arr = _to_batch(images)
        return arr.reshape(arr.shape[0], -1) @ self.matrix


class TinyClassifier:
    """A small fixed-architecture classifier over pooled pixels.

    Serves two roles: its softmax output feeds the Inception Score and its
    hidden activations serve as FID features.  Weights are seeded (usable
    untrained as a random-feature probe) and can be fitted on a labeled set
    with ``fit`` for the trained_tiny_classifier extractor kind.
    """

    kind = "trained_tiny_classifier"

    def __init__(self, n_classes: int, seed: int = 0, grid: int = 4, hidden: int = 32,
                 channels: int = 3):
        self.n_classes = n_classes
        self.seed = seed
        self.grid = grid
        self.hidden = hidden
        self.channels = channels
        self.trained = False
        rng = np.random.default_rng(seed)
        d = grid * grid * channels
        self.w1 = Tensor(rng.normal(0.0, 1.0 / np.sqrt(d), size=(d, hidden)), requires_grad=True)
        self.b1 = Tensor(np.zeros(hidden), requires_grad=True)
        self.w2 = Tensor(rng.normal(0.0, 1.0 / np.sqrt(hidden), size=(hidden, n_classes)), requires_grad=True)
        self.b2 = Tensor(np.zeros(n_classes), requires_grad=True)
        self._pool = PixelDownsampleExtractor(grid)

    @property
    def descriptor(self) -> str:
        return (f"tiny_classifier(k={self.n_classes},hidden={self.hidden},"
                f"seed={self.seed},trained={self.trained})")

    @property
    def output_dim(self) -> int:
        return self.hidden

    def _hidden(self, images) -> Tensor:
        feats = self._pool.extract(images)
        return T.relu(T.add(T.matmul(Tensor(feats), self.w1), self.b1))

    def _logits(self, images) -> Tensor:
        return T.add(T.matmul(self._hidden(images), self.w2), self.b2)

    def extract(self, images) -> np.ndarray:
        with T.no_grad():
            return self._hidden(images).data

    def probabilities(self, images) -> np.ndarray:
        with T.no_grad():
            return T.softmax(self._logits(images), axis=-1).data

    __call__ = probabilities

    def fit(self, images, labels, steps: int = 200, lr: float = 0.01) -> None:
        """Fit on (image, integer label) pairs with plain Adam."""
        from .training import AdamState, adam_step, sparse_categorical_crossentropy

        labels = np.asarray(labels, dtype=np.int64)
        named = [("w1", self.w1), ("b1", self.b1), ("w2", self.w2), ("b2", self.b2)]
        state = AdamState(lr=lr, beta1=0.9)
        for _ in range(steps):
            loss = sparse_categorical_crossentropy(self._logits(images), labels)
            T.backward(loss)
            adam_step(named, state)
            for _, p in named:
                p.zero_grad()
        self.trained = True


def make_extractor(kind: str, image_size: int, seed: int = 0, n_classes: int = 8):
    """Build one of the three extractor kinds by name."""
    if kind == "pixel":
        return PixelDownsampleExtractor()
    if kind == "proj":
        return RandomProjectionExtractor((image_size, image_size, 3), seed=seed)
    if kind == "tiny":
        return TinyClassifier(n_classes=n_classes, seed=seed)
    raise ContractError(f"unknown extractor kind {kind!r}; expected pixel, proj or tiny")


# ---------------------------------------------------------------------------
# reports


@dataclass
class MetricsReport:
    """Aggregate metric values for one model over one evaluation set.

    Fields are None when their inputs were not supplied (SSIM needs pairs,
    FID and IS need sets).
    """

    model: str
    fid: Optional[float] = None
    is_score: Optional[float] = None
    ssim: Optional[float] = None
    n_samples: int = 0
    extractor: str = ""

    def key_values(self) -> str:
        lines = [f"model = {self.model}", f"n_samples = {self.n_samples}",
                 f"extractor = {self.extractor}"]
        for key, val in (("fid", self.fid), ("is", self.is_score), ("ssim", self.ssim)):
            if val is not None:
                lines.append(f"{key} = {val:.6f}")
        return "\n".join(lines) + "\n"


def format_table(reports: list[MetricsReport], footer: Optional[str] = None) -> str:
    """Aligned plain-text table with columns Model, FID, IS, SSIM."""
    def cell(v, fmt="{:.4f}"):
        return "-" if v is None else fmt.format(v)

    rows = [["Model", "FID", "IS", "SSIM"]]
    for r in reports:
        rows.append([r.model, cell(r.fid, "{:.2f}"), cell(r.is_score), cell(r.ssim)])
    widths = [max(len(row[i]) for row in rows) for i in range(4)]
    lines = ["  ".join(row[i].ljust(widths[i]) for i in range(4)).rstrip() for row in rows]
    if reports:
        lines.append("")
        lines.append(f"n_samples: {reports[0].n_samples}   extractor: {reports[0].extractor}")
    if footer:
        lines.append(footer)
    return "\n".join(lines) + "\n"
