"""Images, channel statistics, distribution augmentation and transfer kernels.

Images are float64 numpy arrays of shape (H, W, 3), RGB order. Batches fed
to networks are torch tensors of shape (B, 3, H, W).
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .autodiff import DTYPE, conv2d_same

SIGMA_EPS = 1e-4
AUGMENT_FORMS = ("shift_scale", "adain")


@dataclass(frozen=True)
class ChannelStats:
    mu: np.ndarray
    sigma: np.ndarray

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.mu, self.sigma])


@dataclass(frozen=True)
class DomainStats:
    sigma_of_mu: np.ndarray
    sigma_of_sigma: np.ndarray


@dataclass
class TransferKernel:
    weights: np.ndarray  # C x C x k x k
    bias: np.ndarray  # C

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        c = self.bias.shape[0]
        if self.weights.ndim != 4 or self.weights.shape[:2] != (c, c):
            raise ValueError(f"kernel weights {self.weights.shape} incompatible with {c} biases")
        if self.weights.shape[2] != self.weights.shape[3] or self.weights.shape[2] % 2 == 0:
            raise ValueError(f"kernel size must be odd and square, got {self.weights.shape[2:]}")

    @property
    def k(self) -> int:
        return self.weights.shape[2]

    @classmethod
    def identity(cls, k: int = 3, channels: int = 3) -> "TransferKernel":
        return cls.from_affine(np.ones(channels), np.zeros(channels), k)

    @classmethod
    def from_affine(cls, scale, shift, k: int = 3) -> "TransferKernel":
        """Center-tap-diagonal kernel realizing out_c = scale_c * x_c + shift_c."""
        scale = np.asarray(scale, dtype=np.float64)
        c = scale.shape[0]
        w = np.zeros((c, c, k, k))
        r = k // 2
        w[np.arange(c), np.arange(c), r, r] = scale
        return cls(w, np.asarray(shift, dtype=np.float64).copy())


# --------------------------------------------------------------------------
# conversions
# --------------------------------------------------------------------------

def check_image(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"expected an H x W x 3 image, got shape {img.shape}")
    if img.shape[0] == 0 or img.shape[1] == 0:
        raise ValueError("image has zero size")
    return img


def to_batch(images) -> torch.Tensor:
    arr = np.stack([check_image(im) for im in images])
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(0, 3, 1, 2))).to(DTYPE)


def from_batch(batch: torch.Tensor) -> list[np.ndarray]:
    arr = batch.detach().cpu().numpy().transpose(0, 2, 3, 1)
    return [np.ascontiguousarray(a) for a in arr]


def clip01(img):
    if isinstance(img, torch.Tensor):
        return img.clamp(0.0, 1.0)
    return np.clip(img, 0.0, 1.0)


def hflip(img: np.ndarray) -> np.ndarray:
    return img[:, ::-1, :].copy()


# --------------------------------------------------------------------------
# statistics and augmentation
# --------------------------------------------------------------------------

def _pop_std(a: np.ndarray) -> np.ndarray:
    # exact zero for constant columns (the mean's rounding would leave ~1e-17)
    return np.where(np.ptp(a, axis=0) == 0, 0.0, a.std(axis=0))


def channel_stats(img: np.ndarray) -> ChannelStats:
    img = check_image(img)
    flat = img.reshape(-1, 3)
    return ChannelStats(mu=flat.mean(axis=0), sigma=_pop_std(flat))


def domain_stats(images) -> DomainStats:
    images = list(images)
    if len(images) < 2:
        raise ValueError(f"domain statistics need at least 2 images, got {len(images)}")
    stats = [channel_stats(im) for im in images]
    mus = np.stack([s.mu for s in stats])
    sigmas = np.stack([s.sigma for s in stats])
    return DomainStats(sigma_of_mu=_pop_std(mus), sigma_of_sigma=_pop_std(sigmas))


def sample_target_stats(stats: ChannelStats, ds: DomainStats, rng: np.random.Generator):
    mu_new = rng.normal(stats.mu, ds.sigma_of_mu)
    sigma_new = np.maximum(rng.normal(stats.sigma, ds.sigma_of_sigma), SIGMA_EPS)
    return mu_new, sigma_new


def restyle(img: np.ndarray, mu_new, sigma_new, form: str = "shift_scale", stats: ChannelStats | None = None) -> np.ndarray:
    """Move each channel of ``img`` toward the given mean/std.

    ``shift_scale`` adds the new mean before rescaling, so the output mean is
    mu' * sigma' / sigma.
    ``adain`` normalizes then rescales (output mean is mu').
    """
    img = check_image(img)
    if stats is None:
        stats = channel_stats(img)
    sigma = np.maximum(stats.sigma, SIGMA_EPS)
    mu_new = np.asarray(mu_new, dtype=np.float64)
    sigma_new = np.asarray(sigma_new, dtype=np.float64)
    if form == "shift_scale":
        return (img - stats.mu + mu_new) / sigma * sigma_new
    if form == "adain":
        return (img - stats.mu) / sigma * sigma_new + mu_new
    raise ValueError(f"unknown augmentation form {form!r}; expected one of {AUGMENT_FORMS}")


def augment_distribution(img: np.ndarray, ds: DomainStats, rng: np.random.Generator,
                         form: str = "shift_scale"):
    """Sample a new per-channel mean/std around the image's own and restyle.

    Returns ``(augmented, mu_new, sigma_new)``. The output is not clipped.
    """
    stats = channel_stats(img)
    mu_new, sigma_new = sample_target_stats(stats, ds, rng)
    return restyle(img, mu_new, sigma_new, form, stats), mu_new, sigma_new


def gaussian_taps(sigma: float) -> np.ndarray:
    if sigma < 0:
        raise ValueError(f"blur sigma must be non-negative, got {sigma}")
    if sigma == 0:
        return np.ones(1)
    radius = math.ceil(3 * sigma)
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    taps = np.exp(-0.5 * (x / sigma) ** 2)
    return taps / taps.sum()


def _filter_axis(img: np.ndarray, taps: np.ndarray, axis: int) -> np.ndarray:
    r = len(taps) // 2
    pad = [(0, 0)] * img.ndim
    pad[axis] = (r, r)
    padded = np.pad(img, pad, mode="edge")
    n = img.shape[axis]
    out = np.zeros_like(img)
    for i, t in enumerate(taps):
        out += t * np.take(padded, np.arange(i, i + n), axis=axis)
    return out


def gaussian_blur(img: np.ndarray, sigma_blur: float) -> np.ndarray:
    """Separable Gaussian blur, radius ceil(3 sigma), replicate edges."""
    img = check_image(img)
    taps = gaussian_taps(sigma_blur)
    if len(taps) == 1:
        return img.copy()
    return _filter_axis(_filter_axis(img, taps, 0), taps, 1)


def drl_augment(img: np.ndarray, ds: DomainStats, rng: np.random.Generator, form: str = "shift_scale",
                blur_prob: float = 0.5, blur_max: float = 1.5) -> np.ndarray:
    """Full augmentation chain used to train rehearsers: color, then blur, then clip."""
    out, _, _ = augment_distribution(img, ds, rng, form)
    if rng.random() < blur_prob:
        out = gaussian_blur(out, rng.uniform(0.0, blur_max))
    return clip01(out)


# --------------------------------------------------------------------------
# transfer
# --------------------------------------------------------------------------

def apply_transfer_kernel(img: np.ndarray, tk: TransferKernel) -> np.ndarray:
    """Convolve the image with a transfer kernel. The result is not clipped."""
    x = to_batch([img])
    out = conv2d_same(x, torch.from_numpy(tk.weights), torch.from_numpy(tk.bias))
    return from_batch(out)[0]


def cop_transfer(img: np.ndarray, scale, shift) -> np.ndarray:
    """Per-channel affine map ``scale_c * x + shift_c``."""
    img = check_image(img)
    return img * np.asarray(scale, dtype=np.float64) + np.asarray(shift, dtype=np.float64)


# --------------------------------------------------------------------------
# PPM
# --------------------------------------------------------------------------

def _ppm_tokens(data: bytes, count: int):
    tokens, pos = [], 0
    while len(tokens) < count:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValueError("truncated PPM header")
        tokens.append(data[start:pos])
    return tokens, pos + 1


def read_ppm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    tokens, offset = _ppm_tokens(data, 4)
    if tokens[0] != b"P6":
        raise ValueError(f"{path}: not a binary PPM (magic {tokens[0]!r})")
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval != 255:
        raise ValueError(f"{path}: only maxval 255 is supported, got {maxval}")
    raw = np.frombuffer(data, dtype=np.uint8, count=w * h * 3, offset=offset)
    return raw.reshape(h, w, 3).astype(np.float64) / 255.0


def write_ppm(path, img: np.ndarray) -> None:
    img = check_image(img)
    q = np.rint(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    h, w, _ = q.shape
    Path(path).write_bytes(b"P6\n%d %d\n255\n" % (w, h) + q.tobytes())
