"""Distribution rehearsers and their self-supervised reconstruction training.

Three rehearser kinds share one interface (``transfer`` on a batch):

* ``AKPNet``: predicts per-image transfer kernels (the main model).
* ``StatsRehearser``: predicts per-image channel scale/shift only.
* ``SharedConvRehearser``: one learned kernel shared by every image.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass

import numpy as np
import torch
from torch import nn

from .autodiff import Adam, Tape, conv2d_same, conv2d_same_per_sample
from .imageops import (AUGMENT_FORMS, TransferKernel, check_image, domain_stats, drl_augment,
                       from_batch, to_batch)
from .nets import Backbone, seeded

log = logging.getLogger(__name__)

CHANNELS = 3
REHEARSER_KINDS = ("akpnet", "stats_pred", "shared_conv")


@dataclass
class RehearserConfig:
    k: int = 3
    n_kernels: int = 1
    epochs: int = 50
    batch_size: int = 16
    lr: float = 3e-4
    augment_form: str = "shift_scale"
    blur_prob: float = 0.5
    blur_max: float = 1.5
    loss: str = "l1"
    augment: bool = True

    def validate(self) -> "RehearserConfig":
        if self.k < 1 or self.k % 2 == 0:
            raise ValueError(f"kernel size must be a positive odd integer, got {self.k}")
        if self.n_kernels < 1:
            raise ValueError(f"n_kernels must be >= 1, got {self.n_kernels}")
        if self.epochs < 0:
            raise ValueError(f"epochs must be >= 0, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.lr <= 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if self.augment_form not in AUGMENT_FORMS:
            raise ValueError(f"augment_form must be one of {AUGMENT_FORMS}, got {self.augment_form!r}")
        if self.loss not in ("l1", "l2"):
            raise ValueError(f"loss must be 'l1' or 'l2', got {self.loss!r}")
        if not 0.0 <= self.blur_prob <= 1.0 or self.blur_max < 0:
            raise ValueError("blur_prob must lie in [0, 1] and blur_max must be >= 0")
        return self


def identity_encoding(k: int, n_kernels: int, channels: int = CHANNELS) -> torch.Tensor:
    tk = TransferKernel.identity(k, channels)
    one = np.concatenate([tk.weights.ravel(), tk.bias])
    return torch.from_numpy(np.tile(one, n_kernels))


class AKPNet(nn.Module):
    """Adaptive kernel prediction network.

    A small conv backbone feeds a linear head whose output is reshaped into
    ``n_kernels`` transfer kernels (C x C x k x k weights plus C biases).
    The head starts at the identity-kernel encoding with tiny random
    weights, so a fresh net is nearly the identity map.
    """

    kind = "akpnet"

    def __init__(self, k: int = 3, n_kernels: int = 1, seed: int = 0):
        super().__init__()
        if k < 1 or k % 2 == 0:
            raise ValueError(f"kernel size must be a positive odd integer, got {k}")
        if n_kernels < 1:
            raise ValueError(f"n_kernels must be >= 1, got {n_kernels}")
        self.k = k
        self.n_kernels = n_kernels
        with seeded(seed):
            self.backbone = Backbone((3, 8, 16, 32))
            self.head_weight = nn.Parameter(torch.randn(self.head_dim, self.backbone.out_dim) * 1e-3)
        self.head_bias = nn.Parameter(identity_encoding(k, n_kernels))

    @property
    def kernel_len(self) -> int:
        return CHANNELS * CHANNELS * self.k * self.k + CHANNELS

    @property
    def head_dim(self) -> int:
        return self.n_kernels * self.kernel_len

    def arch(self) -> dict:
        return {"k": self.k, "n_kernels": self.n_kernels}

    def raw_kernels(self, x: torch.Tensor):
        """Return (weights B x N x C x C x k x k, biases B x N x C)."""
        feats = self.backbone(x)
        out = torch.nn.functional.linear(feats, self.head_weight, self.head_bias)
        out = out.reshape(x.shape[0], self.n_kernels, self.kernel_len)
        nw = CHANNELS * CHANNELS * self.k * self.k
        w = out[..., :nw].reshape(x.shape[0], self.n_kernels, CHANNELS, CHANNELS, self.k, self.k)
        return w, out[..., nw:]

    def transfer(self, x: torch.Tensor) -> torch.Tensor:
        w, b = self.raw_kernels(x)
        for j in range(self.n_kernels):
            x = conv2d_same_per_sample(x, w[:, j], b[:, j])
        return x


class StatsRehearser(nn.Module):
    """Predicts a per-image, per-channel scale and shift (statistics baseline)."""

    kind = "stats_pred"

    def __init__(self, seed: int = 0):
        super().__init__()
        with seeded(seed):
            self.backbone = Backbone((3, 8, 16, 32))
            self.head_weight = nn.Parameter(torch.randn(2 * CHANNELS, self.backbone.out_dim) * 1e-3)
        self.head_bias = nn.Parameter(torch.tensor([1.0] * CHANNELS + [0.0] * CHANNELS))

    def arch(self) -> dict:
        return {}

    def scale_shift(self, x: torch.Tensor):
        out = torch.nn.functional.linear(self.backbone(x), self.head_weight, self.head_bias)
        return out[:, :CHANNELS], out[:, CHANNELS:]

    def transfer(self, x: torch.Tensor) -> torch.Tensor:
        scale, shift = self.scale_shift(x)
        return x * scale[:, :, None, None] + shift[:, :, None, None]


class SharedConvRehearser(nn.Module):
    """A single free transfer kernel applied to every image."""

    kind = "shared_conv"

    def __init__(self, k: int = 3, seed: int = 0):
        super().__init__()
        tk = TransferKernel.identity(k)
        self.k = k
        self.weight = nn.Parameter(torch.from_numpy(tk.weights.copy()))
        self.bias = nn.Parameter(torch.from_numpy(tk.bias.copy()))

    def arch(self) -> dict:
        return {"k": self.k}

    def transfer(self, x: torch.Tensor) -> torch.Tensor:
        return conv2d_same(x, self.weight, self.bias)


def make_rehearser(kind: str, cfg: RehearserConfig, seed: int = 0) -> nn.Module:
    if kind == "akpnet":
        return AKPNet(cfg.k, cfg.n_kernels, seed=seed)
    if kind == "stats_pred":
        return StatsRehearser(seed=seed)
    if kind == "shared_conv":
        return SharedConvRehearser(cfg.k, seed=seed)
    raise ValueError(f"unknown rehearser kind {kind!r}; expected one of {REHEARSER_KINDS}")


# --------------------------------------------------------------------------
# image-level API
# --------------------------------------------------------------------------

@torch.no_grad()
def predict_kernels(net: AKPNet, img: np.ndarray) -> list[TransferKernel]:
    img = check_image(img)
    w, b = net.raw_kernels(to_batch([img]))
    return [TransferKernel(w[0, j].numpy().copy(), b[0, j].numpy().copy()) for j in range(net.n_kernels)]


@torch.no_grad()
def transfer(net: nn.Module, img: np.ndarray) -> np.ndarray:
    """Restyle one image with a rehearser. The output is not clipped."""
    return from_batch(net.transfer(to_batch([check_image(img)])))[0]


@torch.no_grad()
def transfer_batch(net: nn.Module, images) -> list[np.ndarray]:
    return from_batch(net.transfer(to_batch(images)))


def reconstruction_loss(original, reconstructed, norm: str = "l1"):
    """Mean absolute (or squared) error over all entries.

    Accepts numpy images (returns a float) or torch tensors (returns a
    differentiable scalar).
    """
    if tuple(original.shape) != tuple(reconstructed.shape):
        raise ValueError(f"shape mismatch: {tuple(original.shape)} vs {tuple(reconstructed.shape)}")
    diff = reconstructed - original
    if norm == "l1":
        err = abs(diff).mean()
    elif norm == "l2":
        err = (diff * diff).mean()
    else:
        raise ValueError(f"unknown norm {norm!r}")
    return float(err) if isinstance(err, (np.floating, float)) else err


def train_rehearser(images, cfg: RehearserConfig, rng: np.random.Generator, kind: str = "akpnet",
                    seed: int | None = None, history: list | None = None) -> nn.Module:
    """Self-supervised training: augment, restyle back, minimize reconstruction error.

    ``images`` are the current domain's training images; labels are never
    used. ``history`` (if given) receives the mean loss of every epoch.
    """
    cfg.validate()
    images = [check_image(im) for im in images]
    if not images:
        raise ValueError("cannot train a rehearser on an empty dataset")
    if seed is None:
        seed = int(rng.integers(2**31))
    net = make_rehearser(kind, cfg, seed=seed)
    if cfg.epochs == 0:
        return net
    ds = domain_stats(images) if cfg.augment else None
    opt = Adam(net.parameters(), lr=cfg.lr)
    n = len(images)
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            clean = [images[i] for i in idx]
            if cfg.augment:
                aug = [drl_augment(im, ds, rng, cfg.augment_form, cfg.blur_prob, cfg.blur_max) for im in clean]
            else:
                aug = clean
            target = to_batch(clean)
            with Tape() as tape:
                loss = reconstruction_loss(target, net.transfer(to_batch(aug)), cfg.loss)
                tape.backward(loss)
            opt.step()
            total += float(loss.detach()) * len(idx)
        if not all(torch.isfinite(p).all() for p in net.parameters()):
            raise FloatingPointError(f"non-finite rehearser parameters after epoch {epoch}")
        if history is not None:
            history.append(total / n)
        log.debug("rehearser %s epoch %d loss %.5f", kind, epoch, total / n)
    return net


def rehearser_config_dict(cfg: RehearserConfig) -> dict:
    return asdict(cfg)
