"""Feature extractor, classifier and the lifelong re-identification losses."""
from __future__ import annotations

import copy
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .autodiff import log_softmax, normalize_rows
from .imageops import clip01, to_batch
from .nets import Backbone, Linear, seeded


@dataclass
class TrainConfig:
    alpha: float = 1.0
    beta: float = 4.5
    lambda_ema: float = 0.5
    margin: float = 0.3
    tau: float = 1.0
    epochs_first: int = 80
    epochs_later: int = 60
    P: int = 4
    K: int = 4
    lr: float = 3e-4
    ema_cadence: str = "epoch"

    def validate(self) -> "TrainConfig":
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("alpha and beta must be non-negative")
        if not 0.0 <= self.lambda_ema <= 1.0:
            raise ValueError(f"lambda_ema must lie in [0, 1], got {self.lambda_ema}")
        if self.tau <= 0:
            raise ValueError(f"tau must be positive, got {self.tau}")
        if self.margin < 0:
            raise ValueError(f"margin must be non-negative, got {self.margin}")
        if self.epochs_first < 0 or self.epochs_later < 0:
            raise ValueError("epoch counts must be non-negative")
        if self.P < 2 or self.K < 2:
            raise ValueError(f"PK batches need P >= 2 and K >= 2, got P={self.P}, K={self.K}")
        if self.lr <= 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if self.ema_cadence not in ("epoch", "step"):
            raise ValueError(f"ema_cadence must be 'epoch' or 'step', got {self.ema_cadence!r}")
        return self


INPUT_MEAN = 0.5
INPUT_STD = 0.25
# Unit-scale classifier weights. With the default 1/sqrt(d) bound the
# cross-entropy gradient is too weak early on and batch-hard triplet
# shrinks every feature to a single point before identities separate.
CLASSIFIER_BOUND = 1.0


class ReIDModel(nn.Module):
    """Four stride-2 conv blocks, global pooling, a d-dim embedding and a classifier.

    Inputs are shifted/scaled by fixed constants before the first conv.
    Only the extractor persists across lifelong steps; the classifier is
    rebuilt for every step's identity set.
    """

    kind = "reid"

    def __init__(self, n_ids: int, dim: int = 64, seed: int = 0):
        super().__init__()
        self.dim = dim
        with seeded(seed):
            self.backbone = Backbone((3, 16, 32, 64, 64))
            self.embed = Linear(self.backbone.out_dim, dim)
            self.classifier = Linear(dim, n_ids, bound=CLASSIFIER_BOUND)

    @property
    def n_ids(self) -> int:
        return self.classifier.weight.shape[0]

    def arch(self) -> dict:
        return {"n_ids": self.n_ids, "dim": self.dim}

    def extractor_parameters(self):
        return [p for name, p in self.named_parameters() if not name.startswith("classifier.")]

    def reset_classifier(self, n_ids: int, seed: int) -> None:
        with seeded(seed):
            self.classifier = Linear(self.dim, n_ids, bound=CLASSIFIER_BOUND)

    def features(self, x: torch.Tensor) -> torch.Tensor:
        return self.embed(self.backbone((x - INPUT_MEAN) / INPUT_STD))

    def forward(self, x: torch.Tensor):
        f = self.features(x)
        return f, self.classifier(f)


@torch.no_grad()
def extract_features(model: ReIDModel, images, batch_size: int = 64) -> np.ndarray:
    """Embeddings of a list of images (clipped to [0,1] first), B x d."""
    images = list(images)
    if not images:
        raise ValueError("cannot extract features from an empty batch")
    out = []
    for start in range(0, len(images), batch_size):
        x = clip01(to_batch(images[start:start + batch_size]))
        out.append(model.features(x).numpy())
    return np.concatenate(out)


# --------------------------------------------------------------------------
# losses
# --------------------------------------------------------------------------

def similarity_matrix(feats: torch.Tensor) -> torch.Tensor:
    """Cosine similarity between all rows, B x B."""
    if feats.dim() != 2 or feats.shape[0] < 2:
        raise ValueError(f"need a B x d feature matrix with B >= 2, got {tuple(feats.shape)}")
    f = normalize_rows(feats)
    return f @ f.T


def skd_loss(s_old: torch.Tensor, s_new: torch.Tensor, tau: float = 1.0) -> torch.Tensor:
    """Mean row-wise KL(softmax(s_old/tau) || softmax(s_new/tau)); s_old is treated as fixed."""
    if s_old.shape != s_new.shape:
        raise ValueError(f"similarity shapes differ: {tuple(s_old.shape)} vs {tuple(s_new.shape)}")
    if tau <= 0:
        raise ValueError(f"tau must be positive, got {tau}")
    log_p = log_softmax(s_old.detach() / tau, dim=1)
    log_q = log_softmax(s_new / tau, dim=1)
    return (log_p.exp() * (log_p - log_q)).sum(dim=1).mean()


def pairwise_distances(feats: torch.Tensor) -> torch.Tensor:
    diff = feats[:, None, :] - feats[None, :, :]
    # clamp keeps the sqrt differentiable at coincident points
    return (diff * diff).sum(-1).clamp_min(1e-24).sqrt()


def triplet_loss(feats: torch.Tensor, labels, margin: float = 0.3) -> torch.Tensor:
    """Batch-hard triplet loss on Euclidean distances of raw features.

    Anchors without a positive or without a negative in the batch are
    skipped; at least one valid anchor is required.
    """
    labels = torch.as_tensor(np.asarray(labels))
    dist = pairwise_distances(feats)
    same = labels[:, None] == labels[None, :]
    eye = torch.eye(len(labels), dtype=torch.bool)
    pos = same & ~eye
    neg = ~same
    valid = pos.any(1) & neg.any(1)
    if not bool(valid.any()):
        raise ValueError("batch has no anchor with both a positive and a negative")
    hardest_pos = dist.masked_fill(~pos, float("-inf")).max(1).values
    hardest_neg = dist.masked_fill(~neg, float("inf")).min(1).values
    per_anchor = torch.relu(hardest_pos - hardest_neg + margin)
    return per_anchor[valid].mean()


def cross_entropy(logits: torch.Tensor, labels) -> torch.Tensor:
    labels = torch.as_tensor(np.asarray(labels), dtype=torch.long)
    n = logits.shape[1]
    if bool(((labels < 0) | (labels >= n)).any()):
        raise ValueError(f"labels outside classifier range [0, {n})")
    return -log_softmax(logits, dim=1).gather(1, labels[:, None]).mean()


def reid_loss(feats: torch.Tensor, logits: torch.Tensor, labels, margin: float = 0.3) -> torch.Tensor:
    return triplet_loss(feats, labels, margin) + cross_entropy(logits, labels)


def total_loss(reid, skd=0.0, reid_rehearsed=None, skd_rehearsed=None, alpha: float = 1.0, beta: float = 4.5):
    """Joint objective: new-data ReID + alpha*SKD + beta*(rehearsed ReID + alpha*rehearsed SKD).

    Missing rehearsed terms (no old rehearser yet) contribute nothing.
    """
    loss = reid + alpha * skd
    if reid_rehearsed is not None or skd_rehearsed is not None:
        rr = reid_rehearsed if reid_rehearsed is not None else 0.0
        rs = skd_rehearsed if skd_rehearsed is not None else 0.0
        loss = loss + beta * (rr + alpha * rs)
    return loss


# --------------------------------------------------------------------------
# model fusion
# --------------------------------------------------------------------------

@torch.no_grad()
def ema_fuse_(target: ReIDModel, old: ReIDModel, lambda_ema: float) -> None:
    """In place: every extractor parameter <- lambda*old + (1-lambda)*target."""
    mine, theirs = target.extractor_parameters(), old.extractor_parameters()
    if len(mine) != len(theirs) or any(a.shape != b.shape for a, b in zip(mine, theirs)):
        raise ValueError("extractor parameter shapes differ between models")
    for p, q in zip(mine, theirs):
        # lerp is exact at both endpoints and when p == q
        p.copy_(torch.lerp(p, q, lambda_ema))


def ema_fuse(old: ReIDModel, new: ReIDModel, lambda_ema: float) -> ReIDModel:
    fused = copy.deepcopy(new)
    ema_fuse_(fused, old, lambda_ema)
    return fused
