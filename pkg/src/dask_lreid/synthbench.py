"""Procedural multi-domain re-identification benchmark and retrieval metrics.

Every identity is a stick-figure pedestrian built from three vertical bands
(head, torso, legs) with identity-specific colours and a torso texture.
A domain renders its identities through a camera "style": a channel-wise
affine toward target statistics, a hue rotation, blur, noise and a
background shade. Different domains therefore share the identity
generator but differ in low-level image statistics, which is the kind of
gap lifelong re-identification has to survive.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .imageops import clip01, gaussian_blur, read_ppm, write_ppm

SPLITS = ("train", "query", "gallery")
REF_MEAN = 0.5
REF_STD = 0.25
# per-view nuisance ranges (large enough that raw colour statistics do not identify people)
BG_JITTER = 0.12
GAIN_JITTER = 0.25
CAST_JITTER = 0.04
# domain hue rotations stay within a camera-like cast range (radians)
HUE_RANGE = 0.6


@dataclass(frozen=True)
class DomainStyle:
    target_mean: tuple
    target_std: tuple
    hue_angle: float
    blur_sigma: float
    noise_std: float
    background: float

    def __post_init__(self):
        if len(self.target_mean) != 3 or len(self.target_std) != 3:
            raise ValueError("target mean/std need 3 channels")
        if min(self.target_std) <= 0:
            raise ValueError(f"target std must be positive, got {self.target_std}")
        if self.blur_sigma < 0 or self.noise_std < 0:
            raise ValueError("blur sigma and noise std must be non-negative")

    @classmethod
    def sample(cls, seed: int) -> "DomainStyle":
        rng = np.random.default_rng([seed, 0x5717])
        return cls(
            target_mean=tuple(float(v) for v in rng.uniform(0.3, 0.7, 3)),
            target_std=tuple(float(v) for v in rng.uniform(0.08, 0.22, 3)),
            hue_angle=float(rng.uniform(-HUE_RANGE, HUE_RANGE)),
            blur_sigma=float(rng.choice([0.0, rng.uniform(0.6, 1.4)])),
            noise_std=float(rng.uniform(0.0, 0.04)),
            background=float(rng.uniform(0.2, 0.8)),
        )


@dataclass
class DomainDataset:
    domain_id: str
    images: list
    labels: np.ndarray
    splits: np.ndarray
    style: DomainStyle | None = None

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.splits = np.asarray(self.splits)
        if not (len(self.images) == len(self.labels) == len(self.splits)):
            raise ValueError("images, labels and splits must have equal length")

    def __len__(self):
        return len(self.images)

    def indices(self, split: str) -> np.ndarray:
        return np.flatnonzero(self.splits == split)

    def subset(self, split: str):
        idx = self.indices(split)
        return [self.images[i] for i in idx], self.labels[idx]

    def train_images(self):
        return self.subset("train")[0]

    def validate(self) -> "DomainDataset":
        train_ids = set(self.labels[self.indices("train")].tolist())
        query_ids = set(self.labels[self.indices("query")].tolist())
        gallery_ids = set(self.labels[self.indices("gallery")].tolist())
        if not train_ids:
            raise ValueError(f"domain {self.domain_id}: empty train split")
        if train_ids & (query_ids | gallery_ids):
            raise ValueError(f"domain {self.domain_id}: train identities leak into evaluation splits")
        missing = query_ids - gallery_ids
        if missing:
            raise ValueError(f"domain {self.domain_id}: query identities {sorted(missing)} absent from gallery")
        return self


@dataclass
class MetricsReport:
    per_domain: dict
    seen_avg: dict
    unseen_avg: dict
    seed: int = 0
    config_hash: str = ""
    config: dict = field(default_factory=dict)
    history: list = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "seed": self.seed,
            "config_hash": self.config_hash,
            "domains": self.per_domain,
            "seen_avg": self.seen_avg,
            "unseen_avg": self.unseen_avg,
            "history": self.history,
            "config": self.config,
        }


# --------------------------------------------------------------------------
# rendering
# --------------------------------------------------------------------------

def hue_rotation_matrix(angle: float) -> np.ndarray:
    """Rotation about the grey axis of RGB space."""
    c, s = math.cos(angle), math.sin(angle)
    k = 1.0 / 3.0
    r = math.sqrt(k)
    return np.array([
        [c + (1 - c) * k, k * (1 - c) - r * s, k * (1 - c) + r * s],
        [k * (1 - c) + r * s, c + k * (1 - c), k * (1 - c) - r * s],
        [k * (1 - c) - r * s, k * (1 - c) + r * s, c + k * (1 - c)],
    ])


@dataclass(frozen=True)
class Identity:
    colors: np.ndarray  # 3 bands x RGB
    stripe_period: int
    stripe_strength: float
    stripe_phase: int
    leg_split: float
    bag_side: int  # -1 none, 0 left, 1 right
    bag_color: np.ndarray
    build: float


def sample_identity(rng: np.random.Generator) -> Identity:
    return Identity(
        colors=rng.uniform(0.15, 0.85, (3, 3)),
        stripe_period=int(rng.integers(3, 9)),
        stripe_strength=float(rng.choice([0.0, rng.uniform(0.15, 0.35)])),
        stripe_phase=int(rng.integers(0, 8)),
        leg_split=float(rng.uniform(-0.2, 0.2)),
        bag_side=int(rng.integers(-1, 2)),
        bag_color=rng.uniform(0.15, 0.85, 3),
        build=float(rng.uniform(0.8, 1.2)),
    )


def render_view(ident: Identity, style: DomainStyle, size: tuple, rng: np.random.Generator) -> np.ndarray:
    h, w = size
    img = np.empty((h, w, 3))
    rows = np.arange(h)[:, None]
    cols = np.arange(w)[None, :]
    # per-view background shade with a soft vertical gradient
    grad = np.linspace(-0.08, 0.08, h)[:, None, None]
    img[:] = np.clip(style.background + rng.normal(0, BG_JITTER, 3), 0, 1) + grad
    dy = rng.integers(-h // 32 - 1, h // 32 + 2)
    dx = rng.integers(-w // 16 - 1, w // 16 + 2)
    cx = w / 2 + dx
    half = w * 0.22 * ident.build
    b1 = h * 0.22 + rng.normal(0, h / 64) + dy
    b2 = h * 0.58 + rng.normal(0, h / 64) + dy
    top = h * 0.05 + dy
    bottom = h * 0.95 + dy
    head = (rows >= top) & (rows < b1) & (np.abs(cols - cx) < half * 0.55)
    torso = (rows >= b1) & (rows < b2) & (np.abs(cols - cx) < half)
    legs = (rows >= b2) & (rows < bottom) & (np.abs(cols - cx) < half * 0.85)
    img[head] = ident.colors[0]
    stripes = ((rows + ident.stripe_phase) // ident.stripe_period) % 2
    torso_col = ident.colors[1][None, None, :] * (1 - ident.stripe_strength * stripes[..., None])
    img = np.where(torso[..., None], torso_col, img)
    left = cols < cx + ident.leg_split * half
    leg_col = np.where(left[..., None], ident.colors[2], ident.colors[2] * 0.8)
    img = np.where(legs[..., None], np.broadcast_to(leg_col, img.shape), img)
    if ident.bag_side >= 0:
        side = -1 if ident.bag_side == 0 else 1
        bx = cx + side * (half + w * 0.06)
        bag = (rows >= b1 + h * 0.08) & (rows < b2) & (np.abs(cols - bx) < w * 0.07)
        img[bag] = ident.bag_color
    # illumination: per-view gain and colour cast
    img = img * rng.uniform(1 - GAIN_JITTER, 1 + GAIN_JITTER) + rng.normal(0, CAST_JITTER, 3)
    if rng.random() < 0.5:
        img = img[:, ::-1]
    img = img + rng.normal(0, 0.02, img.shape)
    return apply_style(np.clip(img, 0, 1), style, rng)


def apply_style(img: np.ndarray, style: DomainStyle, rng: np.random.Generator) -> np.ndarray:
    rot = hue_rotation_matrix(style.hue_angle)
    out = (img - REF_MEAN) @ rot.T + REF_MEAN
    scale = np.asarray(style.target_std) / REF_STD
    out = (out - REF_MEAN) * scale + np.asarray(style.target_mean)
    if style.blur_sigma > 0:
        out = gaussian_blur(out, style.blur_sigma)
    if style.noise_std > 0:
        out = out + rng.normal(0, style.noise_std, out.shape)
    return clip01(out)


def generate_domain(seed: int, style: DomainStyle | None = None, n_ids: int = 20, views_per_id: int = 8,
                    size: tuple = (64, 32), domain_id: str | None = None) -> DomainDataset:
    """Render one domain. Half the identities train; the rest give one query each."""
    if n_ids < 4 or views_per_id < 4:
        raise ValueError(f"need n_ids >= 4 and views_per_id >= 4, got {n_ids}, {views_per_id}")
    if size[0] < 8 or size[1] < 8:
        raise ValueError(f"image size {size} too small")
    if style is None:
        style = DomainStyle.sample(seed)
    rng = np.random.default_rng([seed, 0xD0])
    idents = [sample_identity(rng) for _ in range(n_ids)]
    n_train = n_ids // 2
    images, labels, splits = [], [], []
    for pid, ident in enumerate(idents):
        for v in range(views_per_id):
            images.append(render_view(ident, style, size, rng))
            labels.append(pid)
            if pid < n_train:
                splits.append("train")
            else:
                splits.append("query" if v == 0 else "gallery")
    name = domain_id if domain_id is not None else f"domain{seed}"
    return DomainDataset(name, images, labels, splits, style).validate()


def standard_benchmark(data_seed: int = 0, n_seen: int = 3, n_unseen: int = 2, n_ids: int = 20,
                       views_per_id: int = 8, size: tuple = (64, 32)):
    """Seen sequence plus unseen domains, all drawn from one data seed."""
    seen, unseen = [], []
    for t in range(n_seen + n_unseen):
        dseed = int(np.random.default_rng([data_seed, t]).integers(2**31))
        name = f"seen{t + 1}" if t < n_seen else f"unseen{t - n_seen + 1}"
        ds = generate_domain(dseed, None, n_ids, views_per_id, size, domain_id=name)
        (seen if t < n_seen else unseen).append(ds)
    return seen, unseen


# --------------------------------------------------------------------------
# metrics
# --------------------------------------------------------------------------

def _cosine(q: np.ndarray, g: np.ndarray) -> np.ndarray:
    qn = q / np.linalg.norm(q, axis=1, keepdims=True)
    gn = g / np.linalg.norm(g, axis=1, keepdims=True)
    return qn @ gn.T


def average_precision(relevant_sorted: np.ndarray) -> float:
    """AP of a ranked list given its 0/1 relevance flags (rank order)."""
    hits = np.flatnonzero(relevant_sorted)
    if len(hits) == 0:
        raise ValueError("ranking has no relevant item")
    return float(np.mean(np.arange(1, len(hits) + 1) / (hits + 1)))


def compute_map_rank1(q_feats, q_labels, g_feats, g_labels):
    """Cosine-similarity retrieval; ties are broken by gallery index."""
    q_feats = np.asarray(q_feats, dtype=np.float64)
    g_feats = np.asarray(g_feats, dtype=np.float64)
    q_labels = np.asarray(q_labels)
    g_labels = np.asarray(g_labels)
    absent = set(q_labels.tolist()) - set(g_labels.tolist())
    if absent:
        raise ValueError(f"query identities {sorted(absent)} have no gallery match")
    sims = _cosine(q_feats, g_feats)
    aps, hits = [], []
    for i in range(len(q_labels)):
        order = np.argsort(-sims[i], kind="stable")
        rel = g_labels[order] == q_labels[i]
        aps.append(average_precision(rel))
        hits.append(bool(rel[0]))
    return float(np.mean(aps)), float(np.mean(hits))


def summarize(per_domain: dict, roles: dict):
    """Arithmetic means of mAP/R1 over the seen and unseen domains."""
    out = {}
    for role in ("seen", "unseen"):
        names = [n for n in per_domain if roles[n] == role]
        if names:
            out[role] = {
                "mAP": float(np.mean([per_domain[n]["mAP"] for n in names])),
                "R1": float(np.mean([per_domain[n]["R1"] for n in names])),
            }
        else:
            out[role] = {"mAP": None, "R1": None}
    return out["seen"], out["unseen"]


def evaluate_features(extract, seen, unseen) -> MetricsReport:
    """``extract(images) -> B x d array``; evaluates every domain's query/gallery."""
    per_domain, roles = {}, {}
    for role, domains in (("seen", seen), ("unseen", unseen)):
        for ds in domains:
            q_imgs, q_lab = ds.subset("query")
            g_imgs, g_lab = ds.subset("gallery")
            m, r1 = compute_map_rank1(extract(q_imgs), q_lab, extract(g_imgs), g_lab)
            per_domain[ds.domain_id] = {"mAP": m, "R1": r1, "role": role}
            roles[ds.domain_id] = role
    seen_avg, unseen_avg = summarize(per_domain, roles)
    return MetricsReport(per_domain, seen_avg, unseen_avg)


# --------------------------------------------------------------------------
# persistence
# --------------------------------------------------------------------------

def save_domains(directory, seen, unseen) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries, domains = [], []
    for role, group in (("seen", seen), ("unseen", unseen)):
        for ds in group:
            sub = directory / ds.domain_id
            sub.mkdir(exist_ok=True)
            domains.append({"domain": ds.domain_id, "role": role,
                            "style": asdict(ds.style) if ds.style else None})
            for i, (img, lab, split) in enumerate(zip(ds.images, ds.labels, ds.splits)):
                rel = f"{ds.domain_id}/{i:05d}.ppm"
                write_ppm(directory / rel, img)
                entries.append({"file": rel, "domain": ds.domain_id, "identity": int(lab), "split": str(split)})
    manifest = {"domains": domains, "images": entries}
    path = directory / "manifest.json"
    path.write_text(json.dumps(manifest, indent=1))
    return path


def load_domains(directory):
    """Inverse of ``save_domains``; pixels come back quantized to 1/255."""
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    by_domain = {d["domain"]: ([], [], []) for d in manifest["domains"]}
    for e in manifest["images"]:
        if e["domain"] not in by_domain:
            raise ValueError(f"manifest entry {e['file']} references unknown domain {e['domain']}")
        if e["split"] not in SPLITS:
            raise ValueError(f"manifest entry {e['file']} has invalid split {e['split']!r}")
        imgs, labs, splits = by_domain[e["domain"]]
        imgs.append(read_ppm(directory / e["file"]))
        labs.append(e["identity"])
        splits.append(e["split"])
    seen, unseen = [], []
    for d in manifest["domains"]:
        style = DomainStyle(**d["style"]) if d.get("style") else None
        ds = DomainDataset(d["domain"], *by_domain[d["domain"]], style=style).validate()
        (seen if d["role"] == "seen" else unseen).append(ds)
    return seen, unseen
