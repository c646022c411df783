"""Lifelong training: old-style rehearsal, joint losses, model fusion, ablations."""
from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from .autodiff import Adam, Tape
from .config import ExperimentConfig, VariantSpec
from .imageops import clip01, domain_stats, drl_augment, to_batch
from .rehearser import train_rehearser
from .reid import (ReIDModel, ema_fuse_, extract_features, reid_loss, similarity_matrix, skd_loss,
                   total_loss)
from .synthbench import MetricsReport, evaluate_features, standard_benchmark

log = logging.getLogger(__name__)


@dataclass
class StepRngs:
    """Independent random streams for one lifelong step.

    ``train`` drives batch sampling and geometric augmentation, ``rehearse``
    drives old-style generation and ``drl`` the rehearser training, so that
    switching the rehearsed stream on or off never perturbs the others.
    """
    train: np.random.Generator
    rehearse: np.random.Generator
    drl: np.random.Generator
    init_seed: int
    head_seed: int
    drl_seed: int

    @classmethod
    def for_step(cls, seed: int, t: int) -> "StepRngs":
        a, b, c, d = np.random.SeedSequence([int(seed), int(t)]).spawn(4)
        head, drl = (int(v) for v in d.generate_state(2) % (2**31))
        init = int(np.random.SeedSequence([int(seed), 0]).generate_state(1)[0] % (2**31))
        return cls(np.random.default_rng(a), np.random.default_rng(b), np.random.default_rng(c),
                   init, head, drl)


@dataclass
class LifelongState:
    t: int = 0
    model: ReIDModel | None = None
    rehearsers: list = field(default_factory=list)
    capacity: int = 1
    history: list = field(default_factory=list)
    losses: list = field(default_factory=list)


# --------------------------------------------------------------------------
# batches
# --------------------------------------------------------------------------

def pk_batches(labels: np.ndarray, P: int, K: int, rng: np.random.Generator):
    """One epoch of P-identity x K-view batches (index arrays).

    The epoch holds ``max(1, N // (P*K))`` batches; identities are drawn
    without replacement inside a batch, views without replacement when an
    identity has at least K of them.
    """
    labels = np.asarray(labels)
    ids = np.unique(labels)
    if len(ids) < 2:
        raise ValueError("PK sampling needs at least two identities")
    p = min(P, len(ids))
    by_id = {i: np.flatnonzero(labels == i) for i in ids}
    n_batches = max(1, len(labels) // (P * K))
    for _ in range(n_batches):
        chosen = rng.choice(ids, size=p, replace=False)
        idx = [rng.choice(by_id[i], size=K, replace=len(by_id[i]) < K) for i in chosen]
        yield np.concatenate(idx)


def geometric_augment(x: torch.Tensor, rng: np.random.Generator, pad: int = 4,
                      flip_prob: float = 0.5, erase_prob: float = 0.5) -> torch.Tensor:
    """Random crop (from a replicate-padded image), horizontal flip and random erasing."""
    b, c, h, w = x.shape
    padded = torch.nn.functional.pad(x, (pad, pad, pad, pad), mode="replicate")
    out = torch.empty_like(x)
    for i in range(b):
        dy, dx = rng.integers(0, 2 * pad + 1, size=2)
        img = padded[i, :, dy:dy + h, dx:dx + w]
        if rng.random() < flip_prob:
            img = img.flip(-1)
        out[i] = img
        if rng.random() < erase_prob:
            area = rng.uniform(0.02, 0.2) * h * w
            aspect = np.exp(rng.uniform(np.log(0.3), np.log(3.3)))
            eh = int(min(h, round(np.sqrt(area * aspect))))
            ew = int(min(w, round(np.sqrt(area / aspect))))
            if eh > 0 and ew > 0:
                y0 = rng.integers(0, h - eh + 1)
                x0 = rng.integers(0, w - ew + 1)
                out[i, :, y0:y0 + eh, x0:x0 + ew] = torch.from_numpy(rng.uniform(0, 1, (c, eh, ew)))
    return out


def _train_split(dataset):
    images, labels = dataset.subset("train")
    if not images:
        raise ValueError(f"domain {dataset.domain_id}: empty train split")
    ids, remapped = np.unique(labels, return_inverse=True)
    return images, remapped, len(ids)


# --------------------------------------------------------------------------
# rehearsal
# --------------------------------------------------------------------------

@torch.no_grad()
def generate_old_style(rehearsers: list, x: torch.Tensor, labels, rng: np.random.Generator):
    """Restyle a batch with one uniformly drawn retained rehearser.

    Returns the clipped batch and the unchanged labels.
    """
    if not rehearsers:
        raise ValueError("no retained rehearser to generate old-style data")
    net = rehearsers[int(rng.integers(len(rehearsers)))]
    return clip01(net.transfer(x)), np.asarray(labels).copy()


@torch.no_grad()
def style_augment_batch(x: torch.Tensor, ds, rng: np.random.Generator, cfg) -> torch.Tensor:
    imgs = x.numpy().transpose(0, 2, 3, 1)
    aug = [drl_augment(im, ds, rng, cfg.augment_form, cfg.blur_prob, cfg.blur_max) for im in imgs]
    return to_batch(aug)


def _params_finite(model: nn.Module) -> bool:
    return all(bool(torch.isfinite(p).all()) for p in model.parameters())


def run_step(state: LifelongState, dataset, cfg: ExperimentConfig, variant: VariantSpec,
             seed: int) -> LifelongState:
    """Train one lifelong step on ``dataset`` and return the advanced state.

    The incoming model is kept frozen as the old model; a deep copy with a
    fresh classifier is trained with the joint objective and fused back
    toward the old model. Afterwards the step's rehearser is trained on the
    same domain (independently of the ReID training) and retained.
    """
    tc = cfg.train
    t = state.t + 1
    rngs = StepRngs.for_step(seed, t)
    images, labels, n_ids = _train_split(dataset)
    old = state.model
    if old is None:
        model = ReIDModel(n_ids, cfg.dim, seed=rngs.init_seed)
    else:
        old.eval()
        for p in old.parameters():
            p.requires_grad_(False)
        model = copy.deepcopy(old)
        for p in model.parameters():
            p.requires_grad_(True)
        model.reset_classifier(n_ids, rngs.head_seed)
    opt = Adam(model.parameters(), lr=tc.lr)

    use_skd = old is not None and tc.alpha > 0
    rehearse = old is not None and variant.rehearses and tc.beta > 0
    if rehearse and variant.variant == "style_aug":
        cur_stats = domain_stats(images)
    if rehearse and variant.rehearser_kind and not state.rehearsers:
        raise ValueError(f"variant {variant.variant} needs a retained rehearser at step {t}")

    epochs = tc.epochs_first if t == 1 else tc.epochs_later
    step_losses = []
    for epoch in range(epochs):
        for idx in pk_batches(labels, tc.P, tc.K, rngs.train):
            y = labels[idx]
            x = geometric_augment(to_batch([images[i] for i in idx]), rngs.train)
            with Tape() as tape:
                feats, logits = model(x)
                l_reid = reid_loss(feats, logits, y, tc.margin)
                l_skd = 0.0
                if use_skd:
                    with torch.no_grad():
                        s_old = similarity_matrix(old.features(x))
                    l_skd = skd_loss(s_old, similarity_matrix(feats), tc.tau)
                r_reid = r_skd = None
                if rehearse:
                    if variant.variant == "style_aug":
                        x_star = style_augment_batch(x, cur_stats, rngs.rehearse, cfg.rehearser)
                    else:
                        x_star, _ = generate_old_style(state.rehearsers, x, y, rngs.rehearse)
                    f_star, logits_star = model(x_star)
                    if variant.use_rehearsed_reid_loss:
                        r_reid = reid_loss(f_star, logits_star, y, tc.margin)
                    if variant.use_rehearsed_skd_loss and tc.alpha > 0:
                        with torch.no_grad():
                            s_old_star = similarity_matrix(old.features(x_star))
                        r_skd = skd_loss(s_old_star, similarity_matrix(f_star), tc.tau)
                loss = total_loss(l_reid, l_skd, r_reid, r_skd, tc.alpha, tc.beta)
                tape.backward(loss)
            opt.step()
            step_losses.append(float(loss.detach()))
        if old is not None and tc.lambda_ema > 0 and tc.ema_cadence == "epoch":
            ema_fuse_(model, old, tc.lambda_ema)
        if not _params_finite(model):
            raise FloatingPointError(f"non-finite ReID parameters at step {t}, epoch {epoch}")
    if old is not None and tc.lambda_ema > 0 and tc.ema_cadence == "step":
        ema_fuse_(model, old, tc.lambda_ema)

    rehearsers = list(state.rehearsers)
    kind = variant.rehearser_kind
    if kind is not None and variant.rehearses:
        net = train_rehearser(images, cfg.rehearser, rngs.drl, kind=kind, seed=rngs.drl_seed)
        for p in net.parameters():
            p.requires_grad_(False)
        rehearsers.append(net)
        while len(rehearsers) > state.capacity:
            rehearsers.pop(0)
    return LifelongState(t=t, model=model, rehearsers=rehearsers, capacity=state.capacity,
                         history=list(state.history), losses=state.losses + [step_losses])


def naive_finetune(seen, cfg: ExperimentConfig, seed: int) -> ReIDModel:
    """Plain sequential fine-tuning with the ReID loss only (reference path)."""
    tc = cfg.train
    model = None
    for t, dataset in enumerate(seen, start=1):
        rngs = StepRngs.for_step(seed, t)
        images, labels, n_ids = _train_split(dataset)
        if model is None:
            model = ReIDModel(n_ids, cfg.dim, seed=rngs.init_seed)
        else:
            model.reset_classifier(n_ids, rngs.head_seed)
        opt = Adam(model.parameters(), lr=tc.lr)
        for _ in range(tc.epochs_first if t == 1 else tc.epochs_later):
            for idx in pk_batches(labels, tc.P, tc.K, rngs.train):
                x = geometric_augment(to_batch([images[i] for i in idx]), rngs.train)
                with Tape() as tape:
                    feats, logits = model(x)
                    tape.backward(reid_loss(feats, logits, labels[idx], tc.margin))
                opt.step()
    return model


# --------------------------------------------------------------------------
# sequences and ablations
# --------------------------------------------------------------------------

def evaluate_model(model: ReIDModel, seen, unseen) -> MetricsReport:
    return evaluate_features(lambda imgs: extract_features(model, imgs), seen, unseen)


def run_sequence(seen, unseen, cfg: ExperimentConfig, variant: VariantSpec | None = None,
                 seed: int | None = None, on_step=None):
    """Train over the seen domains in order, then evaluate the final model.

    Returns ``(report, state)``. ``on_step(state)`` is called after every
    step (used for checkpointing).
    """
    if not seen:
        raise ValueError("need at least one seen domain")
    variant = variant or cfg.variant
    seed = cfg.seed if seed is None else seed
    state = LifelongState(capacity=cfg.retained_capacity)
    for dataset in seen:
        state = run_step(state, dataset, cfg, variant, seed)
        partial = evaluate_model(state.model, seen[:state.t], [])
        state.history.append({"step": state.t, "domain": dataset.domain_id,
                              "domains": partial.per_domain, "seen_avg": partial.seen_avg})
        log.info("step %d (%s): seen-avg mAP %.3f", state.t, dataset.domain_id, partial.seen_avg["mAP"])
        if on_step is not None:
            on_step(state)
    report = evaluate_model(state.model, seen, unseen)
    report.seed = seed
    report.config_hash = cfg.hash()
    report.config = cfg.to_dict()
    report.history = state.history
    return report, state


TABLE_COLUMNS = ("seen_avg_mAP", "seen_avg_R1", "unseen_avg_mAP", "unseen_avg_R1")


def table_row(report: MetricsReport) -> dict:
    return {
        "seen_avg_mAP": report.seen_avg["mAP"],
        "seen_avg_R1": report.seen_avg["R1"],
        "unseen_avg_mAP": report.unseen_avg["mAP"],
        "unseen_avg_R1": report.unseen_avg["R1"],
    }


def run_ablation(suite, cfg: ExperimentConfig, seeds=None, benchmark=None, runner=None):
    """Run every variant of ``suite`` on one shared benchmark.

    Each row holds the variant label, the mean of the table columns over
    ``seeds`` and the per-seed values. ``runner(seen, unseen, cfg, variant,
    seed) -> MetricsReport`` can replace the default sequence runner (used
    for caching in tests).
    """
    suite = list(suite)
    if not suite:
        raise ValueError("ablation suite is empty")
    seeds = [cfg.seed] if seeds is None else list(seeds)
    if benchmark is None:
        b = cfg.benchmark
        benchmark = standard_benchmark(cfg.data_seed, b.n_seen, b.n_unseen, b.n_ids, b.views_per_id, b.size)
    seen, unseen = benchmark
    runner = runner or (lambda s, u, c, v, sd: run_sequence(s, u, c, v, sd)[0])
    rows = []
    for variant in suite:
        vcfg = cfg.with_overrides(variant.overrides) if variant.overrides else cfg
        per_seed = [runner(seen, unseen, vcfg, variant, sd) for sd in seeds]
        vals = [table_row(r) for r in per_seed]
        row = {"variant": variant.label}
        for col in TABLE_COLUMNS:
            row[col] = float(np.mean([v[col] for v in vals])) if vals[0][col] is not None else None
        row["seeds"] = seeds
        row["per_seed"] = vals
        row["per_domain_mAP"] = {
            name: float(np.mean([r.per_domain[name]["mAP"] for r in per_seed])) for name in per_seed[0].per_domain
        }
        rows.append(row)
    return rows


SUITES = {
    "tab3": [VariantSpec("baseline"), VariantSpec("style_aug"), VariantSpec("shared_conv"),
             VariantSpec("stats_pred"), VariantSpec("dask")],
    "tab4": [VariantSpec("dask", False, False, label="dask-none"),
             VariantSpec("dask", True, False, label="dask-reid"),
             VariantSpec("dask", False, True, label="dask-skd"),
             VariantSpec("dask", True, True, label="dask-full")],
    "nk": [VariantSpec("baseline"),
           VariantSpec("dask", label="dask-nk1", overrides={"rehearser.n_kernels": 1}),
           VariantSpec("dask", label="dask-nk2", overrides={"rehearser.n_kernels": 2}),
           VariantSpec("dask", label="dask-nk3", overrides={"rehearser.n_kernels": 3})],
}
