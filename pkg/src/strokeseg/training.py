"""Adversarial training of the segmenter against three relativistic discriminators."""
from __future__ import annotations

import copy
import json
import logging
import math
import time
from collections import namedtuple
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .data import Case, FoldSplit, extract_slices, load_manifest_cases
from .errors import CheckpointMismatch, DataError, NonFiniteLoss, UnknownTag
from .evaluation import evaluate_fold, mean_scores
from .losses import (LossReport, LossWeights, boundary_nll, check_finite, composite_loss,
                     cross_entropy, lovasz_softmax, ragan_d_loss, ragan_g_loss)
from .models import (VGG11_WIDTHS, SegmenterConfig, build_discriminators, build_segmenter,
                     discriminator_inputs)
from .morphology import WeightSpec

log = logging.getLogger(__name__)

AblationFlags = namedtuple("AblationFlags", "residual adversarial extra_losses")

ABLATIONS = {
    "BL1": AblationFlags(False, False, False),
    "BL2": AblationFlags(False, False, True),
    "BL3": AblationFlags(False, True, False),
    "BL4": AblationFlags(False, True, True),
    "BL5": AblationFlags(True, False, False),
    "BL6": AblationFlags(True, False, True),
    "BL7": AblationFlags(True, True, False),
    "PROPOSED": AblationFlags(True, True, True),
}
HEADS = ("core", "pen", "pair")
CHECKPOINT_FORMAT = "strokeseg-checkpoint/1"


def ablation_flags(tag) -> AblationFlags:
    key = str(tag).upper()
    if key not in ABLATIONS:
        raise UnknownTag(f"unknown ablation tag {tag!r}; valid tags: {', '.join(ABLATIONS)}")
    return ABLATIONS[key]


@dataclass
class TrainConfig:
    ablation: str = "PROPOSED"
    epochs: int = 50
    batch_size: int = 4
    lr_segmenter: float = 1e-4
    lr_discriminators: float = 1e-4
    loss_weights: LossWeights = LossWeights()
    seed: int = 0
    device: str = "cpu"
    checkpoint_dir: str | None = None
    boundary_factor: float = 10.0
    boundary_iterations: int = 1
    encoder_widths: tuple = VGG11_WIDTHS
    batch_norm: bool = True
    disc_base_width: int = 64
    disc_downsamples: int = 4
    max_iterations: int | None = None
    stop_at_dice: float | None = None  # end a fold once validation mean Dice reaches this
    val_every: int = 1
    drop_empty: bool = False
    pad_to_multiple: int = 32
    inclusive_penumbra: bool = False

    def __post_init__(self):
        self.ablation = str(self.ablation).upper()
        ablation_flags(self.ablation)
        if isinstance(self.loss_weights, dict):
            self.loss_weights = LossWeights(**self.loss_weights)
        self.encoder_widths = tuple(int(w) for w in self.encoder_widths)

    @property
    def flags(self) -> AblationFlags:
        return ablation_flags(self.ablation)

    def effective_weights(self) -> LossWeights:
        w = self.loss_weights
        flags = self.flags
        if not flags.extra_losses:
            w = replace(w, ls=0.0, bd=0.0)
        if not flags.adversarial:
            w = replace(w, adv=0.0)
        return w

    def segmenter_config(self) -> SegmenterConfig:
        return SegmenterConfig(encoder_widths=self.encoder_widths, residual=self.flags.residual,
                               batch_norm=self.batch_norm)

    def weight_spec(self) -> WeightSpec:
        return WeightSpec(self.boundary_factor, self.boundary_iterations)

    def to_dict(self):
        d = asdict(self)
        d["encoder_widths"] = list(self.encoder_widths)
        return d

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


def seed_everything(seed: int):
    torch.manual_seed(seed)
    np.random.seed(seed % 2**32)


def build_models(cfg: TrainConfig):
    seg = build_segmenter(cfg.segmenter_config())
    discs = build_discriminators(3, cfg.disc_base_width, cfg.disc_downsamples)
    return seg.to(cfg.device), discs.to(cfg.device)


def make_optimizers(seg, discs, cfg: TrainConfig):
    opt_seg = torch.optim.Adam(seg.parameters(), lr=cfg.lr_segmenter)
    opt_disc = {h: torch.optim.Adam(discs[h].parameters(), lr=cfg.lr_discriminators) for h in HEADS}
    return opt_seg, opt_disc


def collate(samples, device="cpu"):
    """Stack SliceSamples, zero-padding each to the largest slice in the batch."""
    h = max(s.labels.shape[0] for s in samples)
    w = max(s.labels.shape[1] for s in samples)
    xs, ys, ws = [], [], []
    for s in samples:
        dh, dw = h - s.labels.shape[0], w - s.labels.shape[1]
        xs.append(np.pad(s.input, ((0, 0), (0, dh), (0, dw))))
        ys.append(np.pad(s.labels, ((0, dh), (0, dw))))
        ws.append(np.pad(s.boundary_weights, ((0, dh), (0, dw)), constant_values=1.0))
    return {
        "input": torch.from_numpy(np.stack(xs)).float().to(device),
        "labels": torch.from_numpy(np.stack(ys)).long().to(device),
        "weights": torch.from_numpy(np.stack(ws)).float().to(device),
    }


@contextmanager
def frozen(module):
    saved = [p.requires_grad for p in module.parameters()]
    for p in module.parameters():
        p.requires_grad_(False)
    try:
        yield module
    finally:
        for p, flag in zip(module.parameters(), saved):
            p.requires_grad_(flag)


def train_step(segmenter, discriminators, batch, cfg: TrainConfig, opt_seg, opt_disc,
               context=None) -> LossReport:
    """One generator update followed, when adversarial, by one update per discriminator."""
    weights = cfg.effective_weights()
    adversarial = cfg.flags.adversarial
    x, y, w = batch["input"], batch["labels"], batch["weights"]
    segmenter.train()

    logits = segmenter(x)
    log_probs = F.log_softmax(logits, dim=1)
    probs = log_probs.exp()
    ce = cross_entropy(logits, y)
    ls = lovasz_softmax(probs, y)
    bd = boundary_nll(log_probs, y, w)

    adv_g = torch.zeros((), device=x.device)
    pairs = None
    if adversarial:
        onehot = F.one_hot(y, probs.shape[1]).permute(0, 3, 1, 2).to(probs.dtype)
        pairs = discriminator_inputs(probs, onehot, x)
        discriminators.train()
        # Real scores do not depend on the segmenter and the discriminators are
        # not updated until after the generator step, so one forward serves both
        # passes: detached here, with its graph for the discriminator loss below.
        real_scores = {h: discriminators[h](pairs[h][0]) for h in HEADS}
        with frozen(discriminators):
            for h in HEADS:
                adv_g = adv_g + ragan_g_loss(real_scores[h].detach(), discriminators[h](pairs[h][1]))

    total, report = composite_loss(ce, ls, bd, adv_g, weights, context)
    opt_seg.zero_grad(set_to_none=True)
    total.backward()
    opt_seg.step()

    if adversarial:
        d_losses = {}
        for h in HEADS:
            loss = ragan_d_loss(real_scores[h], discriminators[h](pairs[h][1].detach()))
            check_finite({f"adv_d_{h}": loss}, context)
            opt_disc[h].zero_grad(set_to_none=True)
            loss.backward()
            opt_disc[h].step()
            opt_disc[h].zero_grad(set_to_none=True)
            d_losses[h] = float(loss.detach())
        report.adv_d_core = d_losses["core"]
        report.adv_d_pen = d_losses["pen"]
        report.adv_d_pair = d_losses["pair"]
    return report


@dataclass
class TrainLog:
    records: list = field(default_factory=list)
    _t0: float = field(default_factory=time.monotonic, repr=False)

    def add(self, kind, **values):
        rec = {"kind": kind, **values, "wall_clock": round(time.monotonic() - self._t0, 3)}
        self.records.append(rec)
        return rec

    def iterations(self):
        return [r for r in self.records if r["kind"] == "iter"]

    def validations(self):
        return [r for r in self.records if r["kind"] == "val"]

    def write(self, path):
        with open(path, "w") as fh:
            for r in self.records:
                fh.write(json.dumps(r) + "\n")

    @classmethod
    def read(cls, path):
        out = cls()
        with open(path) as fh:
            out.records = [json.loads(ln) for ln in fh if ln.strip()]
        return out


@dataclass
class FitResult:
    best_state: dict
    best_dice: dict
    log: TrainLog
    iterations: int


def _state_copy(seg, discs):
    return {"segmenter": copy.deepcopy(seg.state_dict()),
            "discriminators": copy.deepcopy(discs.state_dict())}


def fit(segmenter, discriminators, train_samples, val_cases, cfg: TrainConfig, fold=None,
        train_log: TrainLog | None = None) -> FitResult:
    """Train on slices, validate on whole cases, keep the best state by mean Dice."""
    if not train_samples:
        raise DataError("no training slices")
    train_log = train_log or TrainLog()
    opt_seg, opt_disc = make_optimizers(segmenter, discriminators, cfg)
    rng = np.random.default_rng(cfg.seed)
    n = len(train_samples)
    best_mean, best = -math.inf, None
    best_dice = {}
    iteration = 0
    limit = cfg.max_iterations if cfg.max_iterations is not None else math.inf

    def validate(epoch):
        nonlocal best_mean, best, best_dice
        scores = mean_scores(evaluate_fold(segmenter, val_cases, cfg.inclusive_penumbra,
                                           cfg.pad_to_multiple))
        train_log.add("val", fold=fold, epoch=epoch, iteration=iteration,
                      penumbra=scores.penumbra, core=scores.core, mean=scores.mean)
        if scores.mean > best_mean:
            best_mean = scores.mean
            best = _state_copy(segmenter, discriminators)
            best_dice = {"penumbra": scores.penumbra, "core": scores.core, "mean": scores.mean,
                         "epoch": epoch, "iteration": iteration}
        return scores.mean

    epoch = 0
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            if iteration >= limit:
                break
            batch = collate([train_samples[i] for i in order[start : start + cfg.batch_size]],
                            cfg.device)
            iteration += 1
            ctx = {"fold": fold, "epoch": epoch, "iteration": iteration}
            report = train_step(segmenter, discriminators, batch, cfg, opt_seg, opt_disc, ctx)
            train_log.add("iter", fold=fold, epoch=epoch, iteration=iteration, **report.values())
        done = iteration >= limit or epoch == cfg.epochs
        if val_cases and (epoch % cfg.val_every == 0 or done):
            reached = validate(epoch)
            if cfg.stop_at_dice is not None and reached >= cfg.stop_at_dice:
                done = True
        if done:
            break
    if best is None:
        best = _state_copy(segmenter, discriminators)
    return FitResult(best, best_dice, train_log, iteration)


# -- checkpoints ---------------------------------------------------------------


def save_checkpoint(path, segmenter, discriminators, cfg: TrainConfig, meta=None):
    params = {k: v.detach().cpu() for k, v in segmenter.state_dict().items()}
    params.update({f"disc.{k}": v.detach().cpu() for k, v in discriminators.state_dict().items()})
    torch.save({"format": CHECKPOINT_FORMAT, "config": cfg.to_dict(), "params": params,
                "meta": dict(meta or {})}, path)


def save_state_checkpoint(path, state, cfg: TrainConfig, meta=None):
    seg, discs = build_models(cfg)
    seg.load_state_dict(state["segmenter"])
    discs.load_state_dict(state["discriminators"])
    save_checkpoint(path, seg, discs, cfg, meta)


def load_checkpoint(path, device="cpu"):
    """Returns ``(segmenter, discriminators, cfg, meta)``."""
    try:
        blob = torch.load(path, map_location=device, weights_only=False)
    except Exception as exc:
        raise CheckpointMismatch(f"cannot read checkpoint {path}: {exc}") from exc
    if not isinstance(blob, dict) or blob.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointMismatch(f"{path} is not a {CHECKPOINT_FORMAT} archive")
    cfg = TrainConfig.from_dict(blob["config"])
    cfg.device = device
    seg, discs = build_models(cfg)
    params = blob["params"]
    seg_state = {k: v for k, v in params.items() if not k.startswith("disc.")}
    disc_state = {k[len("disc."):]: v for k, v in params.items() if k.startswith("disc.")}
    for name, model, state in (("segmenter", seg, seg_state), ("discriminators", discs, disc_state)):
        expected = model.state_dict()
        missing = sorted(set(expected) - set(state))
        extra = sorted(set(state) - set(expected))
        bad = [k for k in expected if k in state and tuple(state[k].shape) != tuple(expected[k].shape)]
        if missing or extra or bad:
            raise CheckpointMismatch(
                f"{path}: {name} parameters do not match config "
                f"(missing={missing[:3]}, unexpected={extra[:3]}, wrong shape={bad[:3]})")
        model.load_state_dict(state)
    seg.eval()
    discs.eval()
    return seg, discs, cfg, blob.get("meta", {})


# -- cross-validation driver ---------------------------------------------------


@dataclass
class FoldResult:
    fold: int
    checkpoint: str | None
    log_path: str | None
    best_dice: dict
    log: TrainLog
    train_ids: list
    val_ids: list


def slices_for(cases, cfg: TrainConfig):
    out = []
    for c in cases:
        out.extend(extract_slices(c, cfg.pad_to_multiple, cfg.weight_spec(), cfg.drop_empty))
    return out


def train(manifest, folds: FoldSplit, cfg: TrainConfig, out_dir=None, only_folds=None) -> list:
    """Cross-validated training; one best-by-validation checkpoint and log per fold.

    ``manifest`` is a list of Cases or a path to a manifest file.
    """
    cases = manifest if isinstance(manifest, (list, tuple)) else load_manifest_cases(manifest)
    by_id = {c.case_id: c for c in cases}
    out_dir = Path(out_dir or cfg.checkpoint_dir) if (out_dir or cfg.checkpoint_dir) else None
    results = []
    fold_ids = range(folds.k) if only_folds is None else only_folds
    for fold in fold_ids:
        train_ids, val_ids = folds.train_ids(fold), folds.val_ids(fold)
        leaked = set(train_ids) & set(val_ids)
        if leaked:
            raise DataError(f"fold {fold}: cases in both train and validation: {sorted(leaked)}")
        unknown = [cid for cid in train_ids + val_ids if cid not in by_id]
        if unknown:
            raise DataError(f"fold {fold}: case ids not in the dataset: {unknown[:5]}")
        seed_everything(cfg.seed + fold)
        seg, discs = build_models(cfg)
        train_samples = slices_for([by_id[c] for c in train_ids], cfg)
        val_cases = [by_id[c] for c in val_ids]
        try:
            res = fit(seg, discs, train_samples, val_cases, cfg, fold=fold)
        except NonFiniteLoss as exc:
            exc.context.setdefault("fold", fold)
            raise
        ckpt_path = log_path = None
        if out_dir is not None:
            fold_dir = out_dir / f"fold{fold}"
            fold_dir.mkdir(parents=True, exist_ok=True)
            ckpt_path = str(fold_dir / "best.pt")
            log_path = str(fold_dir / "log.jsonl")
            save_state_checkpoint(ckpt_path, res.best_state, cfg,
                                  {"fold": fold, "val_ids": val_ids, "train_ids": train_ids,
                                   "best": res.best_dice, "ablation": cfg.ablation})
            res.log.write(log_path)
        log.info("fold %d best %s", fold, res.best_dice)
        results.append(FoldResult(fold, ckpt_path, log_path, res.best_dice, res.log,
                                  train_ids, val_ids))
    return results
