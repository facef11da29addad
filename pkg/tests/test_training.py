import itertools
import math

import numpy as np
import pytest
import torch

from strokeseg.data import extract_slices, make_folds, synth_case
from strokeseg.errors import DataError, NonFiniteLoss, UnknownTag
from strokeseg.losses import LossWeights
from strokeseg.training import (ABLATIONS, TrainConfig, TrainLog, ablation_flags, build_models,
                                collate, fit, frozen, load_checkpoint, make_optimizers,
                                save_checkpoint, seed_everything, train, train_step)
from strokeseg.evaluation import evaluate_fold, mean_scores


def _cfg(tiny_widths, **kw):
    base = dict(encoder_widths=tiny_widths, disc_base_width=8, batch_size=2, lr_segmenter=1e-3,
                lr_discriminators=1e-3)
    base.update(kw)
    return TrainConfig(**base)


def _batch(seed=0, n=2, shape=(2, 64, 64)):
    samples = extract_slices(synth_case(seed, shape))[:n]
    return collate(samples)


def test_ablation_flags_table_rows():
    assert ablation_flags("BL1") == (False, False, False)
    assert ablation_flags("PROPOSED") == (True, True, True)
    assert ablation_flags("BL6") == (True, False, True)
    assert ablation_flags("proposed") == ablation_flags("PROPOSED")
    with pytest.raises(UnknownTag, match="BL1"):
        ablation_flags("BL9")


def test_ablation_grid_is_bijective():
    assert len(ABLATIONS) == 8
    assert set(ABLATIONS.values()) == set(itertools.product((False, True), repeat=3))


def test_effective_weights():
    w = LossWeights(1.0, 0.5, 2.0, 0.3)
    assert TrainConfig(ablation="BL1", loss_weights=w).effective_weights() == LossWeights(1.0, 0, 0, 0)
    assert TrainConfig(ablation="BL4", loss_weights=w).effective_weights() == w
    assert TrainConfig(ablation="BL6", loss_weights=w).effective_weights() == LossWeights(1.0, 0.5, 2.0, 0)
    assert TrainConfig(ablation="BL7", loss_weights=w).effective_weights() == LossWeights(1.0, 0, 0, 0.3)
    assert not TrainConfig(ablation="BL1").segmenter_config().residual
    assert TrainConfig(ablation="BL5").segmenter_config().residual


def test_collate_pads_to_largest():
    a = extract_slices(synth_case(0, (1, 64, 64)))[0]
    b = extract_slices(synth_case(1, (1, 96, 64)))[0]
    batch = collate([a, b])
    assert batch["input"].shape == (2, 3, 96, 64)
    assert (batch["weights"][0, 64:] == 1).all() and (batch["labels"][0, 64:] == 0).all()


def _disc_snapshot(discs):
    return {k: v.clone() for k, v in discs.state_dict().items()}


def test_non_adversarial_step_leaves_discriminators(tiny_widths):
    cfg = _cfg(tiny_widths, ablation="BL6")
    seed_everything(0)
    seg, discs = build_models(cfg)
    opts = make_optimizers(seg, discs, cfg)
    before = _disc_snapshot(discs)
    for _ in range(3):
        rep = train_step(seg, discs, _batch(), cfg, *opts)
        assert rep.adv_g == rep.adv_d_core == rep.adv_d_pen == rep.adv_d_pair == 0.0
    after = discs.state_dict()
    assert all(torch.equal(before[k], after[k]) for k in before)


def test_zero_adv_weight_freezes_discriminators(tiny_widths):
    cfg = _cfg(tiny_widths, ablation="BL5", loss_weights=LossWeights(adv=0.0))
    seed_everything(1)
    seg, discs = build_models(cfg)
    opts = make_optimizers(seg, discs, cfg)
    before = _disc_snapshot(discs)
    for _ in range(4):
        train_step(seg, discs, _batch(), cfg, *opts)
    assert all(torch.equal(before[k], discs.state_dict()[k]) for k in before)


def test_adversarial_step_updates_everything(tiny_widths):
    cfg = _cfg(tiny_widths, ablation="PROPOSED")
    seed_everything(0)
    seg, discs = build_models(cfg)
    opts = make_optimizers(seg, discs, cfg)
    before = _disc_snapshot(discs)
    rep = train_step(seg, discs, _batch(), cfg, *opts)
    assert rep.all_finite() and rep.adv_g > 0 and rep.adv_d_pair > 0
    w = rep.weights
    assert rep.total == pytest.approx(w.ce * rep.ce + w.ls * rep.ls + w.bd * rep.bd + w.adv * rep.adv_g,
                                      rel=1e-5)
    changed = [k for k in before if not torch.equal(before[k], discs.state_dict()[k])]
    assert any(k.startswith("core.") for k in changed) and any(k.startswith("pair.") for k in changed)
    # discriminator gradients are cleared after their own steps
    assert all(p.grad is None for p in discs.parameters())


def test_generator_pass_leaves_no_discriminator_gradients(tiny_widths):
    cfg = _cfg(tiny_widths, ablation="PROPOSED")
    seg, discs = build_models(cfg)
    x = torch.randn(2, 4, 32, 32, requires_grad=True)
    with frozen(discs):
        discs["core"](x).sum().backward()
    assert x.grad is not None
    assert all(p.grad is None for p in discs.parameters())
    assert all(p.requires_grad for p in discs.parameters())


def test_step_decreases_generator_loss(tiny_widths):
    """Majority of 5 independent single steps reduce the loss on their own batch."""
    decreases = 0
    for rep in range(5):
        cfg = _cfg(tiny_widths, ablation="BL6", lr_segmenter=1e-4, seed=rep)
        seed_everything(rep)
        seg, discs = build_models(cfg)
        opts = make_optimizers(seg, discs, cfg)
        batch = _batch(seed=rep)
        first = train_step(seg, discs, batch, cfg, *opts).total
        second = train_step(seg, discs, batch, cfg, *opts).total
        decreases += second < first
    assert decreases >= 3


def test_nonfinite_loss_raises(tiny_widths):
    cfg = _cfg(tiny_widths, ablation="BL1")
    seg, discs = build_models(cfg)
    opts = make_optimizers(seg, discs, cfg)
    batch = _batch()
    batch["input"][0, 0, 0, 0] = float("nan")
    with pytest.raises(NonFiniteLoss) as err:
        train_step(seg, discs, batch, cfg, *opts, context={"iteration": 7})
    assert err.value.context["iteration"] == 7


def test_losses_stay_finite_200_steps(tiny_widths):
    cfg = _cfg(tiny_widths, ablation="PROPOSED", lr_segmenter=1e-4, lr_discriminators=1e-4)
    seed_everything(0)
    seg, discs = build_models(cfg)
    opts = make_optimizers(seg, discs, cfg)
    samples = extract_slices(synth_case(3, (4, 64, 64)))
    for i in range(200):
        rep = train_step(seg, discs, collate(samples[(i % 2) * 2 : (i % 2) * 2 + 2]), cfg, *opts)
        assert rep.all_finite(), (i, rep)


def test_fit_tracks_best(tiny_widths):
    cfg = _cfg(tiny_widths, ablation="BL5", epochs=3, val_every=1)
    seed_everything(0)
    seg, discs = build_models(cfg)
    case = synth_case(0, (2, 64, 64))
    res = fit(seg, discs, extract_slices(case), [case], cfg)
    vals = res.log.validations()
    assert len(vals) == 3 and res.iterations == 3
    assert res.best_dice["mean"] == max(v["mean"] for v in vals)
    its = [r["iteration"] for r in res.log.iterations()]
    assert its == sorted(its) == list(range(1, 4))


def test_max_iterations_caps_training(tiny_widths):
    cfg = _cfg(tiny_widths, ablation="BL1", epochs=10, batch_size=1, max_iterations=3,
               val_every=5)
    seg, discs = build_models(cfg)
    case = synth_case(0, (2, 64, 64))
    res = fit(seg, discs, extract_slices(case), [case], cfg)
    assert res.iterations == 3 and len(res.log.validations()) == 1


def test_stop_at_dice_ends_after_first_hit(tiny_widths):
    # any Dice is >= 0, so the first validation ends the run
    cfg = _cfg(tiny_widths, ablation="BL1", epochs=10, batch_size=1, stop_at_dice=0.0)
    seg, discs = build_models(cfg)
    case = synth_case(0, (2, 64, 64))
    res = fit(seg, discs, extract_slices(case), [case], cfg)
    assert res.iterations == 2 and len(res.log.validations()) == 1


def test_checkpoint_roundtrip(tmp_path, tiny_widths):
    cfg = _cfg(tiny_widths, ablation="BL7", epochs=2)
    seed_everything(0)
    seg, discs = build_models(cfg)
    case = synth_case(0, (2, 64, 64))
    fit(seg, discs, extract_slices(case), [case], cfg)
    save_checkpoint(tmp_path / "c.pt", seg, discs, cfg, {"fold": 0})
    seg2, discs2, cfg2, meta = load_checkpoint(tmp_path / "c.pt")
    assert cfg2.to_dict() == cfg.to_dict() and meta == {"fold": 0}
    a = mean_scores(evaluate_fold(seg, [case]))
    b = mean_scores(evaluate_fold(seg2, [case]))
    assert abs(a.penumbra - b.penumbra) < 1e-6 and abs(a.core - b.core) < 1e-6
    keys = torch.load(tmp_path / "c.pt", weights_only=False)["params"].keys()
    assert any(k.startswith("encoder.block1.conv1.") for k in keys)
    assert any(k.startswith("decoder.block1.") for k in keys)
    assert {k.split(".")[1] for k in keys if k.startswith("disc.")} == {"core", "pen", "pair"}


def test_train_writes_fold_outputs(tmp_path, tiny_widths):
    cases = [synth_case(s, (1, 64, 64), case_id=f"c{s}") for s in range(6)]
    folds = make_folds([c.case_id for c in cases], 3, seed=0)
    cfg = _cfg(tiny_widths, ablation="BL1", epochs=1)
    results = train(cases, folds, cfg, out_dir=tmp_path)
    assert len(results) == 3
    for r in results:
        assert (tmp_path / f"fold{r.fold}" / "best.pt").exists()
        log = TrainLog.read(r.log_path)
        assert log.validations() and all(math.isfinite(v["mean"]) for v in log.validations())
        assert not set(r.train_ids) & set(r.val_ids)
        assert sorted(r.train_ids + r.val_ids) == sorted(c.case_id for c in cases)


def test_train_rejects_leaky_split(tiny_widths):
    from strokeseg.data import FoldSplit

    cases = [synth_case(s, (1, 64, 64), case_id=f"c{s}") for s in range(3)]
    bad = FoldSplit(folds=[["c0", "c1"], ["c1", "c2"]], seed=0)
    with pytest.raises(DataError, match="both train and validation"):
        train(cases, bad, _cfg(tiny_widths, epochs=1))
