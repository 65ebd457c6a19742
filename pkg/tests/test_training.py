import math

import numpy as np
import pytest

from sbirlab import autodiff as ad
from sbirlab import formats
from sbirlab.encoders import CnnEncoderConfig, EmbeddingPool, embed
from sbirlab.sampling import BatchSpec, Strategy
from sbirlab.training import (LossConfig, TrainingDiverged, TrainSchedule, finetune,
                              multitask_loss, train, triplet_loss, triplet_terms)

from oracles import check_gradients


def _t(x, grad=False):
    return ad.Tensor(np.asarray(x, dtype=float), requires_grad=grad)


def test_hinge_clamps_when_negative_is_far_enough():
    a = _t([[0.0, 0.0]])
    n = _t([[1.0, 2.0]])  # squared distance 5
    assert triplet_loss(a, a, n, margin=3.0).item() == 0.0


def test_direct_substitution():
    a, p, n = _t([[0.0, 0.0]]), _t([[1.0, 0.0]]), _t([[1.0, 1.0]])
    assert triplet_loss(a, p, n, margin=3.0).item() == 2.0


def test_loss_is_batch_mean_and_rejects_mismatched_dims(rng):
    a, p, n = (_t(rng.normal(size=(6, 4))) for _ in range(3))
    terms = triplet_terms(a, p, n, 3.0).data
    assert triplet_loss(a, p, n, 3.0).item() == pytest.approx(terms.mean(), abs=1e-15)
    with pytest.raises(ValueError):
        triplet_loss(a, p, _t(rng.normal(size=(6, 5))))


def test_hinge_nonnegative_and_zero_iff_margin_met(rng):
    for _ in range(200):
        a, p, n = (rng.normal(size=(1, 3)) * 2 for _ in range(3))
        margin = rng.uniform(0.1, 4)
        val = triplet_loss(_t(a), _t(p), _t(n), margin).item()
        gap = ((a - n) ** 2).sum() - ((a - p) ** 2).sum()
        assert val >= 0
        assert (val == 0) == (gap >= margin)


def test_triplet_gradient_matches_finite_differences(rng):
    worst = 0.0
    for _ in range(20):
        leaves = [_t(rng.normal(size=(5, 4)), grad=True) for _ in range(3)]
        margin = 3.0
        a, p, n = (t.data for t in leaves)
        pre = ((a - p) ** 2).sum(1) - ((a - n) ** 2).sum(1) + margin
        if np.min(np.abs(pre)) < 1e-2:  # too close to the kink for a central difference
            continue
        worst = max(worst, check_gradients(lambda: triplet_loss(*leaves, margin), leaves, eps=1e-5))
    assert worst < 1e-6


def test_inactive_triplets_contribute_zero_gradient():
    a = _t([[0.0, 0.0], [0.0, 0.0]], grad=True)
    p = _t([[0.0, 0.0], [1.0, 0.0]], grad=True)
    n = _t([[5.0, 0.0], [1.0, 1.0]], grad=True)  # row 0 satisfied, row 1 active
    with ad.Tape() as tape:
        loss = triplet_loss(a, p, n, 3.0)
    ad.backward(loss, tape)
    for t in (a, p, n):
        assert np.all(t.grad[0] == 0.0)
        assert np.any(t.grad[1] != 0.0)


def test_zero_weight_returns_triplet_exactly(rng):
    trip = triplet_loss(*(_t(rng.normal(size=(4, 3))) for _ in range(3)))
    logits = _t(rng.normal(size=(4, 10)))
    assert multitask_loss(trip, logits, logits, [0, 1, 2, 3], weight=0.0).item() == trip.item()


def test_uniform_logits_give_log_ten():
    trip = _t(0.0)
    zeros = _t(np.zeros((7, 10)))
    total = multitask_loss(trip, zeros, zeros, np.arange(7) % 10, weight=1.0)
    assert total.item() == pytest.approx(math.log(10), abs=1e-12)
    assert math.log(10) == pytest.approx(2.302585, abs=1e-6)


def test_label_out_of_range_rejected():
    zeros = _t(np.zeros((2, 10)))
    with pytest.raises(ValueError):
        multitask_loss(_t(0.0), zeros, zeros, [0, 10])


def test_multitask_gradient_through_both_branches(rng):
    leaves = [_t(rng.normal(size=(4, 3)), grad=True) for _ in range(3)]
    pl, sl = _t(rng.normal(size=(4, 5)), grad=True), _t(rng.normal(size=(8, 5)), grad=True)
    labels, slabels = rng.integers(0, 5, 4), rng.integers(0, 5, 8)

    def build():
        return multitask_loss(triplet_loss(*leaves, 3.0), pl, sl, labels, slabels, weight=0.7)
    assert check_gradients(build, leaves + [pl, sl]) < 1e-4


@pytest.mark.parametrize("kwargs", [
    dict(epochs=3, drop_epoch=3),
    dict(initial_lr=1e-5, dropped_lr=1e-4),
    dict(dropped_lr=1e-6, finetune_lr=1e-6),
    dict(finetune_lr=0.0),
    dict(batch_size=0),
])
def test_schedule_validation(kwargs):
    with pytest.raises(ValueError):
        TrainSchedule(**kwargs)


def test_lr_drops_exactly_once():
    s = TrainSchedule(epochs=6, drop_epoch=3, initial_lr=1e-3, dropped_lr=1e-4)
    assert [s.lr_at(e) for e in range(6)] == [1e-3] * 3 + [1e-4] * 3


# -- loop ----------------------------------------------------------------------

TOY_CFG = CnnEncoderConfig(stage_channels=(4, 8), input_size=(16, 16), num_classes=3)
TOY_SCHED = TrainSchedule(epochs=2, drop_epoch=1, batch_size=6, initial_lr=3e-3, dropped_lr=1e-3,
                          finetune_lr=1e-4, seed=3)


@pytest.fixture(scope="module")
def toy_four(tiny_dataset):
    return tiny_dataset.subset([0, 1, 4, 8], "toy")


@pytest.fixture(scope="module")
def toy_ckpt(tiny_dataset):
    return train(tiny_dataset, TOY_CFG, TOY_CFG, BatchSpec(), LossConfig(), TOY_SCHED)


def test_one_epoch_smoke_on_four_instances(toy_four):
    sched = TrainSchedule(epochs=2, drop_epoch=1, batch_size=4, initial_lr=1e-3, dropped_lr=1e-4,
                          finetune_lr=1e-5)
    ckpt = train(toy_four, TOY_CFG, TOY_CFG, BatchSpec(), LossConfig(), sched)
    fresh = train(toy_four, TOY_CFG, TOY_CFG, BatchSpec(), LossConfig(),
                  TrainSchedule(epochs=1, drop_epoch=0, batch_size=4, initial_lr=1e-3,
                                dropped_lr=1e-4, finetune_lr=1e-5))
    assert len(fresh.history) == 1 and math.isfinite(fresh.history[0]["loss"])
    assert ckpt.epoch == 2 and [h["lr"] for h in ckpt.history] == [1e-3, 1e-4]
    from sbirlab.encoders import init_params
    from sbirlab.training import _seeds
    init = init_params(TOY_CFG, _seeds(sched.seed)[0])
    assert any(not np.array_equal(init[k].data, fresh.photo_params[k]) for k in init)


def test_training_is_deterministic(tiny_dataset, toy_ckpt):
    again = train(tiny_dataset, TOY_CFG, TOY_CFG, BatchSpec(), LossConfig(), TOY_SCHED)
    assert formats.checkpoint_to_bytes(again) == formats.checkpoint_to_bytes(toy_ckpt)


def test_different_seed_differs(tiny_dataset, toy_ckpt):
    from dataclasses import replace
    other = train(tiny_dataset, TOY_CFG, TOY_CFG, BatchSpec(), LossConfig(), replace(TOY_SCHED, seed=4))
    assert formats.checkpoint_to_bytes(other) != formats.checkpoint_to_bytes(toy_ckpt)


def test_encoders_are_updated_independently(toy_ckpt):
    assert toy_ckpt.photo_params.keys() == toy_ckpt.sketch_params.keys()
    assert any(not np.array_equal(toy_ckpt.photo_params[k], toy_ckpt.sketch_params[k])
               for k in toy_ckpt.photo_params)


def test_zero_lr_finetune_leaves_params_unchanged(tiny_dataset, toy_ckpt):
    out = finetune(toy_ckpt, tiny_dataset, BatchSpec(), TOY_SCHED, lr=0.0, epochs=1)
    for side in ("photo_params", "sketch_params"):
        a, b = getattr(toy_ckpt, side), getattr(out, side)
        assert all(np.array_equal(a[k], b[k]) for k in a)
    assert out.epoch == toy_ckpt.epoch + 1


@pytest.mark.parametrize("strategy", list(Strategy))
def test_finetune_preserves_embedding_dim(tiny_dataset, toy_ckpt, strategy):
    spec = BatchSpec(strategy=strategy, category_repeat_range=(2, 3))
    out = finetune(toy_ckpt, tiny_dataset, spec, TOY_SCHED, epochs=1)
    probe = tiny_dataset.photos[:3]
    assert embed(out.photo_tensors(), out.photo_config, probe).shape == (3, TOY_CFG.embedding_dim)
    assert out.history[-1]["strategy"] == strategy.value
    assert out.history[-1]["lr"] == TOY_SCHED.finetune_lr


def test_pool_swap_finetune_quadruples_dim(tiny_dataset, toy_ckpt):
    out = finetune(toy_ckpt, tiny_dataset, BatchSpec(), TOY_SCHED, epochs=1,
                   embedding_pool=EmbeddingPool.SPATIAL_2X2)
    assert out.photo_config.embedding_dim == 4 * TOY_CFG.embedding_dim


def test_config_mismatch_rejected(tiny_dataset, toy_ckpt):
    wrong = CnnEncoderConfig(stage_channels=(4, 8), input_size=(16, 16), num_classes=5)
    with pytest.raises(ValueError):
        train(tiny_dataset, wrong, wrong, BatchSpec(), LossConfig(), TOY_SCHED)
    from dataclasses import replace
    with pytest.raises(ValueError):
        finetune(replace(toy_ckpt, photo_config=wrong), tiny_dataset, BatchSpec(), TOY_SCHED)


def test_divergence_aborts_with_diagnostic(tiny_dataset, toy_ckpt):
    from dataclasses import replace
    bad = dict(toy_ckpt.photo_params)
    bad["fc.w"] = np.full_like(bad["fc.w"], np.nan)
    with pytest.raises(TrainingDiverged, match="non-finite loss"):
        finetune(replace(toy_ckpt, photo_params=bad), tiny_dataset, BatchSpec(), TOY_SCHED, epochs=1)


@pytest.mark.slow
def test_loss_decreases_over_five_seeds(tiny_dataset):
    first, last = [], []
    for seed in range(5):
        sched = TrainSchedule(epochs=40, drop_epoch=30, batch_size=12, initial_lr=3e-3, dropped_lr=1e-3,
                              finetune_lr=1e-4, seed=seed)
        h = train(tiny_dataset, TOY_CFG, TOY_CFG, BatchSpec(), LossConfig(), sched).history
        first.append(h[0]["loss"])
        last.append(h[-1]["loss"])
    assert np.mean(last) < np.mean(first)
