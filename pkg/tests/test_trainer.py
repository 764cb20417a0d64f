import math
from dataclasses import replace

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from patchdropout.data import Dataset
from patchdropout.errors import DivergedLoss
from patchdropout.experiments import desk_config, desk_model
from patchdropout.numerics import Tensor
from patchdropout.trainer import (
    LOG_COLUMNS, TrainConfig, lr_at, smoothed_cross_entropy, target_entropy, train, with_sampling,
)


def test_cross_entropy_uniform_logits():
    for alpha in (0.0, 0.1):
        loss = smoothed_cross_entropy(Tensor(np.zeros((3, 10))), [0, 4, 9], alpha)
        assert float(loss.data) == pytest.approx(math.log(10), abs=1e-12)


def test_cross_entropy_against_extended_precision():
    mpmath.mp.dps = 50
    logz = mpmath.log(mpmath.e**2 + 1)
    logp = [2 - logz, -logz]
    target = [mpmath.mpf("0.95"), mpmath.mpf("0.05")]
    expected = float(-(target[0] * logp[0] + target[1] * logp[1]))
    got = float(smoothed_cross_entropy(Tensor([[2.0, 0.0]]), [0], 0.1).data)
    assert abs(got - expected) < 1e-10


@settings(max_examples=100, deadline=None)
@given(
    k=st.integers(2, 12), b=st.integers(1, 6), alpha=st.floats(0.0, 0.9), seed=st.integers(0, 2**31),
)
def test_loss_bounded_by_target_entropy(k, b, alpha, seed):
    rng = np.random.default_rng(seed)
    logits = Tensor(rng.standard_normal((b, k)) * 5)
    labels = rng.integers(0, k, b)
    assert float(smoothed_cross_entropy(logits, labels, alpha).data) >= target_entropy(k, alpha) - 1e-9


def test_lr_schedule():
    cfg = TrainConfig(model=desk_model(), base_lr=0.1, warmup_epochs=2, epochs=5)
    spe = 10
    assert lr_at(0, cfg, spe) == pytest.approx(0.1 / 20)
    assert lr_at(19, cfg, spe) == 0.1
    assert lr_at(500, cfg, spe) == 0.1
    assert abs(lr_at(9, cfg, spe) - 0.05) <= 0.1 / 20
    assert lr_at(0, replace(cfg, warmup_epochs=0), spe) == 0.1


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(model=desk_model(), epochs=1, warmup_epochs=2)
    with pytest.raises(ValueError):
        TrainConfig(model=desk_model(), label_smoothing=1.0)
    cfg = TrainConfig(model=desk_model())
    assert (cfg.sampling.grid_rows, cfg.sampling.grid_cols) == (8, 8)


def quick(seed=0, **kw):
    kw.setdefault("epochs", 1)
    kw.setdefault("warmup_epochs", 1)
    return desk_config(seed=seed, **kw)


def test_identical_configs_give_identical_bytes(small_bench):
    a = train(quick(keep_rate=0.5), small_bench)
    b = train(quick(keep_rate=0.5), small_bench)
    assert a.log.to_csv() == b.log.to_csv()
    assert a.checkpoint() == b.checkpoint()
    assert a.log.to_csv().splitlines()[0] == ",".join(LOG_COLUMNS)


def test_rate_one_matches_dropout_free_path(small_bench):
    a = train(quick(keep_rate=1.0), small_bench)
    b = train(quick(keep_rate=1.0, patch_dropout=False), small_bench)
    assert a.checkpoint() == b.checkpoint()
    assert [s.loss for s in a.log.steps] == [s.loss for s in b.log.steps]


def test_decay_exemption_changes_trajectory(small_bench):
    a = train(quick(), small_bench)
    b = train(quick(decay_exempt=True), small_bench)
    assert a.checkpoint() != b.checkpoint()


def test_every_step_uses_floor_sequence_length(small_bench):
    res = train(quick(keep_rate=0.3, strategy="structured"), small_bench)
    assert {s.seq_len for s in res.log.steps} == {math.floor(0.3 * 64) + 1}


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_diverging_loss_aborts(small_bench):
    with pytest.raises(DivergedLoss):
        train(quick(base_lr=1e12, warmup_epochs=0), small_bench)


def test_half_rate_flop_ratio(small_bench):
    full = train(quick(keep_rate=1.0), small_bench)
    half = train(quick(keep_rate=0.5), small_bench)
    ratio = half.cum_flops / full.cum_flops
    assert 0.375 <= ratio <= 0.55


def test_early_stopping_and_best_checkpoint(small_bench):
    res = train(quick(epochs=6, early_stop_patience=1, base_lr=0.0), small_bench)
    # nothing changes, so the first epoch stays best and patience ends the run
    assert res.epochs_run == 2 and res.best_epoch == 0


def separable(n=256, seed=0):
    """Horizontal vs vertical stripes at a fixed phase: linearly separable in pixel space."""
    rng = np.random.default_rng(seed)
    y = rng.permutation(np.arange(n) % 2)
    x = 0.5 + 0.1 * rng.standard_normal((n, 1, 32, 32))
    x[y == 0] += 0.2 * (np.arange(32)[:, None] % 2 - 0.5)
    x[y == 1] += 0.2 * (np.arange(32)[None, :] % 2 - 0.5)
    img = np.clip(np.round(x * 255), 0, 255).astype(np.uint8)
    return Dataset(img, y, 2, {"train": np.arange(n), "val": np.arange(0), "test": np.arange(0)})


def test_separable_two_class_set_is_learned():
    cfg = desk_config(model=desk_model(classes=2), epochs=5, warmup_epochs=1, base_lr=0.01)
    rows = train(cfg, separable()).log.split_rows("train")
    losses = [r["loss"] for r in rows]
    assert all(b < a for a, b in zip(losses, losses[1:]))
    assert rows[-1]["top1"] >= 0.95


def test_with_sampling_keeps_grid():
    cfg = with_sampling(quick(), keep_rate=0.25)
    assert cfg.sampling.keep_rate == 0.25 and cfg.sampling.grid_rows == 8
