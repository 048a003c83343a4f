"""Optimizer against a frozen scalar oracle, and the fit() contracts:
bitwise determinism, resume, zero-epoch identity, log schema."""

import csv
import math

import numpy as np
import pytest

from monovit import trainer
from monovit.checkpoint import load as load_ckpt
from monovit.module import Parameter
from monovit.trainer import (AdamW, Models, NumericError, TrainConfig,
                             build_models, fit, param_groups, train_step)

# Reference trajectory computed with an independent AdamW implementation:
# p0 = 1, loss = p^2/2 (so grad = p), lr = 0.1, wd = 0.01,
# betas (0.9, 0.999), eps 1e-8.
ORACLE_QUADRATIC = (0.89900000099999999, 0.79851902818877873,
                    0.69891118471569325)
# p0 = -0.5, loss = 1.5 p^2, lr = 0.05, two steps, same betas/wd.
ORACLE_SECOND = -0.39973268687263752


def test_adamw_matches_scalar_oracle():
    p = Parameter(np.array(1.0))
    opt = AdamW([("p", p, 0.1)], weight_decay=0.01)
    for expected in ORACLE_QUADRATIC:
        p.grad = p.data.copy()
        opt.step()
        assert math.isclose(float(p.data), expected, rel_tol=0, abs_tol=1e-15)


def test_adamw_second_oracle_other_lr():
    p = Parameter(np.array(-0.5))
    opt = AdamW([("p", p, 0.05)], weight_decay=0.01)
    for _ in range(2):
        p.grad = 3.0 * p.data
        opt.step()
    assert math.isclose(float(p.data), ORACLE_SECOND, rel_tol=0, abs_tol=1e-15)


def test_adamw_zero_lr_freezes_parameter():
    p = Parameter(np.array([2.0, -3.0]))
    opt = AdamW([("p", p, 0.0)], weight_decay=0.01)
    for _ in range(3):
        p.grad = np.ones(2)
        opt.step()
    np.testing.assert_array_equal(p.data, [2.0, -3.0])


def test_adamw_moments_shaped_like_parameters():
    p = Parameter(np.zeros((3, 4)))
    opt = AdamW([("p", p, 0.1)])
    assert opt.m["p"].shape == (3, 4) and opt.v["p"].shape == (3, 4)


def test_adamw_rejects_duplicate_names():
    a, b = Parameter(np.zeros(1)), Parameter(np.zeros(1))
    with pytest.raises(ValueError):
        AdamW([("p", a, 0.1), ("p", b, 0.1)])


def test_config_rejects_encoder_lr_above_decoder_lr(tmp_path):
    with pytest.raises(ValueError):
        TrainConfig(data_dir=".", out_dir=str(tmp_path),
                    lr_encoder=2e-4, lr_posenet_decoder=1e-4)


def _tiny_cfg(data_dir, out_dir, enc, **kw):
    return TrainConfig(data_dir=str(data_dir), out_dir=str(out_dir),
                       encoder=enc, epochs=kw.pop("epochs", 1),
                       batch_size=kw.pop("batch_size", 2),
                       checkpoint_every=0, seed=kw.pop("seed", 3), **kw)


def test_split_lrs_assign_groups(tiny_dataset, tiny_encoder_config, tmp_path):
    cfg = _tiny_cfg(tiny_dataset[0], tmp_path, tiny_encoder_config)
    models = build_models(cfg)
    rows = param_groups(models, cfg)
    by_group = {}
    for name, _, lr in rows:
        by_group.setdefault(name.split(".")[0], set()).add(lr)
    assert by_group["encoder"] == {cfg.lr_encoder}
    assert by_group["decoder"] == {cfg.lr_posenet_decoder}
    assert by_group["pose"] == {cfg.lr_posenet_decoder}


def test_zero_lr_steps_are_identical(tiny_dataset, tiny_encoder_config, tmp_path):
    _, triplets = tiny_dataset
    cfg = _tiny_cfg(tiny_dataset[0], tmp_path, tiny_encoder_config,
                    lr_posenet_decoder=0.0, lr_encoder=0.0)
    models = build_models(cfg)
    opt = AdamW(param_groups(models, cfg))
    first = train_step(triplets[:2], models, opt, cfg)
    second = train_step(triplets[:2], models, opt, cfg)
    assert first == second


def test_clip_at_infinity_is_identity(tiny_dataset, tiny_encoder_config, tmp_path):
    _, triplets = tiny_dataset
    finals = []
    for clip in (0.0, float("inf")):
        cfg = _tiny_cfg(tiny_dataset[0], tmp_path / f"c{clip}",
                        tiny_encoder_config, clip_grad=clip)
        models = build_models(cfg)
        opt = AdamW(param_groups(models, cfg))
        train_step(triplets[:1], models, opt, cfg)
        finals.append({n: p.data.copy() for n, p in models.named_parameters()})
    for name in finals[0]:
        np.testing.assert_array_equal(finals[0][name], finals[1][name])


def test_clip_shrinks_large_gradients():
    p = Parameter(np.array([3.0, 4.0]))
    p.grad = np.array([3.0, 4.0])  # norm 5
    norm = trainer.clip_gradients([p], 1.0)
    assert math.isclose(norm, 5.0)
    assert math.isclose(float(np.linalg.norm(p.grad)), 1.0)


def test_nonfinite_loss_names_batch(tiny_dataset, tiny_encoder_config, tmp_path):
    _, triplets = tiny_dataset
    cfg = _tiny_cfg(tiny_dataset[0], tmp_path, tiny_encoder_config)
    models = build_models(cfg)
    opt = AdamW(param_groups(models, cfg))
    import dataclasses
    bad = dataclasses.replace(triplets[0],
                              target=np.full_like(triplets[0].target, np.nan))
    with pytest.raises(NumericError, match=r"\[7\]"):
        train_step([bad], models, opt, cfg, batch_ids=[7])


def test_fit_is_bitwise_deterministic(tiny_dataset, tiny_encoder_config, tmp_path):
    paths = []
    for name in ("a", "b"):
        cfg = _tiny_cfg(tiny_dataset[0], tmp_path / name, tiny_encoder_config)
        _, ckpt = fit(cfg)
        paths.append(ckpt)
    with open(paths[0], "rb") as f1, open(paths[1], "rb") as f2:
        assert f1.read() == f2.read()


def test_zero_epochs_equals_init(tiny_dataset, tiny_encoder_config, tmp_path):
    cfg = _tiny_cfg(tiny_dataset[0], tmp_path, tiny_encoder_config, epochs=0)
    _, ckpt = fit(cfg)
    stored = load_ckpt(ckpt)
    fresh = build_models(cfg)
    for name, p in fresh.named_parameters():
        np.testing.assert_array_equal(stored[f"model.{name}"], p.data)
    assert int(stored["step"]) == 0


def test_resume_matches_straight_run(tiny_dataset, tiny_encoder_config, tmp_path):
    cfg_all = _tiny_cfg(tiny_dataset[0], tmp_path / "straight",
                        tiny_encoder_config, epochs=2)
    _, ckpt_all = fit(cfg_all)

    cfg_half = _tiny_cfg(tiny_dataset[0], tmp_path / "resumed",
                         tiny_encoder_config, epochs=1)
    fit(cfg_half)
    cfg_rest = _tiny_cfg(tiny_dataset[0], tmp_path / "resumed",
                         tiny_encoder_config, epochs=2)
    _, ckpt_res = fit(cfg_rest, resume=True)

    with open(ckpt_all, "rb") as f1, open(ckpt_res, "rb") as f2:
        assert f1.read() == f2.read()


def test_log_schema_and_row_count(tiny_dataset, tiny_encoder_config, tmp_path):
    cfg = _tiny_cfg(tiny_dataset[0], tmp_path, tiny_encoder_config, epochs=2)
    fit(cfg)
    with open(tmp_path / "train_log.csv", newline="") as f:
        rows = list(csv.reader(f))
    assert tuple(rows[0]) == trainer.LOG_COLUMNS
    steps_per_epoch = math.ceil(3 / cfg.batch_size)
    assert len(rows) - 1 == cfg.epochs * steps_per_epoch
    for row in rows[1:]:
        assert all(np.isfinite(float(x)) for x in row)
    assert [int(r[0]) for r in rows[1:]] == list(range(1, len(rows)))


def test_loss_decreases_when_overfitting_one_triplet(
        tiny_dataset, tiny_encoder_config, tmp_path):
    _, triplets = tiny_dataset
    cfg = _tiny_cfg(tiny_dataset[0], tmp_path, tiny_encoder_config)
    models = build_models(cfg)
    opt = AdamW(param_groups(models, cfg))
    first = train_step(triplets[:1], models, opt, cfg).total
    last = first
    for _ in range(19):
        last = train_step(triplets[:1], models, opt, cfg).total
    assert last < first


def test_missing_dataset_fails_at_startup(tiny_encoder_config, tmp_path):
    cfg = _tiny_cfg(tmp_path / "nope", tmp_path / "out", tiny_encoder_config)
    with pytest.raises(FileNotFoundError):
        fit(cfg)
