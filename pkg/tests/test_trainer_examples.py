"""Seeded desk-config behaviour of the trainer and both baselines (T=2000, five seeds)."""

import numpy as np
import pytest

from conftest import SEEDS


def test_sl_reaches_high_train_accuracy(runs):
    for s in SEEDS:
        assert runs.final("sl", 0.3, s)["train_accuracy"] >= 0.95


def test_sl_train_risk_nonincreasing_over_logged_epochs(runs):
    for s in SEEDS:
        risk = [r["train_risk"] for r in runs.run("sl", 0.3, s).metrics.records]
        assert np.all(np.diff(risk) <= 0), s


def test_nsl_degrades_under_heavy_noise(runs):
    worse = sum(runs.final("nsl", 0.5, s)["test_accuracy"] < runs.final("sl", 0.5, s)["test_accuracy"]
                for s in SEEDS)
    assert worse >= 4


@pytest.mark.xfail(strict=True, reason="NSL ties or trails SL at gamma=0 on 4/5 seeds "
                   "(seed 0: SL 0.994, NSL 0.990); SL is already near ceiling on desk data")
def test_nsl_at_least_sl_on_clean_pool(runs):
    for s in SEEDS:
        assert runs.final("nsl", 0.0, s)["test_accuracy"] >= runs.final("sl", 0.0, s)["test_accuracy"]


@pytest.mark.xfail(strict=True, reason="at eta_alpha=0.01 the weights barely move; TRW ties or "
                   "trails SL on every seed (e.g. 0.990 vs 0.994 at seed 0)")
def test_trireweight_strictly_beats_sl_at_small_meta_rate(runs):
    for s in SEEDS:
        trw = runs.final("trireweight", 0.3, s, eta_alpha=0.01)["test_accuracy"]
        assert trw > runs.final("sl", 0.3, s)["test_accuracy"]


@pytest.mark.xfail(strict=True, reason="with a clean pool the mean weight stays near the "
                   "initial weight-net output: 0.516, 0.442, 0.434, 0.574, 0.449 over seeds 0-4")
def test_clean_pool_mean_weight_at_least_half(runs):
    for s in SEEDS:
        assert runs.final("trireweight", 0.0, s)["mean_weight"] >= 0.5
