import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from abl_lab import abl, attacks, data, metrics, nn
from abl_lab.abl import AblConfig, LossTrace, Schedule
from abl_lab.data import Dataset
from abl_lab.errors import ConfigError, InputError
from abl_lab.prng import Rng

from conftest import flatten_grads, numeric_grad


def _tiny(n=24, d=6, classes=3, seed=0):
    gen = np.random.default_rng(seed)
    return Dataset(gen.random((n, d, 1)), gen.integers(0, classes, n), classes)


def _same(a, b):
    return all(np.array_equal(x, y) for x, y in zip(a.parameters(), b.parameters()))


# loss values

def test_lga_loss_examples():
    assert abl.lga_loss_value([0.2, 0.8], 0.5) == pytest.approx(0.3)
    assert abl.lga_loss_value([0.5, 0.5], 0.5) == pytest.approx(0.5)
    assert abl.lga_loss_value([0.2, 0.9, 0.4], 0.0) == pytest.approx(0.5)


def test_lga_batch_granularity_uses_the_batch_mean():
    # mean 0.5 sits on the boundary, so the whole batch descends
    assert abl.lga_loss_value([0.2, 0.8], 0.5, "batch") == pytest.approx(0.5)
    assert abl.lga_loss_value([0.1, 0.3], 0.5, "batch") == pytest.approx(-0.2)


def test_trap_weights():
    losses = np.array([0.1, 0.5, 0.9])
    assert abl.trap_weights(losses, 0.5, "example").tolist() == [-1, 1, 1]
    assert abl.trap_weights(losses, 0.6, "batch").tolist() == [-1, -1, -1]
    assert abl.trap_weights(losses, 0.5, "batch").tolist() == [1, 1, 1]
    assert abl.trap_weights(np.zeros(0), 0.5, "batch").shape == (0,)
    with pytest.raises(ConfigError):
        abl.trap_weights(losses, 0.5, "epoch")


# training loops

def test_zero_epochs_is_a_no_op():
    d = _tiny()
    net = nn.init_network([6, 4, 3], 1)
    out, trace = abl.train_standard(net, d, Schedule.constant(0, 0.1))
    assert out is net and len(trace) == 0


def test_standard_training_is_deterministic():
    d = _tiny()
    sched = Schedule.constant(3, 0.05, batch_size=5, seed=2)
    a, ta = abl.train_standard(nn.init_network([6, 4, 3], 1), d, sched)
    b, tb = abl.train_standard(nn.init_network([6, 4, 3], 1), d, sched)
    assert _same(a, b) and np.array_equal(ta.losses, tb.losses)
    assert ta.epochs == [1, 2, 3] and ta.losses.shape == (3, 24)


@pytest.mark.parametrize("granularity", ["example", "batch"])
def test_lga_with_zero_gamma_is_standard_training(granularity):
    d = _tiny()
    a, ta = abl.train_lga(nn.init_network([6, 4, 3], 1), d, 0.0, 3, 0.05, batch_size=5, seed=7,
                          granularity=granularity)
    b, tb = abl.train_standard(nn.init_network([6, 4, 3], 1), d,
                               Schedule.constant(3, 0.05, batch_size=5, seed=7))
    assert _same(a, b) and np.array_equal(ta.losses, tb.losses)


def test_lga_step_negates_standard_step_when_every_loss_is_below_gamma():
    d = _tiny(n=8)
    net = nn.init_network([6, 4, 3], 1)
    sched = dict(batch_size=8, momentum=0.0, weight_decay=0.0, seed=0)
    assert abl.evaluate_losses(net, d.flat, d.labels).max() < 50.0
    up, _ = abl.train_lga(net, d, 50.0, 1, 0.1, granularity="example", **sched)
    down, _ = abl.train_standard(net, d, Schedule.constant(1, 0.1, **sched))
    for p0, pu, pd in zip(net.parameters(), up.parameters(), down.parameters()):
        np.testing.assert_allclose(pu - p0, -(pd - p0), atol=1e-15)


def test_lga_step_raises_a_loss_below_gamma():
    d = _tiny(n=1)
    net = nn.init_network([6, 4, 3], 3)
    before = abl.evaluate_losses(net, d.flat, d.labels)[0]
    gamma = before + 1.0
    after_net, trace = abl.train_lga(net, d, gamma, 1, 0.05, batch_size=1, momentum=0.0, weight_decay=0.0)
    assert trace.last()[0] > before


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_reports_epoch():
    d = _tiny()
    net = nn.init_network([6, 4, 3], 1)
    huge = net.with_parameters([p * 1e200 for p in net.parameters()])
    with pytest.raises(abl.TrainingDiverged) as info:
        abl.train_standard(huge, d, Schedule.constant(2, 1e10))
    assert info.value.epoch == 1


# isolation

def test_isolate_examples():
    losses = {0: 0.1, 1: 0.9, 2: 0.05, 3: 0.7}
    assert abl.isolate(losses, 0.25).isolated_ids == (2,)
    assert abl.isolate(losses, 0.5).isolated_ids == (2, 0)
    assert abl.isolate({i: 1.0 for i in range(4)}, 0.25).isolated_ids == (0,)


@pytest.mark.parametrize("p", [0.0, 1.0, -0.1, 1e-12])
def test_isolate_bad_rate(p):
    with pytest.raises(ConfigError):
        abl.isolate(np.ones(10), p)


@settings(max_examples=40, deadline=None)
@given(n=st.integers(1, 60), p=st.floats(0.01, 0.99), seed=st.integers(0, 1000))
def test_isolation_partition(n, p, seed):
    losses = np.random.default_rng(seed).integers(0, 4, n) / 4.0  # many ties
    k = math.ceil(round(p * n, 9))
    if k < 1:
        return
    res = abl.isolate(losses, p)
    iso, rem = set(res.isolated_ids), set(res.remaining_ids)
    assert not iso & rem and iso | rem == set(range(n)) and len(iso) == k
    assert max(losses[list(iso)]) <= min(losses[list(rem)], default=np.inf)


def test_isolation_uses_the_turning_epoch_row():
    trace = LossTrace(np.array([5, 6, 7]))
    trace.record(1, np.array([0.0, 1.0, 2.0]))
    trace.record(2, np.array([3.0, 2.0, 0.5]))
    assert abl.isolate(trace, 0.3).isolated_ids == (7,)
    with pytest.raises(InputError):
        trace.record(3, np.zeros(2))


# global ascent

def test_gga_needs_isolated_examples():
    d = _tiny()
    with pytest.raises(InputError):
        abl.train_gga(nn.init_network([6, 4, 3], 0), d, d.take([]), 1, 0.1)


def test_gga_single_pair_update_is_gradient_difference():
    d = _tiny(n=2)
    clean, iso = d.take([0]), d.take([1])
    net = nn.init_network([6, 5, 3], 2)
    out = abl.train_gga(net, clean, iso, 1, 0.1, ceiling=None, momentum=0.0, weight_decay=0.0)
    gc = nn.backward_weighted(net, clean.flat, clean.labels, [1.0])
    gi = nn.backward_weighted(net, iso.flat, iso.labels, [1.0])
    flat = [g for pair in gc for g in pair], [g for pair in gi for g in pair]
    for p0, p1, a, b in zip(net.parameters(), out.parameters(), *flat):
        np.testing.assert_allclose(p1 - p0, -0.1 * (a - b), atol=1e-14)


def test_gga_gradient_matches_finite_differences():
    d = _tiny(n=7)
    net = nn.init_network([6, 5, 3], 4)
    x, y = d.flat, d.labels
    wfn = abl.gga_weight_fn(4, 3, None)
    _, grads, _ = nn.weighted_loss_and_grads(net, x, y, wfn)

    def objective(ps):
        ce = nn.cross_entropy_per_example(nn.forward(net.with_parameters(ps), x), y).per_example
        return ce[:4].mean() - ce[4:].mean()

    params = [p.copy() for p in net.parameters()]
    coords = [(k, j) for k, p in enumerate(params) for j in range(p.size)]
    fd = numeric_grad(objective, params, coords=coords)
    an = flatten_grads(grads, coords)
    assert np.linalg.norm(an - fd) / np.linalg.norm(fd) < 1e-6


def test_gga_ceiling_freezes_high_losses():
    w = abl.gga_weight_fn(2, 2, 1.0)(np.array([5.0, 5.0, 0.5, 3.0]))
    assert w.tolist() == [2.0, 2.0, -2.0, 0.0]


def test_gga_batches_cover_clean_once_and_carry_isolated_set():
    batches = abl._gga_batches(10, 3, 4, Rng(0))
    clean = np.concatenate([c for c, _ in batches])
    assert sorted(clean.tolist()) == list(range(10))
    for _, i in batches:
        assert sorted(i.tolist()) == [0, 1, 2]
    big = abl._gga_batches(8, 10, 4, Rng(1))
    assert all(len(i) == 4 for _, i in big)
    assert set(np.concatenate([i for _, i in big]).tolist()) <= set(range(10))


# configuration

@pytest.mark.parametrize("kw", [dict(gamma=-1), dict(turning_epoch=0), dict(isolation_rate=1.0),
                                dict(isolation_lr=0.0), dict(batch_size=0), dict(lga_granularity="x"),
                                dict(turning_epoch=50, mid_stage_epochs=0, unlearn_epochs=0), dict(hidden=(0,))])
def test_config_validation(kw):
    with pytest.raises(ConfigError):
        AblConfig(**kw).validate()


def test_isolation_rate_too_small_for_dataset():
    d = _tiny(n=10)
    with pytest.raises(ConfigError):
        abl.abl_stages(d, AblConfig(isolation_rate=1e-12, turning_epoch=1, mid_stage_epochs=0, unlearn_epochs=1))


def test_mid_schedule_decay():
    cfg = AblConfig(mid_stage_epochs=4, mid_lr=0.1, mid_decay_epoch=2)
    assert cfg.mid_schedule(0).lrs == pytest.approx((0.1, 0.1, 0.01, 0.01))
    assert AblConfig(mid_stage_epochs=3, mid_lr=0.1).mid_schedule(0).lrs == (0.1, 0.1, 0.1)
    assert AblConfig().standard_schedule(0).epochs == AblConfig().total_epochs


# end to end on the default benchmark

@pytest.fixture(scope="module")
def default_run():
    train, test = data.gen_synthetic(data.SyntheticSpec(seed=0))
    spec = attacks.PoisonSpec(attacks.bottom_right_grid(train.image_shape, 5), 0, 0.1, seed=0)
    poisoned, _ = attacks.poison_dataset(train, spec)
    net, report = abl.run_abl(poisoned, test, spec, AblConfig(seed=0))
    report.stages.final = net
    return poisoned, report


def test_lga_separates_poisoned_from_clean(default_run):
    poisoned, report = default_run
    flags = data.ground_truth_poisoned(poisoned)
    row = report.stages.lga_trace.last()
    assert row[flags].mean() < row[~flags].mean()


def test_gga_lowers_remaining_loss_and_raises_isolated_loss(default_run):
    poisoned, report = default_run
    st = report.stages
    before = st.before_unlearning
    iso = poisoned.select_ids(st.isolation.isolated_ids)
    rem = poisoned.select_ids(st.isolation.remaining_ids)
    start_c = abl.evaluate_losses(before, rem.flat, rem.labels).mean()
    start_b = abl.evaluate_losses(before, iso.flat, iso.labels).mean()
    _, end_c, end_b = st.gga_history[-1]
    assert end_b > start_b
    assert end_c < start_c


def test_gga_lowers_loss_of_truly_clean_remaining_examples(default_run):
    poisoned, report = default_run
    st = report.stages
    rem = poisoned.select_ids(st.isolation.remaining_ids)
    clean = rem.take(np.nonzero(~data.ground_truth_poisoned(rem))[0])
    before = abl.evaluate_losses(st.before_unlearning, clean.flat, clean.labels).mean()
    after = abl.evaluate_losses(report.stages.final, clean.flat, clean.labels).mean()
    assert after < before


def test_run_abl_report(default_run):
    poisoned, report = default_run
    iso = report.stages.isolation
    assert len(iso.isolated_ids) == 50
    assert set(iso.isolated_ids) | set(iso.remaining_ids) == set(poisoned.ids.tolist())
    assert report.epochs == list(range(1, 41))
    assert 0 <= report.asr <= 1 and 0 <= report.clean_accuracy <= 1
    assert report.isolation_precision == metrics.isolation_precision(iso, poisoned)


def test_separation_widens_with_gamma():
    from abl_lab import baselines, config, harness

    inversions, table = 0, []
    for seed in range(5):
        cfg = config.ExperimentConfig(seed=seed)
        seeds = harness.Seeds.for_run(seed)
        tc = harness.training_config(cfg, seeds)
        bench = harness.prepare(cfg, seeds)
        flags = data.ground_truth_poisoned(bench.train)
        gaps = []
        for gamma in (0.0, 0.5, 1.0):
            _, _, trace = baselines.run_isolation(baselines.LGA(gamma), bench.train, tc)
            row = trace.last()
            gaps.append(row[~flags].mean() - row[flags].mean())
        table.append(np.round(gaps, 3).tolist())
        inversions += int(gaps[1] < gaps[0]) + int(gaps[2] < gaps[1])
    assert inversions <= 1, table
