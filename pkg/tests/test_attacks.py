import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from abl_lab import attacks, data
from abl_lab.attacks import BlendPattern, GridPatch, PoisonSpec, Sinusoid
from abl_lab.data import Dataset
from abl_lab.errors import ConfigError, InputError


def _balanced(n=100, classes=10, shape=(4, 4)):
    return Dataset(np.full((n, *shape), 0.5), np.arange(n) % classes, classes)


def test_blend_alpha_zero_and_one():
    gen = np.random.default_rng(0)
    img, pat = gen.random((4, 4, 1)), gen.random((4, 4, 1))
    np.testing.assert_array_equal(attacks.apply_trigger(img, BlendPattern(pat, 0.0)), img)
    np.testing.assert_array_equal(attacks.apply_trigger(img, BlendPattern(pat, 1.0)), pat)


def test_grid_patch_changes_exactly_nine_pixels():
    img = np.full((8, 8, 1), 0.5)
    out = attacks.apply_trigger(img, attacks.bottom_right_grid(img.shape, 3))
    changed = np.argwhere(out != img)
    assert len(changed) == 9
    assert {tuple(p[:2]) for p in changed} == {(r, c) for r in range(5, 8) for c in range(5, 8)}
    expected = [[1, 0, 1], [0, 1, 0], [1, 0, 1]]
    np.testing.assert_array_equal(out[5:, 5:, 0], expected)
    assert np.all(img == 0.5)  # input untouched


def test_grid_patch_is_idempotent():
    img = np.random.default_rng(1).random((6, 6, 3))
    t = GridPatch(1, 2, 3)
    once = attacks.apply_trigger(img, t)
    np.testing.assert_array_equal(attacks.apply_trigger(once, t), once)


def test_sinusoid_matches_formula():
    img = np.full((2, 12, 1), 0.5)
    out = attacks.apply_trigger(img, Sinusoid(0.1, 2))
    for j in range(12):
        assert out[1, j, 0] == pytest.approx(0.5 + 0.1 * math.sin(2 * math.pi * 2 * j / 12))


def test_sinusoid_clamps():
    out = attacks.apply_trigger(np.ones((1, 8, 1)), Sinusoid(1.0, 1))
    assert out.max() <= 1.0 and out.min() >= 0.0


@pytest.mark.parametrize("trigger", [GridPatch(3, 3, 2), GridPatch(-1, 0, 2), GridPatch(0, 0, 0),
                                     BlendPattern(np.zeros((4, 4, 1)), 1.5), Sinusoid(2.0, 1), Sinusoid(0.1, 0)])
def test_invalid_triggers(trigger):
    with pytest.raises(ConfigError):
        attacks.apply_trigger(np.zeros((4, 4, 1)), trigger)


def test_poison_count_matches_large_example():
    assert attacks.poison_count(0.1, 50000) == 5000
    assert attacks.poison_count(0.1, 5000) == 500


def test_rate_zero_leaves_dataset():
    d = _balanced()
    out, rep = attacks.poison_dataset(d, PoisonSpec(GridPatch(0, 0, 2), 0, 0.0))
    assert out.equals(d) and rep.poisoned_ids == () and rep.achieved_rate == 0.0


@settings(max_examples=25, deadline=None)
@given(rate=st.floats(0.0, 0.9), target=st.integers(0, 9), seed=st.integers(0, 2**32))
def test_dirty_poisoning_invariants(rate, target, seed):
    d = _balanced()
    out, rep = attacks.poison_dataset(d, PoisonSpec(GridPatch(0, 0, 2), target, rate, seed=seed))
    flags = data.ground_truth_poisoned(out)
    k = math.ceil(round(rate * 100, 9))
    assert len(rep.poisoned_ids) == k == flags.sum()
    assert set(out.ids[flags].tolist()) == set(rep.poisoned_ids)
    assert rep.achieved_rate == k / 100
    assert np.all(out.labels[flags] == target)
    assert np.all(out.original_labels[flags] != target)
    assert np.array_equal(out.ids, d.ids)
    assert np.all(out.images[~flags] == d.images[~flags])


def test_clean_label_mode_keeps_labels():
    d = _balanced()
    out, rep = attacks.poison_dataset(d, PoisonSpec(GridPatch(0, 0, 2), 3, 0.05, "clean_label"))
    flags = data.ground_truth_poisoned(out)
    assert flags.sum() == 5
    assert np.all(out.labels[flags] == 3) and np.all(out.original_labels[flags] == 3)


def test_insufficient_eligible_examples():
    with pytest.raises(InputError):
        attacks.poison_dataset(_balanced(), PoisonSpec(GridPatch(0, 0, 2), 0, 0.2, "clean_label"))


def test_poison_selection_is_seeded():
    spec = PoisonSpec(GridPatch(0, 0, 2), 0, 0.1, seed=4)
    assert attacks.poison_dataset(_balanced(), spec)[1] == attacks.poison_dataset(_balanced(), spec)[1]


def test_backdoor_testset_counts_and_labels():
    bt = attacks.build_backdoor_testset(_balanced(), PoisonSpec(GridPatch(0, 0, 2), 0, 0.1))
    assert len(bt) == 90
    assert np.all(bt.labels == 0) and np.all(bt.original_labels != 0)


def test_backdoor_testset_all_target_is_error():
    d = Dataset(np.zeros((5, 2, 2)), np.zeros(5, int), 3)
    with pytest.raises(InputError):
        attacks.build_backdoor_testset(d, PoisonSpec(GridPatch(0, 0, 1), 0))


def test_degenerate_blend_only_relabels():
    d = _balanced()
    bt = attacks.build_backdoor_testset(d, PoisonSpec(BlendPattern(np.zeros((4, 4, 1)), 0.0), 0))
    np.testing.assert_array_equal(bt.images, d.images[d.labels != 0])


def test_blend_from_seed_is_reproducible():
    a = attacks.blend_from_seed((3, 3, 1), 0.2, seed=8)
    b = attacks.blend_from_seed((3, 3, 1), 0.2, seed=8)
    np.testing.assert_array_equal(a.pattern, b.pattern)
    assert a.pattern.min() >= 0 and a.pattern.max() < 1
