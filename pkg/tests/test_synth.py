import numpy as np
import pytest

from polarseg.evaluation import roc_auc
from polarseg.postprocess import vertical_diameter
from polarseg.synth import SynthError, SynthSpec, generate, labeled_screening_set


@pytest.fixture(scope="module")
def samples():
    return generate(SynthSpec(seed=11), 30)


def test_shapes_and_ranges(samples):
    for s in samples:
        assert s.image.shape == (128, 128, 3) and s.image.dtype == np.float32
        assert 0.0 <= s.image.min() and s.image.max() <= 1.0
        assert s.masks.grid == (128, 128)


def test_cup_inside_disc(samples):
    for s in samples:
        assert s.masks.cup.any()
        assert not np.any(s.masks.cup & ~s.masks.disc)


def test_masks_are_rasterized_ellipses(samples):
    for s in samples:
        np.testing.assert_array_equal(s.masks.disc, s.disc.rasterize((128, 128)))
        np.testing.assert_array_equal(s.masks.cup, s.cup.rasterize((128, 128)))
        assert s.center == (s.disc.cx, s.disc.cy)


def test_cdr_closure(samples):
    for s in samples:
        assert s.cdr == vertical_diameter(s.cup) / vertical_diameter(s.disc)
        assert 0.3 <= s.cdr <= 0.9 + 1e-9


def test_same_seed_bitwise_identical():
    a = generate(SynthSpec(seed=5), 4)
    b = generate(SynthSpec(seed=5), 4)
    for x, y in zip(a, b):
        assert x.image.tobytes() == y.image.tobytes()
        assert x.masks.disc.tobytes() == y.masks.disc.tobytes()
        assert x.cdr == y.cdr


def test_prefix_stability():
    short = generate(SynthSpec(seed=5), 2)
    longer = generate(SynthSpec(seed=5), 5)
    for x, y in zip(short, longer):
        assert x.image.tobytes() == y.image.tobytes()


def test_disc_is_brighter_than_background(samples):
    for s in samples:
        grey = s.image.mean(axis=2)
        assert grey[s.masks.cup].mean() > grey[s.masks.disc & ~s.masks.cup].mean() > grey[~s.masks.disc].mean()


def test_infeasible_specs_rejected():
    with pytest.raises(SynthError):
        SynthSpec(cdr_range=(0.5, 1.0))
    with pytest.raises(SynthError):
        SynthSpec(size=64, disc_radius=(30.0, 40.0))
    with pytest.raises(SynthError):
        generate(SynthSpec(), -1)


def test_default_cup_share_near_four_percent():
    share = np.mean([s.masks.cup.mean() for s in generate(SynthSpec(seed=0), 100)])
    assert 0.03 <= share <= 0.055


def test_screening_cutoff_extremes():
    _, labels, frac = labeled_screening_set(SynthSpec(seed=1), 10, 0.0)
    assert labels.tolist() == [1] * 10 and frac == 1.0
    _, labels, frac = labeled_screening_set(SynthSpec(seed=1), 10, 1.0)
    assert labels.tolist() == [0] * 10 and frac == 0.0


def test_screening_margin_keeps_cdrs_away_from_cutoff():
    samples, labels, frac = labeled_screening_set(SynthSpec(seed=2), 60, 0.6, margin=0.15)
    cdrs = np.array([s.cdr for s in samples])
    assert np.all(np.abs(cdrs - 0.6) >= 0.15 - 1e-9)
    assert labels.tolist() == [s.label for s in samples]
    assert frac == pytest.approx(labels.mean())
    assert 0 < frac < 1


def test_accurate_cdr_gives_high_auc():
    samples, labels, _ = labeled_screening_set(SynthSpec(seed=3), 80, 0.6, margin=0.15)
    rng = np.random.default_rng(0)
    scores = np.array([s.cdr for s in samples]) + rng.uniform(-0.05, 0.05, size=len(samples))
    assert roc_auc(scores, labels).auc > 0.95
