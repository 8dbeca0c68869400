import numpy as np
import pytest

from tinyldm.evaluate import centroid_distance, nearest_centroid_accuracy, paired_win_rate, pixel_centroid


def test_centroid_and_distance_hand_values():
    imgs = np.array([np.zeros((1, 1, 3)), np.full((1, 1, 3), 2.0)])
    c = pixel_centroid(imgs)
    np.testing.assert_array_equal(c, np.ones((1, 1, 3)))
    np.testing.assert_allclose(centroid_distance(imgs, c), [np.sqrt(3), np.sqrt(3)])


def test_win_rate_is_strict():
    c = np.zeros((1, 1, 1))
    tuned = np.array([[[[1.0]]], [[[2.0]]], [[[0.5]]]])
    base = np.array([[[[2.0]]], [[[2.0]]], [[[0.1]]]])
    assert paired_win_rate(tuned, base, c) == pytest.approx(1 / 3)


def test_accuracy_on_separable_clusters():
    rng = np.random.default_rng(0)
    a = rng.normal(0, 0.1, (20, 2, 2, 1))
    b = rng.normal(1, 0.1, (20, 2, 2, 1))
    assert nearest_centroid_accuracy({"a": a[:10], "b": b[:10]}, {"a": a[10:], "b": b[10:]}) == 1.0


def test_mismatched_pairs_rejected():
    with pytest.raises(ValueError):
        paired_win_rate(np.zeros((2, 1, 1, 1)), np.zeros((3, 1, 1, 1)), np.zeros((1, 1, 1)))
