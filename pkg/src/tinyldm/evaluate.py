"""Pixel-centroid style measures used to judge whether a fine-tune captured a style."""

from __future__ import annotations

from typing import Mapping

import numpy as np


def pixel_centroid(images) -> np.ndarray:
    """Mean image over a batch [N, H, W, C], in float64."""
    images = np.asarray(images, dtype=np.float64)
    if images.ndim != 4 or images.shape[0] == 0:
        raise ValueError(f"expected a non-empty [N, H, W, C] batch, got shape {images.shape}")
    return images.mean(axis=0)


def centroid_distance(images, centroid) -> np.ndarray:
    """Euclidean distance of each image to ``centroid``."""
    images = np.asarray(images, dtype=np.float64)
    diff = images.reshape(images.shape[0], -1) - np.asarray(centroid, dtype=np.float64).reshape(1, -1)
    return np.sqrt(np.einsum("ij,ij->i", diff, diff))


def nearest_centroid_predict(images, centroids: Mapping[str, np.ndarray]) -> list[str]:
    labels = list(centroids)
    dists = np.stack([centroid_distance(images, centroids[k]) for k in labels], axis=1)
    return [labels[i] for i in dists.argmin(axis=1)]


def nearest_centroid_accuracy(train: Mapping[str, np.ndarray], test: Mapping[str, np.ndarray]) -> float:
    """Fit one centroid per label on ``train`` images and score on ``test``."""
    centroids = {k: pixel_centroid(v) for k, v in train.items()}
    correct = total = 0
    for label, images in test.items():
        pred = nearest_centroid_predict(images, centroids)
        correct += sum(p == label for p in pred)
        total += len(pred)
    return correct / total


def paired_win_rate(tuned, base, centroid) -> float:
    """Fraction of pairs where the tuned image is strictly closer to ``centroid``."""
    tuned, base = np.asarray(tuned), np.asarray(base)
    if tuned.shape != base.shape:
        raise ValueError(f"paired batches differ in shape: {tuned.shape} vs {base.shape}")
    return float(np.mean(centroid_distance(tuned, centroid) < centroid_distance(base, centroid)))
