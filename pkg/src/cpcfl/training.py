"""Minibatch cross-entropy training shared by local updates, probes and supervised pre-training."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nn import Adam, Model, cross_entropy, cross_entropy_grad, one_hot


@dataclass
class FitStats:
    steps: int
    mean_loss: float


def fit_classifier(
    model: Model,
    features: np.ndarray,
    labels: np.ndarray,
    *,
    epochs: int,
    lr: float,
    batch_size: int,
    rng: np.random.Generator,
    encoder_epochs: int | None = None,
) -> FitStats:
    """Train ``model`` in place with Adam on mean cross-entropy.

    The encoder is updated only during the first ``encoder_epochs`` epochs
    (``None`` means every epoch, ``0`` freezes it).  While frozen it runs in
    eval mode and receives no optimizer updates.
    """
    if len(labels) == 0:
        raise ValueError("cannot train on an empty dataset")
    k = model.arch.num_classes
    targets = one_hot(labels, k)
    enc_epochs = epochs if encoder_epochs is None else encoder_epochs
    opt = Adam(lr)
    steps, total, count = 0, 0.0, 0
    frozen_reps = None
    for epoch in range(epochs):
        train_encoder = epoch < enc_epochs
        if not train_encoder and frozen_reps is None:
            frozen_reps = model.forward("encoder", features, "eval")
        order = rng.permutation(len(labels))
        for start in range(0, len(order), batch_size):
            idx = order[start : start + batch_size]
            if train_encoder:
                probs = model.forward("encoder+classifier", features[idx], "train")
                params = model.parameters(["encoder", "classifier"])
            else:
                probs = model.forward("classifier", frozen_reps[idx], "train")
                params = model.parameters(["classifier"])
            loss = cross_entropy(probs, targets[idx])
            grads = model.backward(cross_entropy_grad(probs, targets[idx]))
            opt.step(params, grads)
            steps += 1
            total += loss
            count += 1
    return FitStats(steps, total / count if count else float("nan"))


def mean_loss(model: Model, features: np.ndarray, labels: np.ndarray) -> float:
    """Full-batch eval-mode cross-entropy."""
    probs = model.forward("encoder+classifier", features, "eval")
    return cross_entropy(probs, one_hot(labels, model.arch.num_classes))


def accuracy(model: Model, features: np.ndarray, labels: np.ndarray) -> float:
    probs = model.forward("encoder+classifier", features, "eval")
    return float((probs.argmax(axis=1) == labels).mean())
