"""Self-supervised encoder pre-training (SimCLR, BYOL, SimSiam) and linear probes."""

from __future__ import annotations

import copy
from dataclasses import dataclass, field, replace

import numpy as np

from .datagen import LabeledDataset, UnlabeledDataset
from .nn import Adam, DimensionError, Model, _build_ssl_heads, build_classifier, row_cosine
from .training import accuracy, fit_classifier

METHODS = ("simclr", "byol", "simsiam")


@dataclass
class AugmentConfig:
    noise_sigma: float = 0.1
    mask_prob: float = 0.1
    scale_range: tuple[float, float] = (0.8, 1.25)
    flip_prob: float = 0.0
    flip_fraction: float = 0.25

    @classmethod
    def identity(cls):
        return cls(noise_sigma=0.0, mask_prob=0.0, scale_range=(1.0, 1.0), flip_prob=0.0)


@dataclass
class PretrainConfig:
    method: str = "simclr"
    epochs: int = 50
    batch_size: int = 128
    lr: float = 1e-3
    temperature: float | None = None
    beta: float | None = None
    proj_dim: int | None = None
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.augment, dict):
            aug = dict(self.augment)
            if "scale_range" in aug:
                aug["scale_range"] = tuple(aug["scale_range"])
            self.augment = AugmentConfig(**aug)

    @classmethod
    def for_method(cls, method: str, **kwargs) -> "PretrainConfig":
        """Config with the method-specific defaults (tau=0.1 or beta=0.9) filled in."""
        if method == "simclr":
            kwargs.setdefault("temperature", 0.1)
        elif method == "byol":
            kwargs.setdefault("beta", 0.9)
        cfg = cls(method=method, **kwargs)
        cfg.validate()
        return cfg

    def validate(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown pre-training method {self.method!r}")
        if self.epochs < 0 or self.batch_size <= 0 or self.lr <= 0:
            raise ValueError("epochs must be >= 0, batch_size and lr positive")
        if (self.temperature is not None) != (self.method == "simclr"):
            raise ValueError("temperature is required for simclr and only simclr")
        if self.temperature is not None and self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if (self.beta is not None) != (self.method == "byol"):
            raise ValueError("beta is required for byol and only byol")
        if self.beta is not None and not 0 <= self.beta < 1:
            raise ValueError("beta must lie in [0, 1)")


# ---------------------------------------------------------------- augmentation


def augment_batch(x: np.ndarray, rng: np.random.Generator, cfg: AugmentConfig) -> np.ndarray:
    """Stochastic view of each row: global scale, block sign flip, Gaussian noise, masking."""
    x = np.array(x, dtype=np.float64, copy=True)
    n, d = x.shape
    lo, hi = cfg.scale_range
    if lo != 1.0 or hi != 1.0:
        x *= rng.uniform(lo, hi, size=(n, 1))
    if cfg.flip_prob > 0:
        width = max(1, int(round(cfg.flip_fraction * d)))
        starts = rng.integers(0, d - width + 1, size=n)
        flip = rng.random(n) < cfg.flip_prob
        cols = np.arange(d)
        block = (cols >= starts[:, None]) & (cols < starts[:, None] + width) & flip[:, None]
        x[block] *= -1
    if cfg.noise_sigma > 0:
        x += cfg.noise_sigma * rng.standard_normal((n, d))
    if cfg.mask_prob > 0:
        x[rng.random((n, d)) < cfg.mask_prob] = 0.0
    return x


def augment(sample: np.ndarray, rng: np.random.Generator, cfg: AugmentConfig | None = None) -> np.ndarray:
    sample = np.asarray(sample, dtype=np.float64)
    return augment_batch(sample[None, :], rng, cfg or AugmentConfig())[0]


# ---------------------------------------------------------------- losses


def default_pairs(two_b: int) -> np.ndarray:
    b = two_b // 2
    return np.concatenate([np.arange(b, 2 * b), np.arange(b)])


def simclr_loss_and_grad(z: np.ndarray, tau: float, pairs: np.ndarray | None = None):
    """InfoNCE over all 2B anchors; returns (mean loss, d loss / d z).

    Row ``i``'s positive is ``pairs[i]`` (default: view ``i`` pairs with
    ``i + B``); every other row except ``i`` itself is a negative.
    """
    z = np.asarray(z, dtype=np.float64)
    n = z.shape[0]
    if n < 2 or n % 2:
        raise ValueError(f"simclr needs an even number of >= 2 projections, got {n}")
    pairs = default_pairs(n) if pairs is None else np.asarray(pairs)
    if pairs.shape != (n,) or np.any(pairs[pairs] != np.arange(n)) or np.any(pairs == np.arange(n)):
        raise ValueError("pair_index must be an involution without fixed points")
    norms = np.linalg.norm(z, axis=1, keepdims=True)
    safe = np.where(norms > 0, norms, 1.0)
    zn = z / safe
    logits = zn @ zn.T / tau
    np.fill_diagonal(logits, -np.inf)
    row_max = logits.max(axis=1, keepdims=True)
    e = np.exp(logits - row_max)
    denom = e.sum(axis=1, keepdims=True)
    log_denom = np.log(denom[:, 0]) + row_max[:, 0]
    rows = np.arange(n)
    loss = float(np.mean(log_denom - logits[rows, pairs]))

    g = e / denom
    g[rows, pairs] -= 1.0
    g /= n
    dzn = (g + g.T) @ zn / tau
    dz = (dzn - zn * (dzn * zn).sum(axis=1, keepdims=True)) / safe
    dz[norms[:, 0] == 0] = 0.0
    return loss, dz


def simclr_loss(z: np.ndarray, tau: float, pairs: np.ndarray | None = None) -> float:
    return simclr_loss_and_grad(z, tau, pairs)[0]


def _as_rows(p, z):
    p = np.atleast_2d(np.asarray(p, dtype=np.float64))
    z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    if p.shape != z.shape:
        raise DimensionError(f"prediction {p.shape} and target {z.shape} differ")
    return p, z


def byol_loss_and_grad(p, z_target):
    """Mean of 2 - 2*cos(p, z') over rows; gradient for ``p`` only."""
    p, z = _as_rows(p, z_target)
    cos, dcos = row_cosine(p, z)
    return float(np.mean(2.0 - 2.0 * cos)), -2.0 * dcos / len(cos)


def byol_loss(p, z_target) -> float:
    return byol_loss_and_grad(p, z_target)[0]


def simsiam_loss_and_grad(p, z_stopped):
    """Mean negative cosine similarity; ``z_stopped`` is a constant."""
    p, z = _as_rows(p, z_stopped)
    cos, dcos = row_cosine(p, z)
    return float(np.mean(-cos)), -dcos / len(cos)


def simsiam_loss(p, z_stopped) -> float:
    return simsiam_loss_and_grad(p, z_stopped)[0]


def symmetric_loss_and_grad(loss_and_grad, p, z):
    """Sum both view orderings for stacked ``[view_i; view_j]`` batches.

    Row ``k`` of the first half is predicted against row ``k`` of the second
    half of ``z`` and vice versa.  Returns (loss, d loss / d p).
    """
    b = len(p) // 2
    l1, g1 = loss_and_grad(p[:b], z[b:])
    l2, g2 = loss_and_grad(p[b:], z[:b])
    return l1 + l2, np.concatenate([g1, g2])


# ---------------------------------------------------------------- momentum


def momentum_update(online: dict, target: dict, beta: float) -> dict:
    """In-place target <- beta * target + (1 - beta) * online, matched by position."""
    if len(online) != len(target):
        raise DimensionError(f"{len(online)} online tensors vs {len(target)} target tensors")
    for (name, src), (tname, dst) in zip(online.items(), target.items()):
        if src.shape != dst.shape:
            raise DimensionError(f"{name} {src.shape} vs {tname} {dst.shape}")
        dst *= beta
        dst += (1.0 - beta) * src
    return target


# ---------------------------------------------------------------- training


def _ssl_model(encoder: Model, cfg: PretrainConfig) -> Model:
    arch = replace(encoder.arch, ssl=cfg.method, proj_dim=cfg.proj_dim or encoder.arch.proj_dim)
    rng = np.random.default_rng([cfg.seed, 7])
    work = encoder.copy()
    work.arch = arch
    work.components.update(_build_ssl_heads(arch, rng))
    if cfg.method == "byol":
        work.components["momentum_encoder"] = copy.deepcopy(work.components["encoder"])
        work.components["momentum_projector"] = copy.deepcopy(work.components["projector"])
    return work


def _strip(model: Model, keep=("encoder", "classifier")) -> Model:
    out = model.subset(keep)
    out.arch = replace(model.arch, ssl="none")
    return out


def pretrain_encoder(encoder: Model, data: UnlabeledDataset, cfg: PretrainConfig):
    """Contrastive pre-training of ``encoder``'s feature extractor.

    Returns ``(model, epoch_losses)`` where ``model`` keeps the trained
    encoder and the input classifier; projector, predictor and momentum
    copies are dropped.
    """
    cfg.validate()
    if encoder.arch.input_dim != data.feature_dim:
        raise DimensionError(f"encoder expects {encoder.arch.input_dim} features, data has {data.feature_dim}")
    if cfg.epochs == 0:
        return _strip(encoder), []
    model = _ssl_model(encoder, cfg)
    rng = np.random.default_rng([cfg.seed, 11])
    online = ["encoder", "projector"] + (["predictor"] if cfg.method != "simclr" else [])
    opt = Adam(cfg.lr)
    x_all = data.samples
    losses = []
    for _ in range(cfg.epochs):
        order = rng.permutation(len(x_all))
        epoch_losses = []
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            if len(idx) < 2 and len(order) >= 2:
                continue
            xb = x_all[idx]
            views = np.concatenate([augment_batch(xb, rng, cfg.augment), augment_batch(xb, rng, cfg.augment)])
            loss, grads = _ssl_step(model, views, cfg)
            opt.step(model.parameters(online), grads)
            if cfg.method == "byol":
                momentum_update(
                    model.parameters(["encoder", "projector"]),
                    model.parameters(["momentum_encoder", "momentum_projector"]),
                    cfg.beta,
                )
            epoch_losses.append(loss)
        losses.append(float(np.mean(epoch_losses)))
    return _strip(model), losses


def _ssl_step(model: Model, views: np.ndarray, cfg: PretrainConfig):
    if cfg.method == "simclr":
        z = model.forward("encoder+projector", views, "train")
        loss, dz = simclr_loss_and_grad(z, cfg.temperature)
        return loss, model.backward(dz)
    if cfg.method == "byol":
        # target branch first: the online forward below owns the tape
        z_target = model.forward("momentum_encoder+momentum_projector", views, "train")
        p = model.forward("encoder+projector+predictor", views, "train")
        loss, dp = symmetric_loss_and_grad(byol_loss_and_grad, p, z_target)
        return loss, model.backward(dp)
    p = model.forward("encoder+projector+predictor", views, "train")
    z = model.outputs["projector"].copy()
    loss, dp = symmetric_loss_and_grad(simsiam_loss_and_grad, p, z)
    return loss, model.backward(dp)


def train_supervised(model: Model, data: LabeledDataset, epochs: int, lr: float, *, batch_size=32, seed=0) -> Model:
    if data.num_classes != model.arch.num_classes:
        raise ValueError(f"data has {data.num_classes} classes, head outputs {model.arch.num_classes}")
    out = model.copy()
    if epochs > 0:
        fit_classifier(
            out, data.features, data.labels, epochs=epochs, lr=lr, batch_size=batch_size,
            rng=np.random.default_rng([seed, 13]),
        )
    return out


def supervised_pretrain(model: Model, data: LabeledDataset, epochs: int, lr: float, *, batch_size=32, seed=0) -> Model:
    """Cross-entropy training of encoder+head; only the encoder is returned."""
    return train_supervised(model, data, epochs, lr, batch_size=batch_size, seed=seed).subset(["encoder"])


def linear_evaluation(
    encoder: Model,
    proxy_train: LabeledDataset,
    proxy_test: LabeledDataset,
    epochs: int = 50,
    lr: float = 1e-2,
    *,
    batch_size: int = 64,
    seed: int = 0,
) -> float:
    """Test accuracy of a fresh single-layer head trained on the frozen encoder."""
    if len(proxy_train) == 0 or len(proxy_test) == 0:
        raise ValueError("linear evaluation needs nonempty proxy sets")
    arch = replace(encoder.arch, head="c", num_classes=proxy_train.num_classes, ssl="none")
    probe = Model(arch, {
        "encoder": copy.deepcopy(encoder.components["encoder"]),
        "classifier": build_classifier(arch, np.random.default_rng([seed, 17])),
    })
    fit_classifier(
        probe, proxy_train.features, proxy_train.labels, epochs=epochs, lr=lr,
        batch_size=batch_size, rng=np.random.default_rng([seed, 19]), encoder_epochs=0,
    )
    return accuracy(probe, proxy_test.features, proxy_test.labels)
