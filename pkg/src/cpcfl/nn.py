"""Small float64 neural-network engine.

Layers are plain objects holding ``params`` (trainable) and ``buffers``
(non-trainable state such as batchnorm running statistics).  Forward passes
return a cache per layer; backward consumes those caches in reverse.  A
:class:`Model` groups named layer stacks (encoder, classifier, projector,
predictor and the BYOL momentum copies) and records a tape so that
``model.backward`` can be called right after ``model.forward``.
"""

from __future__ import annotations

import copy
import json
import struct
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

PROB_FLOOR = 1e-12
BN_EPS = 1e-5
BN_MOMENTUM = 0.9

HEAD_DEPTHS = {"c": 0, "c-1": 1, "c-2": 2, "c-3": 3}
COMPONENTS = (
    "encoder",
    "classifier",
    "projector",
    "predictor",
    "momentum_encoder",
    "momentum_projector",
)


class DimensionError(ValueError):
    pass


class StateError(RuntimeError):
    pass


class ZeroNormWarning(RuntimeWarning):
    pass


# ---------------------------------------------------------------- layers


class Dense:
    kind = "dense"

    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator | None = None):
        if in_dim <= 0 or out_dim <= 0:
            raise ValueError(f"dense dims must be positive, got {in_dim}x{out_dim}")
        self.in_dim = in_dim
        self.out_dim = out_dim
        if rng is None:
            w = np.zeros((in_dim, out_dim))
        else:
            # He-uniform
            limit = np.sqrt(6.0 / in_dim)
            w = rng.uniform(-limit, limit, size=(in_dim, out_dim))
        self.params = {"W": w, "b": np.zeros(out_dim)}
        self.buffers: dict[str, np.ndarray] = {}

    def forward(self, x, training):
        return x @ self.params["W"] + self.params["b"], x

    def backward(self, cache, grad):
        x = cache
        grads = {"W": x.T @ grad, "b": grad.sum(axis=0)}
        return grad @ self.params["W"].T, grads


class ReLU:
    kind = "relu"

    def __init__(self, dim: int | None = None):
        self.in_dim = self.out_dim = dim
        self.params: dict[str, np.ndarray] = {}
        self.buffers: dict[str, np.ndarray] = {}

    def forward(self, x, training):
        mask = x > 0
        return np.where(mask, x, 0.0), mask

    def backward(self, cache, grad):
        return np.where(cache, grad, 0.0), {}


class BatchNorm:
    """Per-feature batch normalization with affine scale/shift.

    Train mode normalizes with batch statistics and folds them into the
    running estimates; eval mode uses the running estimates only.
    """

    kind = "batchnorm"

    def __init__(self, dim: int):
        if dim <= 0:
            raise ValueError(f"batchnorm dim must be positive, got {dim}")
        self.in_dim = self.out_dim = dim
        self.params = {"gamma": np.ones(dim), "beta": np.zeros(dim)}
        self.buffers = {"running_mean": np.zeros(dim), "running_var": np.ones(dim)}

    def forward(self, x, training):
        gamma, beta = self.params["gamma"], self.params["beta"]
        if not training:
            xhat = (x - self.buffers["running_mean"]) / np.sqrt(self.buffers["running_var"] + BN_EPS)
            return gamma * xhat + beta, None
        mu = x.mean(axis=0)
        var = x.var(axis=0)
        inv_std = 1.0 / np.sqrt(var + BN_EPS)
        xhat = (x - mu) * inv_std
        n = x.shape[0]
        unbiased = var * n / (n - 1) if n > 1 else var
        rm, rv = self.buffers["running_mean"], self.buffers["running_var"]
        self.buffers["running_mean"] = BN_MOMENTUM * rm + (1 - BN_MOMENTUM) * mu
        self.buffers["running_var"] = BN_MOMENTUM * rv + (1 - BN_MOMENTUM) * unbiased
        return gamma * xhat + beta, (xhat, inv_std)

    def backward(self, cache, grad):
        if cache is None:
            raise StateError("batchnorm backward requires a train-mode forward pass")
        xhat, inv_std = cache
        gamma = self.params["gamma"]
        grads = {"gamma": (grad * xhat).sum(axis=0), "beta": grad.sum(axis=0)}
        g = grad * gamma
        dx = inv_std * (g - g.mean(axis=0) - xhat * (g * xhat).mean(axis=0))
        return dx, grads


class Softmax:
    kind = "softmax"

    def __init__(self, dim: int | None = None):
        self.in_dim = self.out_dim = dim
        self.params: dict[str, np.ndarray] = {}
        self.buffers: dict[str, np.ndarray] = {}

    def forward(self, x, training):
        p = softmax(x)
        return p, p

    def backward(self, cache, grad):
        p = cache
        return p * (grad - (grad * p).sum(axis=1, keepdims=True)), {}


LAYER_KINDS = {"dense": Dense, "relu": ReLU, "batchnorm": BatchNorm, "softmax": Softmax}


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def forward_layers(layers, x, training, name="layers"):
    caches = []
    for i, layer in enumerate(layers):
        if layer.in_dim is not None and x.shape[-1] != layer.in_dim:
            raise DimensionError(
                f"{name}[{i}] ({layer.kind}) expects {layer.in_dim} features, got {x.shape[-1]}"
            )
        x, cache = layer.forward(x, training)
        caches.append(cache)
    return x, caches


def backward_layers(layers, caches, grad):
    grads = [None] * len(layers)
    for i in range(len(layers) - 1, -1, -1):
        grad, grads[i] = layers[i].backward(caches[i], grad)
    return grad, grads


# ---------------------------------------------------------------- model


@dataclass
class ArchConfig:
    input_dim: int
    num_classes: int
    encoder_widths: list[int] = field(default_factory=lambda: [128, 64])
    rep_dim: int = 32
    head: str = "c"
    head_width: int | None = None
    # none | simclr | byol | simsiam
    ssl: str = "none"
    proj_dim: int | None = None
    pred_dim: int | None = None
    seed: int = 0

    def validate(self):
        dims = [self.input_dim, self.num_classes, self.rep_dim, *self.encoder_widths]
        dims += [d for d in (self.head_width, self.proj_dim, self.pred_dim) if d is not None]
        if any(int(d) <= 0 for d in dims):
            raise ValueError(f"all architecture dims must be positive: {self}")
        if self.head not in HEAD_DEPTHS:
            raise ValueError(f"unknown head variant {self.head!r}; choose from {list(HEAD_DEPTHS)}")
        if self.ssl not in ("none", "simclr", "byol", "simsiam"):
            raise ValueError(f"unknown ssl method {self.ssl!r}")


class Model:
    """Named layer stacks sharing one tape for backpropagation."""

    def __init__(self, arch: ArchConfig, components: dict[str, list]):
        self.arch = arch
        self.components = components
        self._tape = None
        self.outputs: dict[str, np.ndarray] = {}
        self.input_grad = None

    # -- introspection
    def has(self, component: str) -> bool:
        return component in self.components

    def state(self, components=None, include_buffers=True) -> dict[str, np.ndarray]:
        """Flat ``name -> array`` view (references, not copies)."""
        out = {}
        for comp in components or self.components:
            for i, layer in enumerate(self.components[comp]):
                for key, arr in layer.params.items():
                    out[f"{comp}.{i}.{key}"] = arr
                if include_buffers:
                    for key, arr in layer.buffers.items():
                        out[f"{comp}.{i}.{key}"] = arr
        return out

    def parameters(self, components=None) -> dict[str, np.ndarray]:
        return self.state(components, include_buffers=False)

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for name, arr in state.items():
            comp, idx, key = name.split(".")
            layer = self.components[comp][int(idx)]
            target = layer.params if key in layer.params else layer.buffers
            if key not in target:
                raise KeyError(f"unknown parameter {name}")
            if target[key].shape != np.shape(arr):
                raise DimensionError(f"{name}: shape {np.shape(arr)} != {target[key].shape}")
            target[key] = np.array(arr, dtype=np.float64)

    def copy(self) -> "Model":
        clone = copy.deepcopy(self)
        clone._tape = None
        clone.outputs = {}
        clone.input_grad = None
        return clone

    def subset(self, components) -> "Model":
        """Deep copy restricted to ``components``."""
        clone = self.copy()
        clone.components = {c: clone.components[c] for c in components if c in clone.components}
        return clone

    def layer_specs(self, component: str) -> list[dict]:
        return [
            {"kind": layer.kind, "in_dim": layer.in_dim, "out_dim": layer.out_dim}
            for layer in self.components[component]
        ]

    # -- computation
    def forward(self, branch: str, x: np.ndarray, mode: str = "eval") -> np.ndarray:
        """Run ``branch`` (component names joined by '+') on a batch.

        ``mode='train'`` uses batch statistics and records the tape needed by
        :meth:`backward`; ``mode='eval'`` clears it.
        """
        if mode not in ("train", "eval"):
            raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
        training = mode == "train"
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 1:
            x = x[None, :]
        tape = []
        self.outputs = {}
        for comp in branch.split("+"):
            if comp not in self.components:
                raise KeyError(f"model has no component {comp!r}")
            x, caches = forward_layers(self.components[comp], x, training, name=comp)
            tape.append((comp, caches))
            self.outputs[comp] = x
        if not np.isfinite(x).all():
            raise FloatingPointError(f"non-finite activations on branch {branch}")
        self._tape = tape if training else None
        return x

    def backward(self, loss_grad: np.ndarray) -> dict[str, np.ndarray]:
        """Gradients of every trainable parameter on the last train-mode branch.

        The gradient with respect to the branch input is left on
        ``self.input_grad``.  The tape is consumed.
        """
        if self._tape is None:
            raise StateError("backward called without a preceding train-mode forward")
        grads = {}
        g = np.asarray(loss_grad, dtype=np.float64)
        for comp, caches in reversed(self._tape):
            g, layer_grads = backward_layers(self.components[comp], caches, g)
            for i, lg in enumerate(layer_grads):
                for key, arr in lg.items():
                    grads[f"{comp}.{i}.{key}"] = arr
        self._tape = None
        self.input_grad = g
        return grads

    def predict_proba(self, x: np.ndarray) -> np.ndarray:
        return self.forward("encoder+classifier", x, "eval")


def _dense_stack(widths, rng, final_relu=True):
    layers = []
    for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
        layers.append(Dense(a, b, rng))
        if final_relu or i < len(widths) - 2:
            layers.append(ReLU(b))
    return layers


def build_encoder(arch: ArchConfig, rng) -> list:
    # every encoder layer is ReLU activated, including the representation
    return _dense_stack([arch.input_dim, *arch.encoder_widths, arch.rep_dim], rng)


def build_classifier(arch: ArchConfig, rng) -> list:
    width = arch.head_width or arch.rep_dim
    depth = HEAD_DEPTHS[arch.head]
    widths = [arch.rep_dim] + [width] * depth + [arch.num_classes]
    return _dense_stack(widths, rng, final_relu=False) + [Softmax(arch.num_classes)]


def _build_ssl_heads(arch: ArchConfig, rng) -> dict[str, list]:
    pd = arch.proj_dim or arch.rep_dim
    if arch.ssl == "simclr":
        return {"projector": [Dense(arch.rep_dim, pd, rng), ReLU(pd), Dense(pd, pd, rng)]}
    hidden = arch.pred_dim or max(1, pd // 4)
    projector = [Dense(arch.rep_dim, pd, rng), BatchNorm(pd), ReLU(pd), Dense(pd, pd, rng), BatchNorm(pd)]
    predictor = [Dense(pd, hidden, rng), BatchNorm(hidden), ReLU(hidden), Dense(hidden, pd, rng)]
    return {"projector": projector, "predictor": predictor}


def build_model(arch: ArchConfig) -> Model:
    """Freshly initialized model; bitwise deterministic in ``arch.seed``."""
    arch.validate()
    rng = np.random.default_rng(arch.seed)
    components = {"encoder": build_encoder(arch, rng), "classifier": build_classifier(arch, rng)}
    if arch.ssl != "none":
        components.update(_build_ssl_heads(arch, rng))
    if arch.ssl == "byol":
        components["momentum_encoder"] = copy.deepcopy(components["encoder"])
        components["momentum_projector"] = copy.deepcopy(components["projector"])
    return Model(arch, components)


def fresh_classifier(arch: ArchConfig, seed: int) -> list:
    return build_classifier(arch, np.random.default_rng(seed))


# ---------------------------------------------------------------- losses


def cross_entropy(probs: np.ndarray, onehot: np.ndarray) -> float:
    """Mean over the batch of -sum_m y_m log p_m, with log floored at 1e-12."""
    probs = np.atleast_2d(np.asarray(probs, dtype=np.float64))
    onehot = np.atleast_2d(np.asarray(onehot, dtype=np.float64))
    if probs.shape != onehot.shape:
        raise DimensionError(f"probs {probs.shape} vs onehot {onehot.shape}")
    if np.any(np.abs(probs.sum(axis=1) - 1.0) > 1e-9):
        raise ValueError("probability rows must sum to 1 within 1e-9")
    if np.any(onehot.sum(axis=1) != 1.0) or np.any((onehot != 0) & (onehot != 1)):
        raise ValueError("onehot rows must contain exactly one 1")
    return float(-(onehot * np.log(np.maximum(probs, PROB_FLOOR))).sum(axis=1).mean())


def cross_entropy_grad(probs: np.ndarray, onehot: np.ndarray) -> np.ndarray:
    probs = np.atleast_2d(probs)
    floored = np.maximum(probs, PROB_FLOOR)
    grad = -onehot / floored / probs.shape[0]
    return np.where(probs > PROB_FLOOR, grad, 0.0)


def one_hot(labels, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise ValueError(f"labels must lie in [0, {num_classes})")
    out = np.zeros((labels.size, num_classes))
    out[np.arange(labels.size), labels] = 1.0
    return out


def cosine_similarity(v1, v2) -> float:
    v1 = np.asarray(v1, dtype=np.float64).ravel()
    v2 = np.asarray(v2, dtype=np.float64).ravel()
    if v1.shape != v2.shape or v1.size == 0:
        raise DimensionError(f"cosine_similarity needs equal nonempty lengths, got {v1.size} and {v2.size}")
    n1, n2 = np.linalg.norm(v1), np.linalg.norm(v2)
    if n1 == 0 or n2 == 0:
        warnings.warn("zero-norm vector in cosine similarity; returning 0", ZeroNormWarning)
        return 0.0
    return float((v1 / n1) @ (v2 / n2))


def row_cosine(a: np.ndarray, b: np.ndarray):
    """Row-wise cosine similarity and its gradient with respect to ``a``.

    Zero-norm rows get similarity 0 and zero gradient.
    """
    na = np.linalg.norm(a, axis=1, keepdims=True)
    nb = np.linalg.norm(b, axis=1, keepdims=True)
    safe_a = np.where(na > 0, na, 1.0)
    safe_b = np.where(nb > 0, nb, 1.0)
    ah, bh = a / safe_a, b / safe_b
    cos = (ah * bh).sum(axis=1)
    dcos_da = (bh - ah * cos[:, None]) / safe_a
    dead = (na[:, 0] == 0) | (nb[:, 0] == 0)
    if dead.any():
        cos = np.where(dead, 0.0, cos)
        dcos_da[dead] = 0.0
    return cos, dcos_da


# ---------------------------------------------------------------- optimizer


class Adam:
    """Adam with bias correction; state keyed by parameter name."""

    def __init__(self, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        """Update ``params`` in place from ``grads``; missing grads count as zero."""
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1, c2 = 1 - b1**self.t, 1 - b2**self.t
        for name, p in params.items():
            g = grads.get(name)
            if g is None:
                g = np.zeros_like(p)
            elif g.shape != p.shape:
                raise DimensionError(f"{name}: grad {g.shape} vs param {p.shape}")
            m = self.m.get(name)
            if m is None:
                m = np.zeros_like(p)
                self.v[name] = np.zeros_like(p)
            m = b1 * m + (1 - b1) * g
            v = b2 * self.v[name] + (1 - b2) * g * g
            self.m[name], self.v[name] = m, v
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


# ---------------------------------------------------------------- checkpoint

CKPT_MAGIC = b"CPCFLCKP"
CKPT_VERSION = 1


def save_checkpoint(model: Model, path) -> None:
    """Write ``model`` as a versioned little-endian container.

    Layout: 8-byte magic, uint32 version, uint32 header length, UTF-8 JSON
    header ``{"arch": ..., "layers": {comp: [kinds]}, "tensors": [[name,
    shape], ...]}``, then each tensor's float64 little-endian bytes in header
    order.
    """
    state = model.state()
    header = {
        "arch": asdict(model.arch),
        "layers": [[c, [l.kind for l in layers]] for c, layers in model.components.items()],
        "tensors": [[name, list(arr.shape)] for name, arr in state.items()],
    }
    hbytes = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<II", CKPT_VERSION, len(hbytes)))
        fh.write(hbytes)
        for arr in state.values():
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path) -> Model:
    raw = Path(path).read_bytes()
    if raw[:8] != CKPT_MAGIC:
        raise ValueError(f"{path}: not a model checkpoint")
    version, hlen = struct.unpack_from("<II", raw, 8)
    if version != CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(raw[16 : 16 + hlen])
    model = build_model(ArchConfig(**header["arch"]))
    # components present in the file decide which stacks exist
    model.components = {c: model.components[c] for c, _ in header["layers"]}
    offset = 16 + hlen
    state = {}
    for name, shape in header["tensors"]:
        count = int(np.prod(shape))
        state[name] = np.frombuffer(raw, dtype="<f8", count=count, offset=offset).reshape(shape).astype(np.float64)
        offset += 8 * count
    if offset != len(raw):
        raise ValueError(f"{path}: trailing or missing tensor bytes")
    model.load_state(state)
    return model
