"""Shared dense backbone with three two-layer prediction heads.

The heads emit, through a softplus link, Dirichlet concentrations over the
scene and image label spaces and Poisson rates over object counts. Training
minimizes the (weighted) sum of the three mean negative log-likelihoods;
gradients are backpropagated by hand.
"""

import base64
import json
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .distributions import SMOOTH_EPS, smooth_simplex
from .specfn import DomainError

HEADS = ("scene", "image", "counts")
BLOCKS = ("backbone", "head_scene", "head_image", "head_counts")
ACTIVATIONS = ("relu", "identity")
CHECKPOINT_FORMAT = "xvdistill-checkpoint"


@dataclass
class DenseLayer:
    weights: np.ndarray  # (d_out, d_in)
    bias: np.ndarray
    activation: str = "relu"

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.weights.ndim != 2 or self.bias.shape != (self.weights.shape[0],):
            raise ValueError(
                f"inconsistent layer shapes: weights {self.weights.shape}, bias {self.bias.shape}"
            )

    @property
    def d_in(self):
        return self.weights.shape[1]

    @property
    def d_out(self):
        return self.weights.shape[0]

    def forward(self, x):
        pre = x @ self.weights.T + self.bias
        if self.activation == "relu":
            return pre, np.maximum(pre, 0.0)
        return pre, pre

    def backward(self, x, pre, dout):
        """Return (d_input, d_weights, d_bias) given the layer's cached input."""
        if self.activation == "relu":
            dout = dout * (pre > 0.0)
        return dout @ self.weights, dout.T @ x, dout.sum(axis=0)

    def copy(self):
        return DenseLayer(self.weights.copy(), self.bias.copy(), self.activation)


def xavier_init(shape, rng, activation="relu"):
    """Glorot-uniform weights, zero bias."""
    d_out, d_in = shape
    if d_out <= 0 or d_in <= 0:
        raise ValueError(f"layer dimensions must be positive, got {shape}")
    limit = np.sqrt(6.0 / (d_in + d_out))
    w = rng.uniform(-limit, limit, size=(d_out, d_in))
    return DenseLayer(w, np.zeros(d_out), activation)


def softplus_link(z, floor=1e-6):
    z = np.asarray(z, dtype=np.float64)
    if floor <= 0:
        raise ValueError("floor must be > 0")
    safe = np.minimum(z, 30.0)
    return np.where(z > 30.0, z, np.log1p(np.exp(safe))) + floor


def sigmoid(z):
    z = np.asarray(z, dtype=np.float64)
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def kl_divergence(p, q):
    """sum_i p_i (ln p_i - ln q_i) with 0 ln 0 = 0."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise DomainError(f"kl_divergence: shapes {p.shape} and {q.shape} differ")
    if np.any(q <= 0):
        raise DomainError("kl_divergence: q must be strictly positive (smooth it first)")
    logp = np.log(np.where(p > 0, p, 1.0))
    out = (p * (logp - np.log(q))).sum(axis=-1)
    return float(out) if out.ndim == 0 else out


@dataclass
class ModelState:
    backbone: list
    head_scene: list
    head_image: list
    head_counts: list
    backbone_frozen: bool = False
    link_floor: float = 1e-6
    # feature standardization, applied before the backbone
    input_mean: np.ndarray = None
    input_scale: np.ndarray = None
    seeds: dict = field(default_factory=dict)

    @property
    def input_dim(self):
        return self.backbone[0].d_in if self.backbone else self.head_scene[0].d_in

    @property
    def output_dims(self):
        return tuple(getattr(self, f"head_{h}")[-1].d_out for h in HEADS)

    @property
    def hidden(self):
        return self.head_scene[0].d_out

    def block(self, name):
        return getattr(self, name)

    def parameters(self):
        """Ordered ``{"block.i.weights": array}`` mapping; arrays are live views."""
        out = {}
        for name in BLOCKS:
            for i, layer in enumerate(self.block(name)):
                out[f"{name}.{i}.weights"] = layer.weights
                out[f"{name}.{i}.bias"] = layer.bias
        return out

    def trainable(self, name):
        return not (self.backbone_frozen and name.startswith("backbone."))

    def copy(self):
        return ModelState(
            backbone=[l.copy() for l in self.backbone],
            head_scene=[l.copy() for l in self.head_scene],
            head_image=[l.copy() for l in self.head_image],
            head_counts=[l.copy() for l in self.head_counts],
            backbone_frozen=self.backbone_frozen,
            link_floor=self.link_floor,
            input_mean=None if self.input_mean is None else self.input_mean.copy(),
            input_scale=None if self.input_scale is None else self.input_scale.copy(),
            seeds=dict(self.seeds),
        )

    def validate(self):
        width = self.input_dim
        for layer in self.backbone:
            if layer.d_in != width:
                raise ValueError("backbone layer widths do not chain")
            width = layer.d_out
        for h in HEADS:
            first, second = getattr(self, f"head_{h}")
            if first.d_in != width or second.d_in != first.d_out:
                raise ValueError(f"head_{h} does not chain onto the backbone")
            if second.activation != "identity":
                raise ValueError(f"head_{h} output layer must be linear")


def build_model(input_dim, k_scene, k_image, k_counts, *, hidden=1024,
                backbone_widths=(128, 128, 128), rng=None, seed=0, link_floor=1e-6):
    if rng is None:
        rng = np.random.default_rng(seed)
    backbone, width = [], input_dim
    for w in backbone_widths:
        backbone.append(xavier_init((w, width), rng))
        width = w

    def head(k):
        return [xavier_init((hidden, width), rng), xavier_init((k, hidden), rng, "identity")]

    model = ModelState(backbone, head(k_scene), head(k_image), head(k_counts),
                       link_floor=link_floor, seeds={"init": seed})
    model.validate()
    return model


def _standardize(model, x):
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != model.input_dim:
        raise DomainError(f"feature dimension {x.shape[-1]} != model input dimension {model.input_dim}")
    if model.input_mean is not None:
        x = (x - model.input_mean) / model.input_scale
    return x


def _run_backbone(model, x):
    cache = []
    for layer in model.backbone:
        pre, out = layer.forward(x)
        cache.append((x, pre))
        x = out
    return x, cache


def _run_head(layers, shared):
    pre1, h = layers[0].forward(shared)
    z, _ = layers[1].forward(h)
    return z, (shared, pre1, h)


def forward_batch(model, features):
    """Map features ``(N, d)`` to (alpha_scene, alpha_image, lambda), each ``(N, k)``."""
    x = np.atleast_2d(_standardize(model, features))
    shared, _ = _run_backbone(model, x)
    return tuple(
        softplus_link(_run_head(getattr(model, f"head_{h}"), shared)[0], model.link_floor)
        for h in HEADS
    )


def forward(model, a):
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 1:
        raise DomainError("forward takes a single feature vector; use forward_batch for batches")
    return tuple(p[0] for p in forward_batch(model, a[None, :]))


@dataclass
class Batch:
    """Stacked supervision; Dirichlet targets are smoothed and logged once here."""

    features: np.ndarray
    log_scene: np.ndarray
    log_image: np.ndarray
    counts: np.ndarray
    log_count_factorial: np.ndarray

    def __len__(self):
        return self.features.shape[0]

    @classmethod
    def from_arrays(cls, features, scene, image, counts, eps=SMOOTH_EPS):
        features = np.atleast_2d(np.asarray(features, dtype=np.float64))
        counts = np.atleast_2d(np.asarray(counts)).astype(np.float64)
        if features.shape[0] == 0:
            raise DomainError("empty batch")
        return cls(
            features,
            np.log(smooth_simplex(np.atleast_2d(scene), eps)),
            np.log(smooth_simplex(np.atleast_2d(image), eps)),
            counts,
            kernels.lgamma(counts + 1.0).sum(axis=1),
        )

    @classmethod
    def from_pairs(cls, pairs, eps=SMOOTH_EPS):
        """Build from ``(feature, ground)`` pairs; ``ground`` exposes scene_dist, image_dist, counts."""
        pairs = list(pairs)
        if not pairs:
            raise DomainError("empty batch")
        return cls.from_arrays(
            [a for a, _ in pairs],
            [g.scene_dist for _, g in pairs],
            [g.image_dist for _, g in pairs],
            [g.counts for _, g in pairs],
            eps,
        )

    def subset(self, idx):
        return Batch(self.features[idx], self.log_scene[idx], self.log_image[idx],
                     self.counts[idx], self.log_count_factorial[idx])


def _as_batch(batch):
    return batch if isinstance(batch, Batch) else Batch.from_pairs(batch)


def _check_dims(model, batch):
    for h, k, target in zip(HEADS, model.output_dims,
                            (batch.log_scene, batch.log_image, batch.counts)):
        if target.shape[1] != k:
            raise DomainError(f"{h} target dimension {target.shape[1]} != head output {k}")


def _dirichlet_nll(alpha, log_x):
    total = alpha.sum(axis=1)
    norm = kernels.lgamma(alpha).sum(axis=1) - kernels.lgamma(total)
    return norm - ((alpha - 1.0) * log_x).sum(axis=1)


def _poisson_nll(lam, counts, log_fact):
    return (lam - counts * np.log(lam)).sum(axis=1) + log_fact


def per_sample_nll(model, batch):
    """Array ``(3, N)`` of per-sample NLLs for the scene, image and count heads."""
    batch = _as_batch(batch)
    _check_dims(model, batch)
    a_s, a_i, lam = forward_batch(model, batch.features)
    return np.stack([
        _dirichlet_nll(a_s, batch.log_scene),
        _dirichlet_nll(a_i, batch.log_image),
        _poisson_nll(lam, batch.counts, batch.log_count_factorial),
    ])


def loss(model, batch, weights=(1.0, 1.0, 1.0)):
    return float(np.dot(weights, per_sample_nll(model, batch).mean(axis=1)))


def backward(model, batch, weights=(1.0, 1.0, 1.0)):
    """Exact gradients of the weighted sum of mean head NLLs.

    Returns ``(grads, loss)`` where ``grads`` has the keys of
    :meth:`ModelState.parameters`. Frozen backbone gradients are zero.
    """
    batch = _as_batch(batch)
    _check_dims(model, batch)
    n = len(batch)
    x = _standardize(model, batch.features)
    shared, bb_cache = _run_backbone(model, x)

    grads = {}
    d_shared = np.zeros_like(shared)
    total = 0.0
    for h, w in zip(HEADS, weights):
        layers = getattr(model, f"head_{h}")
        z, (inp, pre1, hid) = _run_head(layers, shared)
        par = softplus_link(z, model.link_floor)
        if h == "counts":
            nll = _poisson_nll(par, batch.counts, batch.log_count_factorial)
            d_par = 1.0 - batch.counts / par
        else:
            log_x = batch.log_scene if h == "scene" else batch.log_image
            nll = _dirichlet_nll(par, log_x)
            d_par = (kernels.digamma(par)
                     - kernels.digamma(par.sum(axis=1, keepdims=True)) - log_x)
        total += w * nll.mean()
        dz = (w / n) * d_par * sigmoid(z)
        dh, grads[f"head_{h}.1.weights"], grads[f"head_{h}.1.bias"] = layers[1].backward(hid, z, dz)
        d_in, grads[f"head_{h}.0.weights"], grads[f"head_{h}.0.bias"] = layers[0].backward(inp, pre1, dh)
        d_shared += d_in

    for i in range(len(model.backbone) - 1, -1, -1):
        layer = model.backbone[i]
        if model.backbone_frozen:
            grads[f"backbone.{i}.weights"] = np.zeros_like(layer.weights)
            grads[f"backbone.{i}.bias"] = np.zeros_like(layer.bias)
            continue
        inp, pre = bb_cache[i]
        d_shared, grads[f"backbone.{i}.weights"], grads[f"backbone.{i}.bias"] = \
            layer.backward(inp, pre, d_shared)

    order = model.parameters()
    return {k: grads[k] for k in order}, float(total)


@dataclass
class AdamState:
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps_hat: float = 1e-8
    weight_decay: float = 0.0005
    decoupled: bool = False
    step_count: int = 0
    first_moment: dict = field(default_factory=dict)
    second_moment: dict = field(default_factory=dict)

    def __post_init__(self):
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("Adam betas must lie in [0, 1)")
        if self.step_count < 0:
            raise ValueError("step_count must be >= 0")


def adam_step(state, model, grads):
    """One in-place Adam update.

    ``model`` is a :class:`ModelState` (frozen backbone skipped) or a plain
    ``{name: array}`` dict. Weight decay is added to the gradient as an L2
    term unless ``state.decoupled``, in which case it shrinks parameters by
    ``lr * weight_decay`` directly.
    """
    if isinstance(model, ModelState):
        params = {k: v for k, v in model.parameters().items() if model.trainable(k)}
    else:
        params = model
    state.step_count += 1
    t = state.step_count
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for name, theta in params.items():
        g = grads[name]
        if g.shape != theta.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {theta.shape} for {name}")
        if state.weight_decay and not state.decoupled:
            g = g + state.weight_decay * theta
        m = state.first_moment.get(name)
        if m is None:
            m = state.first_moment[name] = np.zeros_like(theta)
            state.second_moment[name] = np.zeros_like(theta)
        v = state.second_moment[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        if state.weight_decay and state.decoupled:
            theta -= state.lr * state.weight_decay * theta
        theta -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps_hat)
    return model, state


# -- checkpoint I/O ---------------------------------------------------------

def _encode(arr):
    arr = np.ascontiguousarray(arr, dtype="<f8")
    return {"shape": list(arr.shape), "data": base64.b64encode(arr.tobytes()).decode("ascii")}


def _decode(obj):
    raw = base64.b64decode(obj["data"])
    return np.frombuffer(raw, dtype="<f8").reshape(obj["shape"]).astype(np.float64)


def save_checkpoint(model, path):
    """JSON container; arrays are base64 little-endian float64 so reloads are bit-exact."""
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": 1,
        "dtype": "<f8",
        "dims": {
            "input": model.input_dim,
            "hidden": model.hidden,
            "backbone": [l.d_out for l in model.backbone],
            "outputs": dict(zip(HEADS, model.output_dims)),
        },
        "backbone_frozen": model.backbone_frozen,
        "link_floor": model.link_floor,
        "input_mean": None if model.input_mean is None else _encode(model.input_mean),
        "input_scale": None if model.input_scale is None else _encode(model.input_scale),
        "seeds": model.seeds,
        "layers": [
            {"block": name, "index": i, "activation": layer.activation,
             "weights": _encode(layer.weights), "bias": _encode(layer.bias)}
            for name in BLOCKS for i, layer in enumerate(model.block(name))
        ],
    }
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)
        fh.write("\n")


def load_checkpoint(path):
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not a {CHECKPOINT_FORMAT} file")
    blocks = {name: [] for name in BLOCKS}
    for entry in sorted(doc["layers"], key=lambda e: (BLOCKS.index(e["block"]), e["index"])):
        blocks[entry["block"]].append(
            DenseLayer(_decode(entry["weights"]), _decode(entry["bias"]), entry["activation"])
        )
    model = ModelState(
        **blocks,
        backbone_frozen=bool(doc["backbone_frozen"]),
        link_floor=float(doc["link_floor"]),
        input_mean=None if doc["input_mean"] is None else _decode(doc["input_mean"]),
        input_scale=None if doc["input_scale"] is None else _decode(doc["input_scale"]),
        seeds=doc.get("seeds", {}),
    )
    model.validate()
    return model
