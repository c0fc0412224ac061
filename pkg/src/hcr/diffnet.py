"""A small shared-encoder network with a classifier head and a projection head.

Layout::

    x -> encoder (affine + activation per hidden width, then affine to feature_dim)
      -> classifier:  affine  feature_dim -> num_classes          (logits)
      -> projection:  affine -> activation -> affine -> l2-normalize

Gradients are computed by explicit per-layer backward passes.
"""
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .exceptions import ConfigError, ShapeMismatch
from .geometry import project_to_sphere, sphere_backward

ACTIVATIONS = ("relu", "tanh")
CHECKPOINT_FORMAT = "hcr-checkpoint"


@dataclass
class NetworkConfig:
    input_dim: int
    encoder_widths: tuple = (64,)
    feature_dim: int = 32
    num_classes: int = 4
    projection_dim: int = 16
    projection_hidden: int = None
    activation: str = "tanh"

    def __post_init__(self):
        self.encoder_widths = tuple(int(w) for w in self.encoder_widths)
        if self.projection_hidden is None:
            self.projection_hidden = self.feature_dim
        dims = (self.input_dim, self.feature_dim, self.num_classes,
                self.projection_hidden, *self.encoder_widths)
        if min(dims) < 1:
            raise ConfigError(f"all network dimensions must be >= 1: {self}")
        if self.projection_dim < 2:
            raise ConfigError("projection_dim must be >= 2 to live on a sphere")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"activation must be one of {ACTIVATIONS}")

    @property
    def encoder_dims(self):
        return (self.input_dim, *self.encoder_widths, self.feature_dim)

    def to_dict(self):
        d = asdict(self)
        d["encoder_widths"] = list(self.encoder_widths)
        return d


@dataclass
class NetworkParams:
    """Named parameter arrays plus the config that fixes their shapes.

    Weights are stored ``(fan_in, fan_out)`` so a layer computes
    ``x @ W + b``.
    """

    config: NetworkConfig
    arrays: dict

    def __getitem__(self, name):
        return self.arrays[name]

    def __iter__(self):
        return iter(self.arrays)

    @property
    def n_encoder_layers(self):
        return len(self.config.encoder_dims) - 1

    def copy(self):
        return NetworkParams(self.config, {k: v.copy() for k, v in self.arrays.items()})

    def astype(self, dtype):
        return NetworkParams(self.config, {k: v.astype(dtype) for k, v in self.arrays.items()})

    def flat(self):
        return np.concatenate([v.ravel() for v in self.arrays.values()])


def _layer_shapes(cfg):
    shapes = {}
    dims = cfg.encoder_dims
    for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
        shapes[f"encoder.{i}.weight"] = (a, b)
        shapes[f"encoder.{i}.bias"] = (b,)
    shapes["classifier.weight"] = (cfg.feature_dim, cfg.num_classes)
    shapes["classifier.bias"] = (cfg.num_classes,)
    shapes["projection.0.weight"] = (cfg.feature_dim, cfg.projection_hidden)
    shapes["projection.0.bias"] = (cfg.projection_hidden,)
    shapes["projection.1.weight"] = (cfg.projection_hidden, cfg.projection_dim)
    shapes["projection.1.bias"] = (cfg.projection_dim,)
    return shapes


def init_params(cfg, seed=None, dtype=np.float64):
    """Gaussian weights with std ``1/sqrt(fan_in)``, zero biases."""
    rng = np.random.default_rng(seed)
    arrays = {}
    for name, shape in _layer_shapes(cfg).items():
        if name.endswith(".weight"):
            arrays[name] = (rng.standard_normal(shape) / np.sqrt(shape[0])).astype(dtype)
        else:
            arrays[name] = np.zeros(shape, dtype=dtype)
    return NetworkParams(cfg, arrays)


def _act(z, kind):
    return np.maximum(z, 0.0) if kind == "relu" else np.tanh(z)


def _act_grad(z, a, kind):
    return (z > 0).astype(z.dtype) if kind == "relu" else 1.0 - a * a


@dataclass
class ForwardRecord:
    inputs: np.ndarray
    features: np.ndarray
    logits: np.ndarray
    projections: np.ndarray
    projection_raw: np.ndarray
    # (input, pre-activation, output) per encoder layer
    encoder_cache: list = field(default_factory=list)
    projection_cache: tuple = None


def forward(params, x):
    """Run encoder, classifier and projection head on a batch."""
    cfg = params.config
    x = np.asarray(x)
    if x.ndim != 2 or x.shape[1] != cfg.input_dim:
        raise ShapeMismatch(f"expected (B, {cfg.input_dim}) input, got {x.shape}")
    dtype = params["classifier.weight"].dtype
    h = x.astype(dtype, copy=False)

    cache = []
    last = params.n_encoder_layers - 1
    for i in range(params.n_encoder_layers):
        z = h @ params[f"encoder.{i}.weight"] + params[f"encoder.{i}.bias"]
        # the feature layer stays affine so features cannot collapse to exact zeros
        a = z if i == last else _act(z, cfg.activation)
        cache.append((h, z, a))
        h = a
    features = h

    logits = features @ params["classifier.weight"] + params["classifier.bias"]

    z = features @ params["projection.0.weight"] + params["projection.0.bias"]
    a = _act(z, cfg.activation)
    raw = a @ params["projection.1.weight"] + params["projection.1.bias"]
    projections = project_to_sphere(raw)

    return ForwardRecord(
        inputs=x, features=features, logits=logits, projections=projections,
        projection_raw=raw, encoder_cache=cache, projection_cache=(z, a),
    )


def backward(params, record, grad_logits=None, grad_projections=None, grad_features=None):
    """Reverse-mode gradients of a scalar loss w.r.t. every parameter.

    The upstream gradients are w.r.t. ``record.logits``, the unit-norm
    ``record.projections`` and ``record.features``; any of them may be None.
    """
    cfg = params.config
    grads = {name: np.zeros_like(v) for name, v in params.arrays.items()}
    feats = record.features
    g_feat = np.zeros_like(feats)

    def check(g, ref, name):
        g = np.asarray(g)
        if g.shape != ref.shape:
            raise ShapeMismatch(f"{name} gradient shape {g.shape} != {ref.shape}")
        return g

    if grad_features is not None:
        g_feat += check(grad_features, feats, "features")

    if grad_logits is not None:
        g = check(grad_logits, record.logits, "logits")
        grads["classifier.weight"] = feats.T @ g
        grads["classifier.bias"] = g.sum(axis=0)
        g_feat += g @ params["classifier.weight"].T

    if grad_projections is not None:
        g = check(grad_projections, record.projections, "projections")
        g_raw = sphere_backward(record.projection_raw, g)
        z, a = record.projection_cache
        grads["projection.1.weight"] = a.T @ g_raw
        grads["projection.1.bias"] = g_raw.sum(axis=0)
        g_z = (g_raw @ params["projection.1.weight"].T) * _act_grad(z, a, cfg.activation)
        grads["projection.0.weight"] = feats.T @ g_z
        grads["projection.0.bias"] = g_z.sum(axis=0)
        g_feat += g_z @ params["projection.0.weight"].T

    g = g_feat
    last = params.n_encoder_layers - 1
    for i in reversed(range(params.n_encoder_layers)):
        h, z, a = record.encoder_cache[i]
        g_z = g if i == last else g * _act_grad(z, a, cfg.activation)
        grads[f"encoder.{i}.weight"] = h.T @ g_z
        grads[f"encoder.{i}.bias"] = g_z.sum(axis=0)
        if i:
            g = g_z @ params[f"encoder.{i}.weight"].T
    return grads


@dataclass
class OptimizerState:
    learning_rate: float = 0.02
    momentum: float = 0.9
    velocity: dict = None

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError("momentum must lie in [0, 1)")


def sgd_momentum_step(params, grads, state):
    """``v <- m v + g``, ``theta <- theta - lr v``; updates in place."""
    if state.velocity is None:
        state.velocity = {k: np.zeros_like(v) for k, v in params.arrays.items()}
    for name, theta in params.arrays.items():
        v = state.velocity[name]
        g = grads[name]
        if v.shape != theta.shape or g.shape != theta.shape:
            raise ShapeMismatch(f"optimizer shapes disagree for {name}")
        v *= state.momentum
        v += g
        theta -= state.learning_rate * v
    return params, state


def _format_array(values):
    return "[" + ", ".join(f"{v:.17g}" for v in values) + "]"


def save_checkpoint(params, path):
    """Write params as JSON; floats use 17 significant digits (bit-exact)."""
    parts = []
    for name, arr in params.arrays.items():
        if not np.all(np.isfinite(arr)):
            raise ValueError(f"parameter {name} has non-finite entries")
        header = json.dumps(name)
        parts.append(
            f'    {header}: {{"shape": {json.dumps(list(arr.shape))}, '
            f'"dtype": "{arr.dtype.name}", '
            f'"data": {_format_array(arr.ravel().astype(np.float64).tolist())}}}'
        )
    text = (
        "{\n"
        f'  "format": "{CHECKPOINT_FORMAT}",\n'
        '  "version": 1,\n'
        f'  "config": {json.dumps(params.config.to_dict(), sort_keys=True)},\n'
        '  "arrays": {\n' + ",\n".join(parts) + "\n  }\n}\n"
    )
    with open(path, "w") as fh:
        fh.write(text)


def load_checkpoint(path):
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path} is not a {CHECKPOINT_FORMAT} file")
    cfg = NetworkConfig(**doc["config"])
    arrays = {}
    for name, entry in doc["arrays"].items():
        arrays[name] = np.asarray(entry["data"], dtype=entry["dtype"]).reshape(entry["shape"])
    expected = _layer_shapes(cfg)
    for name, shape in expected.items():
        if name not in arrays or arrays[name].shape != tuple(shape):
            raise ShapeMismatch(f"checkpoint entry {name} missing or misshapen")
    return NetworkParams(cfg, arrays)
