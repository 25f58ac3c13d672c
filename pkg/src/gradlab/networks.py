"""Network topologies: plain, residual, densenet, and multiskip MLPs.

Each network is encoder -> MLP stack -> linear head. The encoder is either
a dense projection (vector inputs) or a small two-layer conv stack (image
inputs) whose flattened features feed the MLP. Topology controls how layer
inputs are wired:

  plain      h_k = act(LN(W_k h_{k-1}))
  residual   h_k = h_{k-1} + act(LN(W_k h_{k-1}))   (layers 2..d; layer 1
             is the feat->width stem, so depth 1 coincides with plain)
  densenet   layer k reads concat(f, h_1, ..., h_{k-1})
  multiskip  layer k reads concat(h_{k-1}, f): the encoder features are
             broadcast to every layer, giving each depth a direct gradient
             path back to the encoder

LN is pre-activation and optional. The penultimate activation (last hidden
state) is exposed for representation-rank probes.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigError, ShapeError, StateError
from .layers import (
    ActivationCache,
    ConvCache,
    ConvLayer,
    DenseCache,
    DenseLayer,
    LayerNormCache,
    LayerNormParams,
    activation_backward,
    activation_forward,
    conv_backward,
    conv_forward,
    dense_backward,
    dense_forward,
    layernorm_backward,
    layernorm_forward,
)
from .linalg import init_weights

__all__ = [
    "TOPOLOGIES",
    "DEPTH_CLASSES",
    "WIDTH_CLASSES",
    "ArchitectureSpec",
    "NetworkParams",
    "NetworkCaches",
    "ForwardResult",
    "build_network",
    "forward_network",
    "backward_network",
    "per_layer_grad_norms",
    "mlp_input_dims",
    "mlp_param_count",
]

TOPOLOGIES = ("plain", "residual", "densenet", "multiskip")
ENCODERS = ("dense_projection", "small_conv")
DEPTH_CLASSES = {"small": 1, "medium": 4, "large": 8}
WIDTH_CLASSES = {"small": 128, "medium": 512, "large": 1024}


def _resolve(value, table, what):
    if isinstance(value, str):
        if value not in table:
            raise ConfigError(f"unknown {what} class '{value}', expected one of {sorted(table)} or an integer")
        return table[value]
    v = int(value)
    if v < 1:
        raise ConfigError(f"{what} must be >= 1, got {v}")
    return v


@dataclass(frozen=True)
class ArchitectureSpec:
    topology: str = "plain"
    depth: int | str = "small"
    width: int | str = "small"
    use_layernorm: bool = False
    activation: str = "relu"
    encoder: str = "dense_projection"
    feat_dim: int = 256  # dense_projection output size
    conv_channels: tuple = (8, 16)
    with_value_head: bool = False

    def __post_init__(self):
        if self.topology not in TOPOLOGIES:
            raise ConfigError(f"unknown topology '{self.topology}', expected one of {TOPOLOGIES}")
        if self.encoder not in ENCODERS:
            raise ConfigError(f"unknown encoder '{self.encoder}', expected one of {ENCODERS}")
        if self.activation not in ("relu", "tanh"):
            raise ConfigError(f"unknown activation '{self.activation}'")
        _resolve(self.depth, DEPTH_CLASSES, "depth")
        _resolve(self.width, WIDTH_CLASSES, "width")
        if self.feat_dim < 1:
            raise ConfigError("feat_dim must be >= 1")

    @property
    def n_layers(self) -> int:
        return _resolve(self.depth, DEPTH_CLASSES, "depth")

    @property
    def layer_width(self) -> int:
        return _resolve(self.width, WIDTH_CLASSES, "width")


def mlp_input_dims(spec: ArchitectureSpec, feat_dim: int) -> list[int]:
    """Input width of each hidden layer, per topology."""
    d, w = spec.n_layers, spec.layer_width
    dims = []
    for k in range(d):
        if k == 0:
            dims.append(feat_dim)
        elif spec.topology in ("plain", "residual"):
            dims.append(w)
        elif spec.topology == "densenet":
            dims.append(feat_dim + k * w)
        else:  # multiskip
            dims.append(w + feat_dim)
    return dims


@dataclass
class NetworkParams:
    spec: ArchitectureSpec
    in_shape: tuple  # (dim,) for vectors, (c, h, w) for images
    out_dim: int
    encoder: list  # [DenseLayer] or [ConvLayer, ConvLayer]
    hidden: list  # [DenseLayer] * depth
    norms: list | None  # [LayerNormParams] * depth when enabled
    head: DenseLayer
    value_head: DenseLayer | None = None
    feat_dim: int = 0  # actual flattened encoder feature size

    def tensors(self) -> dict[str, np.ndarray]:
        """All parameter tensors, ordered input -> output."""
        out: dict[str, np.ndarray] = {}
        if self.spec.encoder == "dense_projection":
            out["encoder.weight"] = self.encoder[0].weight
            out["encoder.bias"] = self.encoder[0].bias
        else:
            for i, conv in enumerate(self.encoder):
                out[f"encoder.conv{i}.kernels"] = conv.kernels
                out[f"encoder.conv{i}.bias"] = conv.bias
        for k, layer in enumerate(self.hidden):
            out[f"mlp.{k}.weight"] = layer.weight
            out[f"mlp.{k}.bias"] = layer.bias
            if self.norms is not None:
                out[f"mlp.{k}.gain"] = self.norms[k].gain
                out[f"mlp.{k}.shift"] = self.norms[k].shift
        out["head.weight"] = self.head.weight
        out["head.bias"] = self.head.bias
        if self.value_head is not None:
            out["value_head.weight"] = self.value_head.weight
            out["value_head.bias"] = self.value_head.bias
        return out

    def tensor_names(self) -> list[str]:
        return list(self.tensors().keys())

    def dense_blocks(self) -> list[tuple[str, DenseLayer]]:
        """Dense (weight, bias) blocks eligible for Kronecker preconditioning."""
        blocks = []
        if self.spec.encoder == "dense_projection":
            blocks.append(("encoder", self.encoder[0]))
        blocks.extend((f"mlp.{k}", layer) for k, layer in enumerate(self.hidden))
        blocks.append(("head", self.head))
        if self.value_head is not None:
            blocks.append(("value_head", self.value_head))
        return blocks

    def param_count(self) -> int:
        return sum(t.size for t in self.tensors().values())

    def clone_with(self, tensors: dict[str, np.ndarray]) -> "NetworkParams":
        """New NetworkParams with the given tensors (missing names keep current values)."""
        cur = self.tensors()
        get = lambda name: np.asarray(tensors.get(name, cur[name]), dtype=np.float64)
        if self.spec.encoder == "dense_projection":
            enc = [DenseLayer(get("encoder.weight"), get("encoder.bias"))]
        else:
            enc = [
                ConvLayer(get(f"encoder.conv{i}.kernels"), get(f"encoder.conv{i}.bias"), self.encoder[i].stride)
                for i in range(len(self.encoder))
            ]
        hid = [DenseLayer(get(f"mlp.{k}.weight"), get(f"mlp.{k}.bias")) for k in range(len(self.hidden))]
        norms = None
        if self.norms is not None:
            norms = [
                LayerNormParams(get(f"mlp.{k}.gain"), get(f"mlp.{k}.shift"), self.norms[k].epsilon)
                for k in range(len(self.hidden))
            ]
        head = DenseLayer(get("head.weight"), get("head.bias"))
        vhead = None
        if self.value_head is not None:
            vhead = DenseLayer(get("value_head.weight"), get("value_head.bias"))
        return NetworkParams(
            spec=self.spec,
            in_shape=self.in_shape,
            out_dim=self.out_dim,
            encoder=enc,
            hidden=hid,
            norms=norms,
            head=head,
            value_head=vhead,
            feat_dim=self.feat_dim,
        )


def mlp_param_count(params: NetworkParams) -> int:
    """Parameter count of the MLP stack plus head (encoder excluded)."""
    n = sum(l.weight.size + l.bias.size for l in params.hidden)
    if params.norms is not None:
        n += sum(ln.gain.size + ln.shift.size for ln in params.norms)
    n += params.head.weight.size + params.head.bias.size
    return n


def build_network(spec: ArchitectureSpec, in_shape, out_dim: int, rng: np.random.Generator) -> NetworkParams:
    """Deterministic construction: he init for relu, xavier for tanh.

    RNG is consumed in parameter order (encoder, mlp, head, value head), so
    the presence of a value head never changes the shared trunk weights.
    """
    if out_dim < 1:
        raise ConfigError("out_dim must be >= 1")
    scheme = "he" if spec.activation == "relu" else "xavier"
    if isinstance(in_shape, int):
        in_shape = (in_shape,)
    in_shape = tuple(int(s) for s in in_shape)

    if spec.encoder == "dense_projection":
        if len(in_shape) != 1:
            raise ConfigError(f"dense_projection encoder requires a vector input, got shape {in_shape}")
        enc = [DenseLayer(init_weights((spec.feat_dim, in_shape[0]), scheme, rng), np.zeros(spec.feat_dim))]
        feat = spec.feat_dim
    else:
        if len(in_shape) != 3:
            raise ConfigError(f"small_conv encoder requires a (c, h, w) input, got shape {in_shape}")
        c, h, w = in_shape
        c1, c2 = spec.conv_channels
        if h < 5 or w < 5:
            raise ConfigError(f"small_conv needs at least 5x5 inputs, got {h}x{w}")
        enc = [
            ConvLayer(init_weights((c1, c, 3, 3), scheme, rng), np.zeros(c1)),
            ConvLayer(init_weights((c2, c1, 3, 3), scheme, rng), np.zeros(c2)),
        ]
        feat = c2 * (h - 4) * (w - 4)

    width = spec.layer_width
    hidden = [
        DenseLayer(init_weights((width, d_in), scheme, rng), np.zeros(width))
        for d_in in mlp_input_dims(spec, feat)
    ]
    norms = [LayerNormParams(np.ones(width), np.zeros(width)) for _ in hidden] if spec.use_layernorm else None
    head = DenseLayer(init_weights((out_dim, width), scheme, rng), np.zeros(out_dim))
    vhead = None
    if spec.with_value_head:
        vhead = DenseLayer(init_weights((1, width), scheme, rng), np.zeros(1))
    return NetworkParams(
        spec=spec,
        in_shape=in_shape,
        out_dim=out_dim,
        encoder=enc,
        hidden=hidden,
        norms=norms,
        head=head,
        value_head=vhead,
        feat_dim=feat,
    )


@dataclass
class _LayerStep:
    dense: DenseCache
    ln: LayerNormCache | None
    act: ActivationCache


@dataclass
class NetworkCaches:
    encoder: list  # dense: [DenseCache]; conv: [ConvCache, ActCache, ConvCache, ActCache]
    steps: list  # [_LayerStep] per hidden layer
    head: DenseCache
    value: DenseCache | None
    features: np.ndarray
    hiddens: list  # h_1..h_d

    def dense_cache(self, layer_id: str) -> DenseCache:
        if layer_id == "encoder":
            return self.encoder[0]
        if layer_id == "head":
            return self.head
        if layer_id == "value_head":
            if self.value is None:
                raise StateError("no value head cache recorded")
            return self.value
        if layer_id.startswith("mlp."):
            return self.steps[int(layer_id.split(".")[1])].dense
        raise StateError(f"unknown dense layer id '{layer_id}'")


@dataclass
class ForwardResult:
    outputs: np.ndarray  # (batch, out_dim)
    penultimate: np.ndarray  # (batch, width), last hidden activation
    caches: NetworkCaches
    value: np.ndarray | None = None  # (batch,) when a value head exists


def _encode_forward(params: NetworkParams, x: np.ndarray):
    if params.spec.encoder == "dense_projection":
        z, c = dense_forward(params.encoder[0], x)
        f, ac = activation_forward(params.spec.activation, z)
        return f, [c, ac]
    y0, c0 = conv_forward(params.encoder[0], x)
    a0, ac0 = activation_forward("relu", y0.reshape(y0.shape[0], -1))
    y1, c1 = conv_forward(params.encoder[1], a0.reshape(y0.shape))
    a1, ac1 = activation_forward("relu", y1.reshape(y1.shape[0], -1))
    return a1, [c0, ac0, c1, ac1, y0.shape, y1.shape]


def _encode_backward(params: NetworkParams, enc_caches, df: np.ndarray, bundle: dict):
    if params.spec.encoder == "dense_projection":
        c, ac = enc_caches
        dz = activation_backward(params.spec.activation, ac, df)
        _, dw, db = dense_backward(params.encoder[0], c, dz)
        bundle["encoder.weight"] = dw
        bundle["encoder.bias"] = db
        return
    c0, ac0, c1, ac1, y0_shape, y1_shape = enc_caches
    dy1 = activation_backward("relu", ac1, df).reshape(y1_shape)
    da0, dk1, db1 = conv_backward(params.encoder[1], c1, dy1)
    dy0 = activation_backward("relu", ac0, da0.reshape(da0.shape[0], -1)).reshape(y0_shape)
    _, dk0, db0 = conv_backward(params.encoder[0], c0, dy0)
    bundle["encoder.conv0.kernels"] = dk0
    bundle["encoder.conv0.bias"] = db0
    bundle["encoder.conv1.kernels"] = dk1
    bundle["encoder.conv1.bias"] = db1


def _layer_input(topology: str, k: int, hiddens: list, f: np.ndarray) -> np.ndarray:
    if k == 0:
        return f
    if topology in ("plain", "residual"):
        return hiddens[k - 1]
    if topology == "densenet":
        return np.concatenate([f] + hiddens[:k], axis=1)
    return np.concatenate([hiddens[k - 1], f], axis=1)


def forward_network(params: NetworkParams, x: np.ndarray) -> ForwardResult:
    x = np.asarray(x, dtype=np.float64)
    spec = params.spec
    f, enc_caches = _encode_forward(params, x)
    hiddens: list[np.ndarray] = []
    steps: list[_LayerStep] = []
    for k, layer in enumerate(params.hidden):
        inp = _layer_input(spec.topology, k, hiddens, f)
        z, dc = dense_forward(layer, inp)
        if params.norms is not None:
            zn, lc = layernorm_forward(params.norms[k], z)
        else:
            zn, lc = z, None
        a, ac = activation_forward(spec.activation, zn)
        h = hiddens[k - 1] + a if (spec.topology == "residual" and k >= 1) else a
        hiddens.append(h)
        steps.append(_LayerStep(dense=dc, ln=lc, act=ac))
    outputs, head_cache = dense_forward(params.head, hiddens[-1])
    value = None
    value_cache = None
    if params.value_head is not None:
        v, value_cache = dense_forward(params.value_head, hiddens[-1])
        value = v[:, 0]
    caches = NetworkCaches(
        encoder=enc_caches, steps=steps, head=head_cache, value=value_cache, features=f, hiddens=hiddens
    )
    return ForwardResult(outputs=outputs, penultimate=hiddens[-1], caches=caches, value=value)


def backward_network(
    params: NetworkParams,
    caches: NetworkCaches,
    d_outputs: np.ndarray,
    d_value: np.ndarray | None = None,
) -> dict[str, np.ndarray]:
    """Gradients for every parameter tensor, accumulated across skip branches.

    Returns a dict ordered input -> output (same order as params.tensors()).
    """
    spec = params.spec
    d = len(params.hidden)
    if len(caches.steps) != d:
        raise StateError("caches do not match network depth")
    d_outputs = np.asarray(d_outputs, dtype=np.float64)
    batch = caches.hiddens[-1].shape[0]
    width = params.hidden[-1].out_dim
    feat = params.feat_dim

    bundle: dict[str, np.ndarray] = {}
    dh = [np.zeros((batch, width)) for _ in range(d)]
    df = np.zeros((batch, feat))

    dx_head, dw, db = dense_backward(params.head, caches.head, d_outputs)
    bundle["head.weight"] = dw
    bundle["head.bias"] = db
    dh[d - 1] += dx_head
    if params.value_head is not None and d_value is not None:
        dxv, dwv, dbv = dense_backward(params.value_head, caches.value, np.asarray(d_value, dtype=np.float64)[:, None])
        bundle["value_head.weight"] = dwv
        bundle["value_head.bias"] = dbv
        dh[d - 1] += dxv
    elif params.value_head is not None:
        bundle["value_head.weight"] = np.zeros_like(params.value_head.weight)
        bundle["value_head.bias"] = np.zeros_like(params.value_head.bias)
        caches.value.d_preact = np.zeros((batch, 1))

    for k in range(d - 1, -1, -1):
        g = dh[k]
        if spec.topology == "residual" and k >= 1:
            dh[k - 1] += g  # identity shortcut
        step = caches.steps[k]
        dzn = activation_backward(spec.activation, step.act, g)
        if params.norms is not None:
            dz, dgain, dshift = layernorm_backward(params.norms[k], step.ln, dzn)
            bundle[f"mlp.{k}.gain"] = dgain
            bundle[f"mlp.{k}.shift"] = dshift
        else:
            dz = dzn
        dinp, dw, db = dense_backward(params.hidden[k], step.dense, dz)
        bundle[f"mlp.{k}.weight"] = dw
        bundle[f"mlp.{k}.bias"] = db
        if k == 0:
            df += dinp
        elif spec.topology in ("plain", "residual"):
            dh[k - 1] += dinp
        elif spec.topology == "multiskip":
            dh[k - 1] += dinp[:, :width]
            df += dinp[:, width:]
        else:  # densenet: [f | h_1 | ... | h_{k-1}]
            df += dinp[:, :feat]
            for j in range(k - 1):
                dh[j] += dinp[:, feat + j * width : feat + (j + 1) * width]
            dh[k - 1] += dinp[:, feat + (k - 1) * width :]

    _encode_backward(params, caches.encoder, df, bundle)
    return {name: bundle[name] for name in params.tensor_names()}


def per_layer_grad_norms(bundle: dict[str, np.ndarray]) -> list[float]:
    """L2 norm of each parameter tensor's gradient, in bundle (input->output) order."""
    return [float(np.sqrt(np.sum(g * g))) for g in bundle.values()]
