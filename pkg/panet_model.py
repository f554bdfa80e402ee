"""
Part-aware multi-view recognition network.

Pipeline for one object with v views:
    encode_views -> cross_view_associate -> attend_parts -> sample_parts
    -> apr_refine -> predict_parts / view_part_logits -> total_loss

Feature maps are channel-last (v, H, W, C). All learnable tensors live in
``ModelParams`` under stable names that the checkpoint format relies on.
"""

import logging
from typing import Dict, Iterator, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict

from config import PANetConfig
from exceptions import DimensionError, UsageError
from shapegen import MultiViewSample, augment
from tensor_engine import (
    Tensor,
    Tape,
    avg_pool2d,
    backward,
    concat_rows,
    conv2d,
    global_avg_pool,
    layer_norm,
    log_clamped,
    matmul,
    mul,
    reduce_mean,
    reduce_sum,
    relu,
    reshape,
    scale,
    scaled_dot_attention,
    slice_rows,
    softmax_lastdim,
    transpose,
)

logger = logging.getLogger(__name__)


def parameter_shapes(config: PANetConfig) -> Dict[str, Tuple[int, ...]]:
    """Name -> shape of every learnable tensor, in canonical order"""
    C, M, L, K = config.channels, config.attention_maps, config.parts, config.num_classes
    shapes: Dict[str, Tuple[int, ...]] = {}
    widths = (1,) + tuple(config.encoder_widths) + (C,)
    for i in range(len(widths) - 1):
        shapes[f"encoder.{i}.kernel"] = (3, 3, widths[i], widths[i + 1])
        shapes[f"encoder.{i}.bias"] = (widths[i + 1],)
    shapes["psi.kernel"] = (1, 1, C, M)
    shapes["psi.bias"] = (M,)
    shapes["part_tokens"] = (L, C)
    hidden = config.mlp_ratio * C
    for d in range(config.depth):
        prefix = f"apr.{d}"
        shapes[f"{prefix}.ln1.gain"] = (C,)
        shapes[f"{prefix}.ln1.bias"] = (C,)
        for proj in ("q", "k", "v", "o"):
            shapes[f"{prefix}.attn.w{proj}"] = (C, C)
            shapes[f"{prefix}.attn.b{proj}"] = (C,)
        shapes[f"{prefix}.ln2.gain"] = (C,)
        shapes[f"{prefix}.ln2.bias"] = (C,)
        shapes[f"{prefix}.mlp.w1"] = (C, hidden)
        shapes[f"{prefix}.mlp.b1"] = (hidden,)
        shapes[f"{prefix}.mlp.w2"] = (hidden, C)
        shapes[f"{prefix}.mlp.b2"] = (C,)
    shapes["head_p.weight"] = (C, K)
    shapes["head_p.bias"] = (K,)
    shapes["head_q.weight"] = (M * C, K)
    shapes["head_q.bias"] = (K,)
    return shapes


class ModelParams:
    """All learnable tensors of one model instance (read-only during forward)"""

    def __init__(self, config: PANetConfig, tensors: Dict[str, Tensor]):
        expected = parameter_shapes(config)
        if list(tensors) != list(expected):
            missing = set(expected) - set(tensors)
            extra = set(tensors) - set(expected)
            raise DimensionError(f"Parameter names do not match config (missing {sorted(missing)}, "
                                 f"unexpected {sorted(extra)})")
        for name, tensor in tensors.items():
            if tensor.shape != expected[name]:
                raise DimensionError(f"{name}: shape {tensor.shape} != expected {expected[name]}")
            if not np.all(np.isfinite(tensor.data)):
                raise UsageError(f"{name}: parameter values must be finite")
        self.config = config
        self._tensors = tensors

    @classmethod
    def initialize(cls, config: PANetConfig, seed: int = 0) -> "ModelParams":
        rng = np.random.default_rng(seed)
        arrays: Dict[str, np.ndarray] = {}
        for name, shape in parameter_shapes(config).items():
            leaf = name.rsplit(".", 1)[-1]
            if name == "part_tokens":
                arrays[name] = rng.normal(0.0, config.token_std, shape)
            elif leaf == "gain":
                arrays[name] = np.ones(shape)
            elif len(shape) == 1:
                arrays[name] = np.zeros(shape)
            elif name.startswith(("encoder.", "psi.")):
                fan_in = shape[0] * shape[1] * shape[2]
                arrays[name] = rng.normal(0.0, np.sqrt(2.0 / fan_in), shape)
            elif name.startswith("head_"):
                arrays[name] = rng.normal(0.0, 1.0 / np.sqrt(shape[0]), shape)
            else:
                arrays[name] = rng.normal(0.0, 0.02, shape)
        return cls.from_arrays(config, arrays)

    @classmethod
    def from_arrays(cls, config: PANetConfig, arrays: Dict[str, np.ndarray]) -> "ModelParams":
        order = parameter_shapes(config)
        missing = set(order) - set(arrays)
        if missing:
            raise DimensionError(f"Missing parameters: {sorted(missing)}")
        return cls(config, {name: Tensor(arrays[name], requires_grad=True, name=name) for name in order})

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self._tensors)

    def __len__(self) -> int:
        return len(self._tensors)

    def items(self):
        return self._tensors.items()

    def arrays(self) -> Dict[str, np.ndarray]:
        return {name: t.numpy() for name, t in self._tensors.items()}

    def replace(self, updates: Dict[str, np.ndarray]) -> "ModelParams":
        """New parameter set with some tensors swapped for new values"""
        tensors = dict(self._tensors)
        for name, values in updates.items():
            if name not in tensors:
                raise UsageError(f"Unknown parameter '{name}'")
            tensors[name] = Tensor(values, requires_grad=True, name=name)
        return ModelParams(self.config, tensors)

    def count(self) -> int:
        return int(sum(t.size for t in self._tensors.values()))

    @property
    def part_tokens(self) -> Tensor:
        return self._tensors["part_tokens"]


class LossTerms(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    loss: Tensor
    ce: Tensor
    awe: Tensor


class ForwardResult(BaseModel):
    """Outputs and introspection tensors of one forward pass"""

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    probs: Tensor            # p̂, (K,)
    part_probs: Tensor       # p¹…p^L, (L, K)
    view_probs: Tensor       # q¹…q^v, (v, K)
    loss: Tensor
    ce: Tensor
    awe: Tensor
    cva_weights: Optional[Tensor]  # α, (v, v); None with CVA disabled
    attention: Tensor        # A, (v, H, W, M)
    parts: Tensor            # T, (v·M, C)
    global_parts: Tensor     # P̄, (L, C)

    @property
    def prediction(self) -> int:
        """Argmax of p̂; ties go to the lowest class index"""
        return int(np.argmax(self.probs.data))


# ---------------------------------------------------------------------------
# pipeline stages
# ---------------------------------------------------------------------------

def encode_views(views: Union[np.ndarray, Sequence[np.ndarray]], params: ModelParams) -> Tensor:
    """Run every view through the same conv stack; returns I with shape (v, H, W, C)"""
    sizes = {np.shape(view) for view in views}
    if len(sizes) != 1:
        raise DimensionError(f"All views must share one size, got {sorted(sizes)}")
    (size,) = sizes
    if len(size) != 2 or size[0] != size[1]:
        raise DimensionError(f"Views must be square R×R images, got {size}")
    x = Tensor(np.stack([np.asarray(view, dtype=np.float64) for view in views])[..., None])
    blocks = len(params.config.encoder_widths) + 1
    for i in range(blocks):
        x = conv2d(x, params[f"encoder.{i}.kernel"], stride=1, padding=1) + params[f"encoder.{i}.bias"]
        x = avg_pool2d(relu(x), 2)
    return x


def cva_weights(features: Tensor) -> Tensor:
    """α (v, v): softmax over j of ω(I_i)·ω(I_j)"""
    pooled = global_avg_pool(features)
    return softmax_lastdim(matmul(pooled, transpose(pooled, (1, 0))))


def cross_view_associate(features: Tensor, weights: Optional[Tensor] = None) -> Tensor:
    """Enhanced maps F_i = Σ_j α_ij I_j (a convex combination of full-resolution maps)"""
    v, h, w, c = features.shape
    if weights is None:
        weights = cva_weights(features)
    mixed = matmul(weights, reshape(features, (v, h * w * c)))
    return reshape(mixed, (v, h, w, c))


def attend_parts(enhanced: Tensor, params: ModelParams) -> Tensor:
    """ψ: 1×1 convolution + relu giving M non-negative attention maps per view"""
    return relu(conv2d(enhanced, params["psi.kernel"], stride=1, padding=0) + params["psi.bias"])


def sample_parts(enhanced: Tensor, attention: Tensor) -> Tensor:
    """T (v·M, C): t_ij = ω(F_i ⊗ A_ij), rows ordered view-major then part index"""
    if enhanced.shape[:3] != attention.shape[:3]:
        raise DimensionError(f"Feature maps {enhanced.shape} and attention {attention.shape} disagree on v/H/W")
    v, h, w, c = enhanced.shape
    m = attention.shape[3]
    maps = reshape(transpose(attention, (0, 3, 1, 2)), (v, m, h, w, 1))
    weighted = mul(reshape(enhanced, (v, 1, h, w, c)), maps)
    return reshape(global_avg_pool(weighted), (v * m, c))


def multi_head_attention(x: Tensor, params: ModelParams, prefix: str, heads: int,
                         queries: Optional[int] = None) -> Tensor:
    """Self-attention of the rows of x; with ``queries`` only the first that many rows ask.

    Keys and values always come from every row, so the outputs for the first
    ``queries`` rows equal those of full self-attention.
    """
    rows, channels = x.shape
    width = channels // heads
    asking = rows if queries is None else queries

    def project(name: str, source: Tensor) -> Tensor:
        y = matmul(source, params[f"{prefix}.w{name}"]) + params[f"{prefix}.b{name}"]
        return transpose(reshape(y, (source.shape[0], heads, width)), (1, 0, 2))

    q = project("q", x if asking == rows else slice_rows(x, 0, asking))
    mixed = scaled_dot_attention(q, project("k", x), project("v", x))
    merged = reshape(transpose(mixed, (1, 0, 2)), (asking, channels))
    return matmul(merged, params[f"{prefix}.wo"]) + params[f"{prefix}.bo"]


def apr_refine(parts: Tensor, params: ModelParams) -> Tensor:
    """Refine [P; T] with pre-norm transformer layers (no positional encoding); returns P̄ (L, C).

    The T rows leaving the last layer are never read, so that layer only
    updates the L token rows while still attending over all L+N rows.
    """
    config = params.config
    stream = concat_rows([params.part_tokens, parts])
    for d in range(config.depth):
        prefix = f"apr.{d}"
        last = d == config.depth - 1
        normed = layer_norm(stream, params[f"{prefix}.ln1.gain"], params[f"{prefix}.ln1.bias"])
        attended = multi_head_attention(normed, params, f"{prefix}.attn", config.heads,
                                        queries=config.parts if last else None)
        if last:
            stream = slice_rows(stream, 0, config.parts)
        stream = stream + attended
        normed = layer_norm(stream, params[f"{prefix}.ln2.gain"], params[f"{prefix}.ln2.bias"])
        hidden = relu(matmul(normed, params[f"{prefix}.mlp.w1"]) + params[f"{prefix}.mlp.b1"])
        stream = stream + matmul(hidden, params[f"{prefix}.mlp.w2"]) + params[f"{prefix}.mlp.b2"]
    if stream.shape[0] != config.parts:
        stream = slice_rows(stream, 0, config.parts)
    return stream


def predict_parts(global_parts: Tensor, params: ModelParams) -> Tuple[Tensor, Tensor]:
    """Per-part probabilities p^i (L, K) and their average p̂ (K,)"""
    part_probs = softmax_lastdim(matmul(global_parts, params["head_p.weight"]) + params["head_p.bias"])
    return part_probs, reduce_mean(part_probs, axis=0)


def view_part_logits(parts: Tensor, params: ModelParams) -> Tensor:
    """q^j (v, K) from each view's M part rows flattened part-major into one M·C vector"""
    m = params.config.attention_maps
    n, c = parts.shape
    if n % m:
        raise DimensionError(f"Part sequence has {n} rows, not a multiple of M={m}")
    flat = reshape(parts, (n // m, m * c))
    return softmax_lastdim(matmul(flat, params["head_q.weight"]) + params["head_q.bias"])


def label_smooth(label: int, num_classes: int, smoothing: float) -> np.ndarray:
    """(1-ε)·onehot(y) + ε/K"""
    if not 0 <= label < num_classes:
        raise UsageError(f"Label {label} outside [0, {num_classes})")
    if not 0 <= smoothing < 1:
        raise UsageError(f"Smoothing must lie in [0, 1), got {smoothing}")
    target = np.full(num_classes, smoothing / num_classes)
    target[label] += 1.0 - smoothing
    return target


def total_loss(probs: Tensor, view_probs: Tensor, label: int, gamma: float = 1.0,
               smoothing: float = 0.0) -> LossTerms:
    """L = L_ce(p̂) + γ·L_awe(q), both against the smoothed target"""
    num_classes = probs.shape[-1]
    target = Tensor(label_smooth(label, num_classes, smoothing))
    ce = scale(reduce_sum(mul(target, log_clamped(probs))), -1.0)
    views = view_probs.shape[0]
    awe = scale(reduce_sum(mul(target, log_clamped(view_probs))), -1.0 / views)
    return LossTerms(loss=ce + scale(awe, gamma), ce=ce, awe=awe)


def forward(sample: MultiViewSample, params: ModelParams, train_mode: bool = False,
            gamma: float = 1.0, smoothing: float = 0.0, aug_seed: int = 0) -> ForwardResult:
    config = params.config
    if sample.resolution != config.resolution:
        raise DimensionError(f"Sample resolution {sample.resolution} != model resolution {config.resolution}")
    views = sample.views
    if train_mode:
        views = np.stack([augment(view, seed=[aug_seed, i]) for i, view in enumerate(views)])

    features = encode_views(views, params)
    weights = None
    enhanced = features
    if config.use_cva:
        weights = cva_weights(features)
        enhanced = cross_view_associate(features, weights)
    attention = attend_parts(enhanced, params)
    parts = sample_parts(enhanced, attention)
    global_parts = apr_refine(parts, params)
    part_probs, probs = predict_parts(global_parts, params)
    view_probs = view_part_logits(parts, params)
    terms = total_loss(probs, view_probs, sample.label, gamma, smoothing)
    return ForwardResult(probs=probs, part_probs=part_probs, view_probs=view_probs,
                         loss=terms.loss, ce=terms.ce, awe=terms.awe, cva_weights=weights,
                         attention=attention, parts=parts, global_parts=global_parts)


def gradients_by_name(tape: Tape, params: ModelParams) -> Dict[str, np.ndarray]:
    return {name: tape.gradients.get(id(tensor), np.zeros(tensor.shape)) for name, tensor in params.items()}


class PANetModel:
    def __init__(self, config: PANetConfig, params: Optional[ModelParams] = None, seed: int = 0):
        """Initialize the network, drawing fresh parameters unless some are given"""
        self.config = config
        self.params = params if params is not None else ModelParams.initialize(config, seed)
        if self.params.config != config:
            raise UsageError("Parameters were built for a different configuration")
        logger.debug(f"PANet model ready: {self.params.count()} parameters")

    def forward(self, sample: MultiViewSample, train_mode: bool = False, gamma: float = 1.0,
                smoothing: float = 0.0, aug_seed: int = 0) -> ForwardResult:
        """Run the full pipeline on one sample"""
        return forward(sample, self.params, train_mode, gamma, smoothing, aug_seed)

    def predict(self, sample: MultiViewSample) -> int:
        return self.forward(sample).prediction

    def loss_and_gradients(self, sample: MultiViewSample, gamma: float = 1.0, smoothing: float = 0.0,
                           train_mode: bool = False,
                           aug_seed: int = 0) -> Tuple[ForwardResult, Dict[str, np.ndarray]]:
        """Forward on a fresh tape, then backward; gradients keyed by parameter name"""
        with Tape() as tape:
            result = self.forward(sample, train_mode, gamma, smoothing, aug_seed)
        backward(tape, result.loss)
        return result, gradients_by_name(tape, self.params)
