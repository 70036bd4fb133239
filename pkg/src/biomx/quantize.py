"""Group-wise round-to-nearest weight quantization with optional activation-aware scaling.

Groups run along the last axis of each tensor: every row of ``group_size``
consecutive entries shares one float32 scale (and one zero point in
asymmetric mode). The activation-aware variant multiplies each input channel
(column) by a scale derived from mean activation magnitude before rounding,
so channels that see large activations are represented more finely, and
divides it back out on dequantization.
"""

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import check_interval, check_positive_int
from .exceptions import FormatError
from .tensor_store import FLOAT_DTYPES, Checkpoint, Tensor, dtype_nbytes

AWQ_EPS = 1e-8
SCALES_SUFFIX = ".scales"
ZEROS_SUFFIX = ".zeros"
CHANNEL_SUFFIX = ".channel_scales"


@dataclass(frozen=True)
class QuantSpec:
    bits: int = 4
    group_size: int = 128
    symmetric: bool = True
    awq_alpha: float = 0.0

    def __post_init__(self):
        if self.bits not in (4, 8):
            raise ValueError(f"bits must be 4 or 8, got {self.bits!r}")
        check_positive_int(self.group_size, "group_size")
        check_interval(self.awq_alpha, "awq_alpha", 0.0, 1.0)

    @property
    def qmax(self):
        return 2 ** (self.bits - 1) - 1

    @property
    def code_dtype(self):
        return "int4" if self.bits == 4 else "int8"

    def to_json(self):
        return json.dumps(asdict(self), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_json(cls, text):
        return cls(**json.loads(text))


@dataclass
class QuantTensor:
    name: str
    shape: tuple
    codes: Tensor  # int4/int8 Tensor with the original logical shape
    scales: np.ndarray  # float32, (rows, groups)
    zero_points: np.ndarray = None  # float32, (rows, groups); asymmetric only
    channel_scales: np.ndarray = None  # float32, (last_dim,); activation-aware only

    @property
    def size(self):
        return math.prod(self.shape)

    @property
    def nbytes(self):
        n = self.codes.nbytes + 4 * self.scales.size
        if self.zero_points is not None:
            n += 4 * self.zero_points.size
        if self.channel_scales is not None:
            n += 4 * self.channel_scales.size
        return n


@dataclass
class QuantCheckpoint:
    qtensors: dict
    spec: QuantSpec
    metadata: dict = field(default_factory=dict)

    def names(self):
        return sorted(self.qtensors)

    def to_checkpoint(self):
        """Pack into the tensor-store container (codes plus auxiliary entries)."""
        tensors = []
        for name in self.names():
            qt = self.qtensors[name]
            lead = qt.shape[:-1] if qt.shape else ()
            tensors.append(qt.codes)
            tensors.append(
                Tensor.from_array(name + SCALES_SUFFIX, qt.scales.reshape(lead + qt.scales.shape[-1:]))
            )
            if qt.zero_points is not None:
                tensors.append(
                    Tensor.from_array(
                        name + ZEROS_SUFFIX, qt.zero_points.reshape(lead + qt.zero_points.shape[-1:])
                    )
                )
            if qt.channel_scales is not None:
                tensors.append(Tensor.from_array(name + CHANNEL_SUFFIX, qt.channel_scales))
        metadata = dict(self.metadata)
        metadata["quant_spec"] = self.spec.to_json()
        return Checkpoint.from_tensors(tensors, metadata)

    @classmethod
    def from_checkpoint(cls, ckpt):
        if "quant_spec" not in ckpt.metadata:
            raise FormatError("checkpoint has no quant_spec metadata")
        try:
            spec = QuantSpec.from_json(ckpt.metadata["quant_spec"])
        except (TypeError, ValueError) as exc:
            raise FormatError(f"bad quant_spec: {exc}") from None
        qtensors = {}
        for name, t in ckpt.tensors.items():
            if t.dtype not in ("int4", "int8"):
                continue
            if t.dtype != spec.code_dtype:
                raise FormatError(f"{name!r}: {t.dtype} codes in a {spec.bits}-bit checkpoint")
            try:
                scales = ckpt.tensors[name + SCALES_SUFFIX].numpy()
            except KeyError:
                raise FormatError(f"{name!r}: missing {name + SCALES_SUFFIX}") from None
            rows = _rows_cols(t.shape)[0]
            zeros = ckpt.tensors.get(name + ZEROS_SUFFIX)
            chan = ckpt.tensors.get(name + CHANNEL_SUFFIX)
            qtensors[name] = QuantTensor(
                name,
                t.shape,
                t,
                np.array(scales, dtype=np.float32).reshape(rows, -1),
                None if zeros is None else np.array(zeros.numpy(), dtype=np.float32).reshape(rows, -1),
                None if chan is None else np.array(chan.numpy(), dtype=np.float32).ravel(),
            )
        metadata = {k: v for k, v in ckpt.metadata.items() if k != "quant_spec"}
        return cls(qtensors, spec, metadata)


@dataclass(frozen=True)
class FootprintReport:
    bytes_total: int
    bytes_by_tensor: dict
    ratio_vs_float16: float
    elements: int

    def to_dict(self):
        return asdict(self)


def _rows_cols(shape):
    if not shape:
        return 1, 1
    return math.prod(shape[:-1]), shape[-1]


def round_half_away(x):
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def _grouped(w, group_size):
    """Zero-pad ``(rows, cols)`` to ``(rows, groups, group_size)``."""
    rows, cols = w.shape
    groups = -(-cols // group_size)
    padded = np.zeros((rows, groups * group_size), dtype=np.float64)
    padded[:, :cols] = w
    return padded.reshape(rows, groups, group_size)


def quantize_matrix(w, spec):
    """Quantize a 2-D float array; returns ``(codes, scales, zero_points)``.

    Padding with zeros is harmless: it never raises a group's max magnitude,
    and the asymmetric range always includes zero.
    """
    rows, cols = w.shape
    g = _grouped(np.asarray(w, dtype=np.float64), spec.group_size)
    if spec.symmetric:
        maxabs = np.abs(g).max(axis=-1) if g.size else np.zeros(g.shape[:2])
        scales = (maxabs / spec.qmax).astype(np.float32)
        scales[maxabs == 0] = 1.0
        s = scales.astype(np.float64)[..., None]
        codes = np.clip(round_half_away(g / s), -spec.qmax, spec.qmax)
        zeros = None
    else:
        levels = 2**spec.bits - 1
        lo = np.minimum(g.min(axis=-1), 0.0) if g.size else np.zeros(g.shape[:2])
        hi = np.maximum(g.max(axis=-1), 0.0) if g.size else np.zeros(g.shape[:2])
        scales = ((hi - lo) / levels).astype(np.float32)
        scales[hi == lo] = 1.0
        s = scales.astype(np.float64)
        zp = np.clip(round_half_away(-lo / s), 0, levels)
        q = np.clip(round_half_away(g / s[..., None]) + zp[..., None], 0, levels)
        offset = 2 ** (spec.bits - 1)
        codes = q - offset
        # dequantization is (code + zero_point) * scale
        zeros = (offset - zp).astype(np.float32)
    codes = codes.reshape(rows, -1)[:, :cols].astype(np.int8)
    return codes, scales, zeros


def dequantize_matrix(codes, scales, zero_points, group_size):
    rows, cols = codes.shape
    c = _grouped(codes.astype(np.float64), group_size)
    if zero_points is not None:
        c = c + zero_points.astype(np.float64)[..., None]
    w = c * scales.astype(np.float64)[..., None]
    return w.reshape(rows, -1)[:, :cols]


def _float_matrix(t):
    if t.dtype not in FLOAT_DTYPES:
        raise FormatError(f"tensor {t.name!r}: cannot quantize dtype {t.dtype}")
    return t.numpy().astype(np.float64).reshape(_rows_cols(t.shape))


def _quantize_tensor(t, spec, channel_scales=None):
    w = _float_matrix(t)
    if channel_scales is not None:
        w = w * channel_scales.astype(np.float64)
    codes, scales, zeros = quantize_matrix(w, spec)
    code_tensor = Tensor.from_array(t.name, codes.reshape(t.shape), spec.code_dtype)
    return QuantTensor(t.name, t.shape, code_tensor, scales, zeros, channel_scales)


def rtn_quantize(ckpt, spec):
    """Round-to-nearest quantization of every tensor in ``ckpt``."""
    if spec.awq_alpha != 0:
        raise ValueError("rtn_quantize needs awq_alpha == 0; use awq_quantize")
    q = {name: _quantize_tensor(ckpt.tensors[name], spec) for name in ckpt.names()}
    return QuantCheckpoint(q, spec, dict(ckpt.metadata))


def awq_scales(stats, alpha):
    """Per-channel scales ``max(stat, eps)**alpha`` normalized to unit geometric mean."""
    alpha = check_interval(alpha, "alpha", 0.0, 1.0)
    stats = np.asarray(stats, dtype=np.float64)
    if np.any(stats < 0) or not np.all(np.isfinite(stats)):
        raise ValueError("activation statistics must be finite and non-negative")
    s = np.maximum(stats, AWQ_EPS) ** alpha
    if s.size == 0:
        return s
    return s / np.exp(np.mean(np.log(s)))


def activation_stats(activations):
    """Mean absolute activation per input channel (last axis)."""
    x = np.asarray(activations, dtype=np.float64)
    return np.abs(x).reshape(-1, x.shape[-1]).mean(axis=0)


def _channel_scales(ckpt, stats, alpha):
    out = {}
    for name in ckpt.names():
        if name not in stats:
            raise ValueError(f"no activation statistics for tensor {name!r}")
        cols = _rows_cols(ckpt.tensors[name].shape)[1]
        vec = np.asarray(stats[name], dtype=np.float64).ravel()
        if vec.size != cols:
            raise ValueError(f"tensor {name!r}: {vec.size} statistics for {cols} input channels")
        out[name] = awq_scales(vec, alpha).astype(np.float32)
    return out


def awq_quantize(ckpt, stats, spec):
    """Activation-aware quantization: scale columns by :func:`awq_scales`, then RTN."""
    if spec.awq_alpha <= 0:
        raise ValueError("awq_quantize needs awq_alpha > 0")
    scales = _channel_scales(ckpt, stats, spec.awq_alpha)
    q = {name: _quantize_tensor(ckpt.tensors[name], spec, scales[name]) for name in ckpt.names()}
    return QuantCheckpoint(q, spec, dict(ckpt.metadata))


def _check_qtensor(qt, spec):
    rows, cols = _rows_cols(qt.shape)
    groups = -(-cols // spec.group_size)
    if qt.codes.dtype != spec.code_dtype or qt.codes.shape != tuple(qt.shape):
        raise FormatError(f"{qt.name!r}: code tensor does not match shape {list(qt.shape)}")
    if qt.codes.nbytes != dtype_nbytes(spec.code_dtype, qt.size):
        raise FormatError(f"{qt.name!r}: corrupt code length")
    if qt.scales.shape != (rows, groups):
        raise FormatError(f"{qt.name!r}: expected {rows}x{groups} scales, got {qt.scales.shape}")
    if spec.symmetric != (qt.zero_points is None):
        raise FormatError(f"{qt.name!r}: zero points present iff asymmetric")
    if qt.zero_points is not None and qt.zero_points.shape != qt.scales.shape:
        raise FormatError(f"{qt.name!r}: zero point count differs from scale count")
    if qt.channel_scales is not None and qt.channel_scales.shape != (cols,):
        raise FormatError(f"{qt.name!r}: expected {cols} channel scales")


def dequantize_tensor(qt, spec):
    _check_qtensor(qt, spec)
    rows, cols = _rows_cols(qt.shape)
    codes = qt.codes.numpy().reshape(rows, cols)
    w = dequantize_matrix(codes, qt.scales, qt.zero_points, spec.group_size)
    if qt.channel_scales is not None:
        w = w / qt.channel_scales.astype(np.float64)
    return w.reshape(qt.shape)


def dequantize(q):
    """Reconstruct a float32 checkpoint from quantized codes."""
    arrays = {name: dequantize_tensor(q.qtensors[name], q.spec) for name in q.names()}
    return Checkpoint.from_arrays(arrays, q.metadata, dtype="float32")


def footprint_report(x):
    """Payload bytes (header excluded) of a checkpoint or quantized checkpoint."""
    if isinstance(x, Checkpoint) and "quant_spec" in x.metadata:
        x = QuantCheckpoint.from_checkpoint(x)
    if isinstance(x, QuantCheckpoint):
        by_tensor = {name: x.qtensors[name].nbytes for name in x.names()}
        elements = sum(x.qtensors[name].size for name in x.names())
    else:
        by_tensor = {name: x.tensors[name].nbytes for name in x.names()}
        elements = sum(x.tensors[name].size for name in x.names())
    total = sum(by_tensor.values())
    ratio = total / (2 * elements) if elements else 0.0
    return FootprintReport(total, by_tensor, ratio, elements)


class WeightQuantizer(TransformerMixin, BaseEstimator):
    """Estimator wrapper: ``fit`` derives activation-aware channel scales, ``transform`` quantizes.

    With ``awq_alpha == 0`` fitting needs no statistics and the transform is plain RTN.
    """

    def __init__(self, bits=4, group_size=128, symmetric=True, awq_alpha=0.0):
        self.bits = bits
        self.group_size = group_size
        self.symmetric = symmetric
        self.awq_alpha = awq_alpha

    def fit(self, X, y=None, act_stats=None):
        self.spec_ = QuantSpec(self.bits, self.group_size, self.symmetric, self.awq_alpha)
        if self.awq_alpha > 0:
            if act_stats is None:
                raise ValueError("awq_alpha > 0 needs act_stats")
            self.channel_scales_ = _channel_scales(X, act_stats, self.awq_alpha)
        else:
            self.channel_scales_ = {}
        return self

    def transform(self, X):
        check_is_fitted(self, "spec_")
        q = {}
        for name in X.names():
            chan = self.channel_scales_.get(name) if self.awq_alpha > 0 else None
            if self.awq_alpha > 0 and chan is None:
                raise ValueError(f"no fitted channel scales for tensor {name!r}")
            q[name] = _quantize_tensor(X.tensors[name], self.spec_, chan)
        return QuantCheckpoint(q, self.spec_, dict(X.metadata))

    def fit_transform(self, X, y=None, act_stats=None):
        return self.fit(X, act_stats=act_stats).transform(X)

    def inverse_transform(self, X):
        return dequantize(X)
