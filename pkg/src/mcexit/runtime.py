"""Deterministic single-sample tensor runtime.

Executes layer chains on float32 arrays, optionally passing weights and
activations through a saturating fixed-point quantizer to mimic a
narrow hardware datapath. Also owns weight initialization and the
manifest-plus-blob weights file format.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Iterable, Mapping

import numpy as np

from . import netspec
from .dropout import derive_seed
from .netspec import LayerSpec, ShapeMismatchError

ALLOWED_TOTAL_BITS = (4, 6, 8, 16)
QUANT_MODES = ("round_to_nearest_even", "truncate")

WeightStore = dict[str, dict[str, np.ndarray]]


@dataclass(frozen=True)
class QFormat:
    """Signed fixed-point format: total_bits wide with integer_bits of
    integer range (sign included), the rest fractional."""

    total_bits: int
    integer_bits: int
    mode: str = "round_to_nearest_even"
    saturating: bool = True

    def __post_init__(self) -> None:
        if self.total_bits not in ALLOWED_TOTAL_BITS:
            raise ValueError(f"total_bits must be one of {ALLOWED_TOTAL_BITS}")
        if not 1 <= self.integer_bits <= self.total_bits:
            raise ValueError("integer_bits must lie in [1, total_bits]")
        if self.mode not in QUANT_MODES:
            raise ValueError(f"mode must be one of {QUANT_MODES}")

    @property
    def frac_bits(self) -> int:
        return self.total_bits - self.integer_bits

    @property
    def step(self) -> float:
        return 2.0 ** -self.frac_bits

    @property
    def min_value(self) -> float:
        return -(2.0 ** (self.integer_bits - 1))

    @property
    def max_value(self) -> float:
        return (2 ** (self.total_bits - 1) - 1) * self.step

    def to_dict(self) -> dict[str, Any]:
        return {
            "total_bits": self.total_bits,
            "integer_bits": self.integer_bits,
            "mode": self.mode,
            "saturating": self.saturating,
        }

    @classmethod
    def from_dict(cls, doc: Mapping[str, Any]) -> "QFormat":
        unknown = set(doc) - {"total_bits", "integer_bits", "mode", "saturating"}
        if unknown:
            raise ValueError(f"unknown qformat keys: {sorted(unknown)}")
        return cls(**dict(doc))


def quantize(x: np.ndarray | float, q: QFormat) -> np.ndarray | float:
    """Snap values onto the fixed-point grid of q.

    Round-to-nearest-even or truncation toward negative infinity, then
    saturation at the representable range (or two's-complement wraparound
    when saturating is off). Idempotent: grid values map to themselves.
    """
    arr = np.asarray(x, dtype=np.float64 if not isinstance(x, np.ndarray) else None)
    scalar = arr.ndim == 0
    step = arr.dtype.type(q.step)
    codes = arr / step
    if q.mode == "round_to_nearest_even":
        codes = np.rint(codes)
    else:
        codes = np.floor(codes)
    lo, hi = -(2 ** (q.total_bits - 1)), 2 ** (q.total_bits - 1) - 1
    if q.saturating:
        codes = np.clip(codes, lo, hi)
    else:
        codes = np.mod(codes - lo, 2**q.total_bits) + lo
    out = np.asarray(codes * step, dtype=arr.dtype)
    return out.item() if scalar else out


class FlopCounter:
    """Mutable tally of the multiply-accumulate work actually executed."""

    def __init__(self) -> None:
        self.total = 0

    def add(self, flops: int) -> None:
        self.total += int(flops)


# --------------------------------------------------------------------------
# layer execution


def _conv2d(x: np.ndarray, w: np.ndarray, b: np.ndarray, stride: int, padding: int) -> np.ndarray:
    cin, h, wi = x.shape
    cout, _, kh, kw = w.shape
    if padding:
        x = np.pad(x, ((0, 0), (padding, padding), (padding, padding)))
    hout = (h + 2 * padding - kh) // stride + 1
    wout = (wi + 2 * padding - kw) // stride + 1
    acc = np.zeros((cout, hout, wout), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            patch = x[:, i : i + stride * hout : stride, j : j + stride * wout : stride]
            acc += np.tensordot(w[:, :, i, j], patch, axes=(1, 0))
    return acc + b[:, None, None]


def _pool(x: np.ndarray, layer: LayerSpec) -> np.ndarray:
    stride = layer.params["stride"]
    win = netspec._pool_window(layer, x.shape)
    if x.ndim == 1:
        n = (x.shape[0] - win[0]) // stride + 1
        idx = np.arange(n)[:, None] * stride + np.arange(win[0])[None, :]
        windows = x[idx]
        return windows.max(axis=1) if layer.kind == "max_pool" else windows.mean(
            axis=1, dtype=x.dtype
        )
    c, h, w = x.shape
    hout = (h - win[0]) // stride + 1
    wout = (w - win[1]) // stride + 1
    stacked = np.stack(
        [
            x[:, i : i + stride * hout : stride, j : j + stride * wout : stride]
            for i in range(win[0])
            for j in range(win[1])
        ]
    )
    return stacked.max(axis=0) if layer.kind == "max_pool" else stacked.mean(
        axis=0, dtype=x.dtype
    )


def softmax(x: np.ndarray) -> np.ndarray:
    e = np.exp(x - x.max())
    return e / e.sum(dtype=x.dtype)


def forward(
    layer: LayerSpec,
    x: np.ndarray,
    weights: WeightStore | None = None,
    qformat: QFormat | None = None,
    flop_counter: FlopCounter | None = None,
) -> np.ndarray:
    """Run one layer on a single unbatched sample.

    With a qformat, weights are quantized before use and the output
    activation is quantized afterward; softmax outputs are exempt so
    probability vectors keep summing to one. dropout_point layers are an
    identity here; their stochastic realization belongs to the caller.
    """
    x = np.asarray(x)
    netspec.output_shape(layer, x.shape)  # shape check, raises with layer id
    if flop_counter is not None:
        flop_counter.add(netspec.flops_of(layer, x.shape))
    kind = layer.kind
    if kind in ("dense", "conv2d"):
        if weights is None or layer.id not in weights:
            raise KeyError(f"no weights for layer {layer.id!r}")
        w = weights[layer.id]["weights"]
        b = weights[layer.id]["bias"]
        if qformat is not None:
            w = quantize(w, qformat)
            b = quantize(b, qformat)
        if kind == "dense":
            if w.shape != (layer.params["out_features"], layer.params["in_features"]):
                raise ShapeMismatchError(
                    f"layer {layer.id!r}: weight shape {w.shape} does not match params"
                )
            out = w @ x + b
        else:
            p = layer.params
            expected = (p["out_channels"], p["in_channels"], p["kernel_h"], p["kernel_w"])
            if w.shape != expected:
                raise ShapeMismatchError(
                    f"layer {layer.id!r}: weight shape {w.shape} does not match params"
                )
            out = _conv2d(x, w, b, p["stride"], p["padding"])
    elif kind in ("max_pool", "avg_pool"):
        out = _pool(x, layer)
    elif kind == "relu":
        out = np.maximum(x, x.dtype.type(0))
    elif kind == "softmax":
        return softmax(x)
    elif kind == "flatten":
        out = x.reshape(-1)
    else:  # dropout_point
        out = x
    if qformat is not None and kind != "dropout_point":
        out = quantize(out, qformat)
    return out


def run_layers(
    layers: Iterable[LayerSpec],
    x: np.ndarray,
    weights: WeightStore | None = None,
    qformat: QFormat | None = None,
    flop_counter: FlopCounter | None = None,
) -> np.ndarray:
    for layer in layers:
        x = forward(layer, x, weights, qformat, flop_counter)
    return x


# --------------------------------------------------------------------------
# weight initialization and channel slicing


def _fans(layer: LayerSpec) -> tuple[int, int]:
    if layer.kind == "dense":
        return layer.params["in_features"], layer.params["out_features"]
    p = layer.params
    rf = p["kernel_h"] * p["kernel_w"]
    return p["in_channels"] * rf, p["out_channels"] * rf


def _weight_shape(layer: LayerSpec) -> tuple[int, ...]:
    if layer.kind == "dense":
        return (layer.params["out_features"], layer.params["in_features"])
    p = layer.params
    return (p["out_channels"], p["in_channels"], p["kernel_h"], p["kernel_w"])


def init_weights(layers: Iterable[LayerSpec], seed: int) -> WeightStore:
    """Uniform(-a, a) init with a = sqrt(6 / (fan_in + fan_out)), float32.

    Each layer draws from its own stream keyed by (seed, layer id), so
    the values do not depend on enumeration order.
    """
    store: WeightStore = {}
    for layer in layers:
        if layer.kind not in netspec.LEARNABLE_KINDS:
            continue
        fan_in, fan_out = _fans(layer)
        bound = math.sqrt(6.0 / (fan_in + fan_out))
        gen = np.random.Generator(np.random.Philox(key=derive_seed(seed, "init", layer.id)))
        w = gen.uniform(-bound, bound, size=_weight_shape(layer)).astype(np.float32)
        b = np.zeros(_weight_shape(layer)[0], dtype=np.float32)
        store[layer.id] = {"weights": w, "bias": b}
    return store


def zero_weights(layers: Iterable[LayerSpec]) -> WeightStore:
    store: WeightStore = {}
    for layer in layers:
        if layer.kind not in netspec.LEARNABLE_KINDS:
            continue
        store[layer.id] = {
            "weights": np.zeros(_weight_shape(layer), dtype=np.float32),
            "bias": np.zeros(_weight_shape(layer)[0], dtype=np.float32),
        }
    return store


def slice_weights(
    store: WeightStore, old_layers: Iterable[LayerSpec], new_layers: Iterable[LayerSpec]
) -> WeightStore:
    """Adapt trained weights to a channel-scaled twin of the same network
    by keeping the leading channels/features of every tensor."""
    out: WeightStore = {}
    for old, new in zip(old_layers, new_layers):
        if old.id != new.id or old.kind != new.kind:
            raise ValueError(f"layer mismatch: {old.id!r}/{old.kind} vs {new.id!r}/{new.kind}")
        if new.kind not in netspec.LEARNABLE_KINDS:
            continue
        w = store[old.id]["weights"]
        b = store[old.id]["bias"]
        shape = _weight_shape(new)
        if new.kind == "dense":
            out[new.id] = {
                "weights": np.ascontiguousarray(w[: shape[0], : shape[1]]),
                "bias": np.ascontiguousarray(b[: shape[0]]),
            }
        else:
            out[new.id] = {
                "weights": np.ascontiguousarray(w[: shape[0], : shape[1], :, :]),
                "bias": np.ascontiguousarray(b[: shape[0]]),
            }
    return out


def quantize_store(store: WeightStore, q: QFormat) -> WeightStore:
    return {
        lid: {name: np.asarray(quantize(t, q)) for name, t in tensors.items()}
        for lid, tensors in store.items()
    }


# --------------------------------------------------------------------------
# weights file format: JSON manifest plus little-endian float32 blob


def save_weights(store: WeightStore, manifest_path: str | Path) -> None:
    """Write a manifest listing every tensor and one concatenated blob of
    little-endian float32 data, row-major, in manifest order."""
    manifest_path = Path(manifest_path)
    blob_path = manifest_path.with_suffix(".bin")
    tensors = []
    chunks = []
    offset = 0
    for layer_id, named in store.items():
        for name, arr in named.items():
            data = np.ascontiguousarray(arr, dtype="<f4").tobytes()
            tensors.append(
                {
                    "layer_id": layer_id,
                    "tensor_name": name,
                    "shape": list(arr.shape),
                    "dtype": "f32le",
                    "offset": offset,
                    "length": len(data),
                }
            )
            chunks.append(data)
            offset += len(data)
    manifest = {"format": "weights", "version": 1, "blob": blob_path.name, "tensors": tensors}
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    blob_path.write_bytes(b"".join(chunks))


def load_weights(manifest_path: str | Path) -> WeightStore:
    """Read a manifest+blob pair back; rejects offset or length mismatches."""
    manifest_path = Path(manifest_path)
    manifest = json.loads(manifest_path.read_text())
    unknown = set(manifest) - {"format", "version", "blob", "tensors"}
    if unknown:
        raise ValueError(f"unknown manifest keys: {sorted(unknown)}")
    blob = (manifest_path.parent / manifest["blob"]).read_bytes()
    store: WeightStore = {}
    expected_offset = 0
    for entry in manifest["tensors"]:
        if entry["dtype"] != "f32le":
            raise ValueError(f"unsupported dtype {entry['dtype']!r}")
        shape = tuple(entry["shape"])
        length = int(entry["length"])
        offset = int(entry["offset"])
        if offset != expected_offset:
            raise ValueError(
                f"tensor {entry['layer_id']}/{entry['tensor_name']}: offset {offset} "
                f"does not continue the previous tensor at {expected_offset}"
            )
        if length != 4 * math.prod(shape):
            raise ValueError(
                f"tensor {entry['layer_id']}/{entry['tensor_name']}: length {length} "
                f"does not match shape {shape}"
            )
        if offset + length > len(blob):
            raise ValueError("manifest addresses bytes beyond the end of the blob")
        arr = np.frombuffer(blob[offset : offset + length], dtype="<f4").reshape(shape)
        store.setdefault(entry["layer_id"], {})[entry["tensor_name"]] = arr.astype(
            np.float32, copy=True
        )
        expected_offset = offset + length
    if expected_offset != len(blob):
        raise ValueError(
            f"blob holds {len(blob)} bytes but the manifest accounts for {expected_offset}"
        )
    return store
