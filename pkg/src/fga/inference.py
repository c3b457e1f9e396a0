"""Model loading and deterministic forward evaluation with activation capture.

Models live in the FGA-MF v1 format: a JSON manifest describing the layer
graph plus a sidecar ``.bin`` blob of little-endian float32 weights (widened
to float64 on load). All evaluation is per-sample and pure, so batch results
are bit-identical to single-sample results and reproducible across runs on
the same machine.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, NamedTuple

import numpy as np

from .errors import (
    ConfigurationError,
    ContractViolation,
    DataFormatError,
    InvariantViolation,
    ModelValidationError,
    TruncationError,
)

FORMAT_NAME = "fga-mf"
FORMAT_VERSION = 1
LAYER_KINDS = ("conv2d", "relu", "maxpool2d", "flatten", "dense", "softmax")


class NeuronRef(NamedTuple):
    """One neuron, addressed by layer name and position in that layer's
    flattened (row-major) output."""

    layer: str
    index: int


@dataclass(frozen=True)
class Preprocessing:
    """Affine pixel transform (x * scale + offset) the model expects to have
    been applied to raw inputs before the first layer."""

    scale: float
    offset: float

    def apply(self, raw: np.ndarray) -> np.ndarray:
        return raw.astype(np.float64) * self.scale + self.offset


@dataclass
class LayerSpec:
    name: str
    kind: str
    params: dict
    weights: np.ndarray | None = None  # conv2d: [out,in,kh,kw]; dense: [out,in]
    bias: np.ndarray | None = None


@dataclass
class Model:
    name: str
    input_shape: tuple[int, ...]
    preprocessing: Preprocessing
    class_count: int
    layers: list[LayerSpec]
    output_shapes: dict[str, tuple[int, ...]]

    def layer(self, name: str) -> LayerSpec:
        for spec in self.layers:
            if spec.name == name:
                return spec
        raise ConfigurationError(f"model {self.name!r} has no layer named {name!r}")

    def layer_names(self) -> list[str]:
        return [spec.name for spec in self.layers]

    def flattened_size(self, layer_name: str) -> int:
        if layer_name not in self.output_shapes:
            raise ConfigurationError(
                f"model {self.name!r} has no layer named {layer_name!r}"
            )
        return int(np.prod(self.output_shapes[layer_name]))


@dataclass
class ActivationMatrix:
    """Flattened post-layer outputs, one row per sample in dataset order."""

    layer_name: str
    sample_ids: tuple[str, ...]
    values: np.ndarray  # float64 [n_samples, flattened_size]

    def __post_init__(self):
        if self.values.ndim != 2 or self.values.shape[0] != len(self.sample_ids):
            raise InvariantViolation(
                f"activation matrix for {self.layer_name!r}: "
                f"{self.values.shape} rows vs {len(self.sample_ids)} sample ids"
            )


@dataclass
class PredictionResult:
    sample_ids: tuple[str, ...]
    predicted: np.ndarray  # int64 [n]
    correct: np.ndarray  # bool [n]


def _pair(value, what: str) -> tuple[int, int]:
    if isinstance(value, int):
        return (value, value)
    if isinstance(value, (list, tuple)) and len(value) == 2:
        return (int(value[0]), int(value[1]))
    raise DataFormatError(f"{what} must be an int or a [h, w] pair, got {value!r}")


def propagate_shape(kind: str, params: dict, in_shape: tuple[int, ...]) -> tuple[int, ...]:
    """Static output shape of one layer, or ModelValidationError if the input
    shape is incompatible with the layer params."""

    if kind == "conv2d":
        if len(in_shape) != 3:
            raise ModelValidationError(f"conv2d needs a [C,H,W] input, got {in_shape}")
        c, h, w = in_shape
        kh, kw = _pair(params["kernel"], "conv2d kernel")
        sh, sw = _pair(params.get("stride", 1), "conv2d stride")
        if params.get("padding", "valid") != "valid":
            raise ModelValidationError("only 'valid' convolution padding is supported")
        if kh > h or kw > w:
            raise ModelValidationError(
                f"conv2d kernel {kh}x{kw} larger than input {h}x{w}"
            )
        return (int(params["out_channels"]), (h - kh) // sh + 1, (w - kw) // sw + 1)
    if kind == "maxpool2d":
        if len(in_shape) != 3:
            raise ModelValidationError(f"maxpool2d needs a [C,H,W] input, got {in_shape}")
        c, h, w = in_shape
        wh, ww = _pair(params["window"], "maxpool2d window")
        sh, sw = _pair(params.get("stride", params["window"]), "maxpool2d stride")
        if wh > h or ww > w:
            raise ModelValidationError(
                f"maxpool2d window {wh}x{ww} larger than input {h}x{w}"
            )
        return (c, (h - wh) // sh + 1, (w - ww) // sw + 1)
    if kind == "flatten":
        return (int(np.prod(in_shape)),)
    if kind == "dense":
        if len(in_shape) != 1:
            raise ModelValidationError(
                f"dense needs a flat input, got shape {in_shape}; add a flatten layer"
            )
        return (int(params["out_features"]),)
    if kind in ("relu", "softmax"):
        if kind == "softmax" and len(in_shape) != 1:
            raise ModelValidationError(f"softmax needs a flat input, got {in_shape}")
        return in_shape
    raise DataFormatError(f"unknown layer kind {kind!r}")


def _weight_counts(kind: str, params: dict, in_shape: tuple[int, ...]) -> tuple[int, int]:
    """(weight count, bias count) implied by the layer params."""
    if kind == "conv2d":
        kh, kw = _pair(params["kernel"], "conv2d kernel")
        out_ch = int(params["out_channels"])
        return out_ch * in_shape[0] * kh * kw, out_ch
    if kind == "dense":
        out = int(params["out_features"])
        return out * in_shape[0], out
    return 0, 0


def _take_blob(blob: np.ndarray, ref: dict, expected: int, what: str) -> np.ndarray:
    offset, count = int(ref["offset"]), int(ref["count"])
    if count != expected:
        raise ModelValidationError(
            f"{what}: manifest declares {count} values but params imply {expected}"
        )
    if offset < 0 or offset + count > blob.size:
        raise TruncationError(
            f"{what}: blob slice [{offset}, {offset + count}) exceeds blob of "
            f"{blob.size} floats"
        )
    return blob[offset : offset + count].astype(np.float64)


def load_model(path: str | Path) -> Model:
    """Load and eagerly validate an FGA-MF v1 model.

    The weight blob is expected next to the manifest with a ``.bin`` suffix.
    Weights are float32 on disk and widened to float64 here.
    """
    path = Path(path)
    try:
        manifest = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise DataFormatError(f"{path}: not valid JSON ({exc})") from exc
    if manifest.get("format") != FORMAT_NAME or manifest.get("version") != FORMAT_VERSION:
        raise DataFormatError(
            f"{path}: expected format={FORMAT_NAME!r} version={FORMAT_VERSION}, "
            f"got format={manifest.get('format')!r} version={manifest.get('version')!r}"
        )
    for key in ("name", "input_shape", "preprocessing", "class_count", "layers"):
        if key not in manifest:
            raise DataFormatError(f"{path}: manifest missing required key {key!r}")

    blob_path = path.with_suffix(".bin")
    if not blob_path.exists():
        raise DataFormatError(f"{path}: weight blob {blob_path} not found")
    blob = np.fromfile(blob_path, dtype="<f4")
    if not np.isfinite(blob).all():
        raise DataFormatError(f"{blob_path}: blob contains non-finite weights")

    prep = manifest["preprocessing"]
    preprocessing = Preprocessing(float(prep["scale"]), float(prep["offset"]))
    input_shape = tuple(int(d) for d in manifest["input_shape"])
    if not input_shape or any(d <= 0 for d in input_shape):
        raise DataFormatError(f"{path}: bad input_shape {manifest['input_shape']}")

    layers: list[LayerSpec] = []
    output_shapes: dict[str, tuple[int, ...]] = {}
    seen_names: set[str] = set()
    shape = input_shape
    for entry in manifest["layers"]:
        name, kind = entry["name"], entry["kind"]
        if name in seen_names:
            raise ModelValidationError(f"{path}: duplicate layer name {name!r}")
        seen_names.add(name)
        if kind not in LAYER_KINDS:
            raise DataFormatError(f"{path}: layer {name!r} has unknown kind {kind!r}")
        params = entry.get("params", {})
        spec = LayerSpec(name=name, kind=kind, params=params)
        w_count, b_count = _weight_counts(kind, params, shape)
        if w_count:
            flat_w = _take_blob(blob, entry["weights"], w_count, f"layer {name!r} weights")
            flat_b = _take_blob(blob, entry["bias"], b_count, f"layer {name!r} bias")
            if kind == "conv2d":
                kh, kw = _pair(params["kernel"], "conv2d kernel")
                spec.weights = flat_w.reshape(int(params["out_channels"]), shape[0], kh, kw)
            else:
                spec.weights = flat_w.reshape(int(params["out_features"]), shape[0])
            spec.bias = flat_b
        shape = propagate_shape(kind, params, shape)
        output_shapes[name] = shape
        layers.append(spec)

    if not layers:
        raise ModelValidationError(f"{path}: model has no layers")
    class_count = int(manifest["class_count"])
    if int(np.prod(shape)) != class_count:
        raise ModelValidationError(
            f"{path}: final layer outputs {int(np.prod(shape))} values, "
            f"class_count is {class_count}"
        )
    return Model(
        name=str(manifest["name"]),
        input_shape=input_shape,
        preprocessing=preprocessing,
        class_count=class_count,
        layers=layers,
        output_shapes=output_shapes,
    )


def _eval_conv2d(layer: LayerSpec, x: np.ndarray) -> np.ndarray:
    w, b = layer.weights, layer.bias
    out_ch, in_ch, kh, kw = w.shape
    sh, sw = _pair(layer.params.get("stride", 1), "conv2d stride")
    c, h, wd = x.shape
    oh, ow = (h - kh) // sh + 1, (wd - kw) // sw + 1
    s0, s1, s2 = x.strides
    windows = np.lib.stride_tricks.as_strided(
        x, (c, oh, ow, kh, kw), (s0, s1 * sh, s2 * sw, s1, s2)
    )
    col = windows.transpose(1, 2, 0, 3, 4).reshape(oh * ow, in_ch * kh * kw)
    out = col @ w.reshape(out_ch, -1).T + b
    return np.ascontiguousarray(out.reshape(oh, ow, out_ch).transpose(2, 0, 1))


def _eval_maxpool2d(layer: LayerSpec, x: np.ndarray) -> np.ndarray:
    wh, ww = _pair(layer.params["window"], "maxpool2d window")
    sh, sw = _pair(layer.params.get("stride", layer.params["window"]), "maxpool2d stride")
    c, h, wd = x.shape
    oh, ow = (h - wh) // sh + 1, (wd - ww) // sw + 1
    s0, s1, s2 = x.strides
    windows = np.lib.stride_tricks.as_strided(
        x, (c, oh, ow, wh, ww), (s0, s1 * sh, s2 * sw, s1, s2)
    )
    return windows.max(axis=(3, 4))


def _eval_softmax(layer: LayerSpec, x: np.ndarray) -> np.ndarray:
    shifted = x - x.max()
    e = np.exp(shifted)
    return e / e.sum()


_EVAL = {
    "conv2d": _eval_conv2d,
    "relu": lambda layer, x: np.maximum(x, 0.0),
    "maxpool2d": _eval_maxpool2d,
    "flatten": lambda layer, x: x.reshape(-1),
    "dense": lambda layer, x: layer.weights @ x + layer.bias,
    "softmax": _eval_softmax,
}


def eval_layer(layer: LayerSpec, x: np.ndarray) -> np.ndarray:
    """Evaluate one layer on one input tensor (float64 in, float64 out)."""
    expected = propagate_shape(layer.kind, layer.params, tuple(x.shape))
    out = _EVAL[layer.kind](layer, np.asarray(x, dtype=np.float64))
    if tuple(out.shape) != expected:
        raise InvariantViolation(
            f"layer {layer.name!r} produced shape {out.shape}, expected {expected}"
        )
    return out


def _coerce_input(model: Model, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if tuple(x.shape) == model.input_shape:
        return x
    # H x W images feed single-channel [1,H,W] models directly
    if x.ndim == 2 and model.input_shape == (1,) + tuple(x.shape):
        return x[None, :, :]
    raise ContractViolation(
        f"input shape {tuple(x.shape)} does not match model input {model.input_shape}"
    )


def forward(
    model: Model, x: np.ndarray, capture: Iterable[str] = ()
) -> tuple[np.ndarray, dict[str, np.ndarray]]:
    """Run one preprocessed input through the model.

    Returns the final layer output and, for each captured layer name, a copy
    of that layer's flattened output.
    """
    capture = set(capture)
    known = set(model.output_shapes)
    unknown = capture - known
    if unknown:
        raise ConfigurationError(
            f"capture layers {sorted(unknown)} not in model (has {sorted(known)})"
        )
    out = _coerce_input(model, x)
    captured: dict[str, np.ndarray] = {}
    for layer in model.layers:
        out = eval_layer(layer, out)
        if not np.isfinite(out).all():
            raise InvariantViolation(
                f"layer {layer.name!r} produced non-finite activations"
            )
        if layer.name in capture:
            captured[layer.name] = out.reshape(-1).copy()
    return out, captured


def predict_dataset(
    model: Model, dataset, capture: Iterable[str] = (), jobs: int = 1
) -> tuple[PredictionResult, dict[str, ActivationMatrix]]:
    """Predict every sample of a labeled dataset, capturing activations.

    Output rows follow dataset order regardless of ``jobs``; every sample is
    evaluated by the same single-sample kernel, so results do not depend on
    batching.
    """
    capture = tuple(dict.fromkeys(capture))
    samples = dataset.samples
    ids = tuple(s.id for s in samples)

    def one(i: int):
        sample = samples[i]
        try:
            scores, captured = forward(model, sample.pixels, capture)
        except (ContractViolation, InvariantViolation) as exc:
            raise type(exc)(f"sample {i} (id={sample.id!r}): {exc}") from exc
        return int(np.argmax(scores.reshape(-1))), captured

    if jobs > 1 and len(samples) > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(one, range(len(samples))))
    else:
        results = [one(i) for i in range(len(samples))]

    predicted = np.array([r[0] for r in results], dtype=np.int64)
    labels = np.array([s.class_label for s in samples], dtype=np.int64)
    correct = predicted == labels
    activations = {}
    for name in capture:
        rows = np.vstack([r[1][name] for r in results]) if results else np.empty((0, 0))
        activations[name] = ActivationMatrix(name, ids, rows)
    return PredictionResult(ids, predicted, correct), activations
