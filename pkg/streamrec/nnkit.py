"""Dense numeric kernel: MLPs with explicit tapes, losses, Adam, gradient checks.

Matrices are plain 2-D float64 numpy arrays. Every trainable model in the
package exposes its parameters as an ordered ``Dict[str, FloatArray]``
whose arrays are updated in place by :func:`adam_step`, so views such as
:class:`MlpParams` keep pointing at live weights.
"""
import logging
import math
import os
from dataclasses import dataclass
from dataclasses import field
from typing import TYPE_CHECKING
from typing import Any
from typing import Callable
from typing import Dict
from typing import List
from typing import Mapping
from typing import Optional
from typing import Sequence
from typing import Tuple
from typing import Union

import numpy as np
import numpy.typing as npt
import yaml

from streamrec import _codec
from streamrec.core import FloatArray
from streamrec.errors import FormatError
from streamrec.errors import NumericFailure
from streamrec.errors import ShapeMismatch

if TYPE_CHECKING:  # pragma: no cover
    _Path = Union[str, "os.PathLike[str]"]

logger = logging.getLogger("streamrec")

Matrix = FloatArray
Params = Dict[str, FloatArray]

ACTIVATIONS = ("relu", "identity", "sigmoid")
LOG_EPS = 1e-7


def as_matrix(
    x: npt.ArrayLike, cols: Optional[int] = None, *, name: str = "x"
) -> Matrix:
    mat = np.asarray(x, dtype=np.float64)
    if mat.ndim == 1:
        mat = mat.reshape(1, -1)
    if mat.ndim != 2:
        raise ShapeMismatch(f"{name} must be 2-D, got shape {mat.shape}")
    if cols is not None and mat.shape[1] != cols:
        raise ShapeMismatch(f"{name} has {mat.shape[1]} columns, expected {cols}")
    return mat


def ensure_finite(value: Union[float, FloatArray], what: str) -> None:
    if not np.all(np.isfinite(value)):
        raise NumericFailure(f"Non-finite value detected in {what}")


def sigmoid(z: npt.ArrayLike) -> FloatArray:
    z = np.asarray(z, dtype=np.float64)
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def softmax(
    z: FloatArray, axis: int = -1, mask: Optional[npt.NDArray[np.bool_]] = None
) -> FloatArray:
    """Max-subtracted softmax; fully masked rows come back as zeros."""
    if mask is None:
        shifted = z - np.max(z, axis=axis, keepdims=True)
        e = np.exp(shifted)
        return e / np.sum(e, axis=axis, keepdims=True)
    top = np.max(np.where(mask, z, -np.inf), axis=axis, keepdims=True)
    top = np.where(np.isfinite(top), top, 0.0)
    e = np.exp(np.where(mask, z - top, -np.inf))
    total = np.sum(e, axis=axis, keepdims=True)
    return e / np.where(total > 0, total, 1.0)


def log_softmax(z: FloatArray, axis: int = -1) -> FloatArray:
    shifted = z - np.max(z, axis=axis, keepdims=True)
    return shifted - np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))


def binary_cross_entropy(
    preds: FloatArray, labels: FloatArray, eps: float = LOG_EPS
) -> Tuple[float, FloatArray]:
    """Summed-over-columns, batch-averaged binary cross entropy.

    Predictions are clamped to ``[eps, 1 - eps]``; the returned gradient is
    zero where clamping is active, matching the clamped loss exactly.
    """
    p = np.asarray(preds, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    if p.shape != y.shape:
        raise ShapeMismatch(f"Predictions {p.shape} and labels {y.shape} differ")
    batch = p.shape[0] if p.ndim else 1
    pc = np.clip(p, eps, 1.0 - eps)
    loss = -float(np.sum(y * np.log(pc) + (1.0 - y) * np.log(1.0 - pc))) / batch
    inside = (p > eps) & (p < 1.0 - eps)
    grad = np.where(inside, (-y / pc + (1.0 - y) / (1.0 - pc)) / batch, 0.0)
    return loss, grad


# multilayer perceptrons


@dataclass
class Layer:
    weight: Matrix  # (in, out)
    bias: FloatArray  # (out,)
    activation: str


class MlpParams:
    """Stack of dense layers ``y = act(x @ W + b)``."""

    def __init__(self, layers: Sequence[Layer]) -> None:
        if not layers:
            raise ShapeMismatch("An MLP needs at least one layer")
        for i, layer in enumerate(layers):
            if layer.activation not in ACTIVATIONS:
                raise ValueError(f"Unknown activation {layer.activation!r}")
            if layer.bias.shape != (layer.weight.shape[1],):
                raise ShapeMismatch(f"Layer {i} bias does not match its weight")
            if i and layers[i - 1].weight.shape[1] != layer.weight.shape[0]:
                raise ShapeMismatch(
                    f"Layer {i} expects {layer.weight.shape[0]} inputs, "
                    f"previous layer emits {layers[i - 1].weight.shape[1]}"
                )
        self.layers: List[Layer] = list(layers)

    @classmethod
    def init(
        cls,
        sizes: Sequence[int],
        activations: Sequence[str],
        gen: np.random.Generator,
    ) -> "MlpParams":
        """Kaiming-uniform weights for relu layers, Xavier-uniform otherwise."""
        if len(sizes) != len(activations) + 1:
            raise ShapeMismatch("Need one activation per layer")
        layers = []
        for fan_in, fan_out, act in zip(sizes[:-1], sizes[1:], activations):
            if act == "relu":
                bound = math.sqrt(6.0 / fan_in)
            else:
                bound = math.sqrt(6.0 / (fan_in + fan_out))
            weight = gen.uniform(-bound, bound, size=(fan_in, fan_out))
            layers.append(Layer(weight, np.zeros(fan_out), act))
        return cls(layers)

    @classmethod
    def from_tensors(
        cls, tensors: Mapping[str, FloatArray], prefix: str, activations: Sequence[str]
    ) -> "MlpParams":
        layers = []
        for i, act in enumerate(activations):
            weight = tensors[f"{prefix}.{i}.weight"]
            bias = tensors[f"{prefix}.{i}.bias"].reshape(-1)
            layers.append(Layer(weight, bias, act))
        return cls(layers)

    @property
    def in_dim(self) -> int:
        return int(self.layers[0].weight.shape[0])

    @property
    def out_dim(self) -> int:
        return int(self.layers[-1].weight.shape[1])

    @property
    def activations(self) -> List[str]:
        return [layer.activation for layer in self.layers]

    @property
    def signature(self) -> str:
        dims = [self.in_dim] + [int(layer.weight.shape[1]) for layer in self.layers]
        return "->".join(str(d) for d in dims)

    def named_tensors(self, prefix: str) -> Params:
        out: Params = {}
        for i, layer in enumerate(self.layers):
            out[f"{prefix}.{i}.weight"] = layer.weight
            out[f"{prefix}.{i}.bias"] = layer.bias
        return out


@dataclass
class Tape:
    params: MlpParams
    inputs: List[Matrix] = field(default_factory=list)
    outputs: List[Matrix] = field(default_factory=list)


def _activate(z: Matrix, activation: str) -> Matrix:
    if activation == "relu":
        return np.maximum(z, 0.0)
    if activation == "sigmoid":
        return sigmoid(z)
    return z


def mlp_forward(p: MlpParams, x: npt.ArrayLike) -> Tuple[Matrix, Tape]:
    h = as_matrix(x, p.in_dim)
    tape = Tape(p)
    for layer in p.layers:
        tape.inputs.append(h)
        h = _activate(h @ layer.weight + layer.bias, layer.activation)
        tape.outputs.append(h)
    return h, tape


def mlp_backward(tape: Tape, grad_out: npt.ArrayLike) -> Tuple[MlpParams, Matrix]:
    """Reverse pass over ``tape``.

    Returns
    -------
    grads : MlpParams
        Gradients laid out like the parameters.
    grad_x : Matrix
        Gradient with respect to the forward input.

    """
    params = tape.params
    if not tape.outputs:
        raise ShapeMismatch("Tape holds no forward pass")
    g = as_matrix(grad_out, params.out_dim, name="grad_out")
    if g.shape[0] != tape.outputs[-1].shape[0]:
        raise ShapeMismatch(
            f"grad_out has {g.shape[0]} rows, "
            f"forward batch had {tape.outputs[-1].shape[0]}"
        )
    grads: List[Layer] = []
    for layer, x, y in zip(
        reversed(params.layers), reversed(tape.inputs), reversed(tape.outputs)
    ):
        if layer.activation == "relu":
            g = g * (y > 0.0)
        elif layer.activation == "sigmoid":
            g = g * y * (1.0 - y)
        grads.append(Layer(x.T @ g, g.sum(axis=0), layer.activation))
        g = g @ layer.weight.T
    grads.reverse()
    return MlpParams(grads), g


# embedding tables


def gather_rows(table: Matrix, ids: npt.ArrayLike) -> Matrix:
    return table[np.asarray(ids, dtype=np.int64)]


def scatter_rows(
    shape: Tuple[int, int], ids: npt.ArrayLike, grad_rows: Matrix
) -> Matrix:
    """Dense gradient of a row gather: repeated ids accumulate."""
    out = np.zeros(shape)
    np.add.at(out, np.asarray(ids, dtype=np.int64), grad_rows)
    return out


# optimisation


@dataclass
class AdamState:
    m: Params
    v: Params
    step: int = 0

    @classmethod
    def zeros(cls, params: Mapping[str, FloatArray]) -> "AdamState":
        return cls(
            {k: np.zeros_like(p) for k, p in params.items()},
            {k: np.zeros_like(p) for k, p in params.items()},
        )


def adam_step(
    params: Params,
    grads: Mapping[str, FloatArray],
    state: AdamState,
    lr: float = 1e-3,
    betas: Tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
) -> Tuple[Params, AdamState]:
    """One bias-corrected Adam update, applied to ``params`` in place."""
    if set(grads) != set(params):
        raise ShapeMismatch(
            f"Gradient names {sorted(set(grads) ^ set(params))} do not match parameters"
        )
    beta1, beta2 = betas
    state.step += 1
    correction1 = 1.0 - beta1 ** state.step
    correction2 = 1.0 - beta2 ** state.step
    for name, value in params.items():
        g = grads[name]
        if g.shape != value.shape:
            raise ShapeMismatch(
                f"Gradient for {name} has shape {g.shape}, parameter has {value.shape}"
            )
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        value -= lr * (m / correction1) / (np.sqrt(v / correction2) + eps)
    return params, state


def grad_check(
    f: Callable[[Params], Tuple[float, Mapping[str, FloatArray]]],
    params: Params,
    h: float = 1e-5,
    *,
    floor: float = 1e-12,
    max_entries: Optional[int] = None,
    gen: Optional[np.random.Generator] = None,
) -> float:
    """Compare analytic gradients with central differences.

    ``f`` maps the parameter dict to ``(loss, grads)``. Each checked entry
    is perturbed in place and restored. The score for one entry is
    ``|analytic - numeric| / max(floor, |analytic| + |numeric|)``; the
    maximum over all checked entries is returned. ``max_entries`` limits
    the number of entries per tensor, sampled with ``gen``.
    """
    _, analytic = f(params)
    worst = 0.0
    for name, value in params.items():
        flat = value.reshape(-1)
        positions = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            picker = gen if gen is not None else np.random.default_rng(0)
            chosen = picker.choice(flat.size, size=max_entries, replace=False)
            positions = np.sort(chosen)
        grad = np.asarray(analytic[name]).reshape(-1)
        for pos in positions:
            original = flat[pos]
            flat[pos] = original + h
            plus, _ = f(params)
            flat[pos] = original - h
            minus, _ = f(params)
            flat[pos] = original
            numeric = (plus - minus) / (2.0 * h)
            a = float(grad[pos])
            err = abs(a - numeric) / max(floor, abs(a) + abs(numeric))
            worst = max(worst, err)
    return worst


# checkpoints


@dataclass
class Checkpoint:
    kind: str
    tensors: Params
    metadata: Dict[str, Any] = field(default_factory=dict)

    @property
    def trained(self) -> bool:
        return bool(self.metadata.get("trained", False))


def _plain(value: Any) -> Any:
    if isinstance(value, dict):
        return {str(k): _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, np.ndarray):
        return value.tolist()
    return value


def save_checkpoint(stem: "_Path", checkpoint: Checkpoint) -> None:
    """Write ``<stem>.bin`` (named tensors) and ``<stem>.yaml`` (manifest)."""
    stem = os.fspath(stem)
    manifest = {
        "kind": checkpoint.kind,
        "tensors": [
            {"name": name, "shape": list(value.shape)}
            for name, value in checkpoint.tensors.items()
        ],
        "metadata": _plain(checkpoint.metadata),
    }
    with open(stem + ".bin", "wb") as fh:
        fh.write(_codec.encode_tensors(checkpoint.tensors))
    with open(stem + ".yaml", "w", encoding="utf-8") as fh:
        yaml.safe_dump(manifest, fh, sort_keys=False)
    logger.debug("checkpoint.saved", extra={"path": stem, "kind": checkpoint.kind})


def load_checkpoint(stem: "_Path") -> Checkpoint:
    stem = os.fspath(stem)
    with open(stem + ".yaml", encoding="utf-8") as fh:
        manifest = yaml.safe_load(fh)
    with open(stem + ".bin", "rb") as fh:
        raw = _codec.decode_tensors(fh.read())
    tensors: Params = {}
    for entry in manifest.get("tensors", []):
        name = entry["name"]
        if name not in raw:
            raise FormatError(f"Checkpoint {stem} lacks tensor {name!r}")
        tensors[name] = raw[name].reshape(tuple(entry["shape"])).copy()
    return Checkpoint(manifest["kind"], tensors, dict(manifest.get("metadata") or {}))


def checkpoint_exists(stem: "_Path") -> bool:
    stem = os.fspath(stem)
    return os.path.exists(stem + ".bin") and os.path.exists(stem + ".yaml")
