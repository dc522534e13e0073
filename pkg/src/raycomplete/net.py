"""Parameter containers, dense layers, set encoder, optimizer, checkpoints.

Parameters are held as one flat float32 vector plus a layout describing the
dense layers it packs, in order: for each layer, the (n_in, n_out) weight
matrix row-major, then the n_out bias.  Forward passes unpack the vector
into float64 graph Tensors; gradients come back as a flat float64 vector
aligned with the parameters.

Keeping the master copy in float32 makes checkpoints lossless: save and
reload restores the exact training state bit for bit, optimizer moments
included.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import EmptyInput, ParseError, ShapeMismatch

ACTIVATIONS = ("relu", "tanh", "linear")

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

CHECKPOINT_MAGIC = b"PCCK"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class LayerSpec:
    """One dense layer: activation kind plus widths."""

    kind: str
    n_in: int
    n_out: int

    def __post_init__(self):
        if self.kind not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.kind!r}")
        if self.n_in < 1 or self.n_out < 1:
            raise ValueError("layer widths must be >= 1")

    @property
    def size(self) -> int:
        return self.n_in * self.n_out + self.n_out


def layout_size(layout: tuple[LayerSpec, ...]) -> int:
    return sum(spec.size for spec in layout)


@dataclass(frozen=True)
class NetParams:
    """Flat float32 parameter vector with its layer layout and init seed."""

    values: np.ndarray
    layout: tuple[LayerSpec, ...]
    rng_seed: int

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=np.float32)
        if vals.ndim != 1 or vals.size != layout_size(self.layout):
            raise ShapeMismatch(
                f"expected {layout_size(self.layout)} values, got shape {vals.shape}"
            )
        if not np.all(np.isfinite(vals)):
            raise ValueError("parameters contain non-finite values")
        vals = vals.copy()
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)
        object.__setattr__(self, "layout", tuple(self.layout))

    @property
    def count(self) -> int:
        return int(self.values.size)


@dataclass(frozen=True)
class Gradient:
    """Flat float64 gradient aligned with a NetParams vector."""

    values: np.ndarray

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=np.float64)
        if vals.ndim != 1:
            raise ShapeMismatch("gradient must be a flat vector")
        if not np.all(np.isfinite(vals)):
            raise ValueError("gradient contains non-finite values")
        vals = vals.copy()
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)

    @property
    def norm(self) -> float:
        return float(np.linalg.norm(self.values))


def init_params(
    layout: tuple[LayerSpec, ...], rng_seed: int, zero_layers: tuple[int, ...] = ()
) -> NetParams:
    """Xavier-uniform weights, zero biases; listed layers start all-zero.

    Zeroing the final offset head makes the untrained network the identity
    "no displacement" map, a stable starting point.
    """
    rng = np.random.default_rng(rng_seed)
    chunks = []
    for i, spec in enumerate(layout):
        if i in zero_layers:
            chunks.append(np.zeros(spec.size))
            continue
        limit = np.sqrt(6.0 / (spec.n_in + spec.n_out))
        w = rng.uniform(-limit, limit, size=spec.n_in * spec.n_out)
        chunks.append(np.concatenate([w, np.zeros(spec.n_out)]))
    return NetParams(
        values=np.concatenate(chunks).astype(np.float32),
        layout=tuple(layout),
        rng_seed=rng_seed,
    )


class ParamTensors:
    """Float64 graph view of a NetParams vector, one (W, b) pair per layer.

    After a backward pass, ``flat_grad`` re-packs the accumulated per-layer
    gradients into a vector aligned with the parameter order.
    """

    def __init__(self, params: NetParams, trainable: bool = True):
        self._build(params.values.astype(np.float64), params.layout, trainable)

    @classmethod
    def from_vector(
        cls, values: np.ndarray, layout: tuple[LayerSpec, ...], trainable: bool = True
    ) -> "ParamTensors":
        """Build directly from a float64 vector, skipping float32 storage.

        Finite-difference probes need this: a perturbation of 1e-5 must not
        be re-quantized to the float32 grid on its way into the forward pass.
        """
        obj = cls.__new__(cls)
        flat = np.asarray(values, dtype=np.float64)
        if flat.ndim != 1 or flat.size != layout_size(layout):
            raise ShapeMismatch(
                f"expected {layout_size(layout)} values, got shape {flat.shape}"
            )
        obj._build(flat, tuple(layout), trainable)
        return obj

    def _build(self, flat: np.ndarray, layout: tuple[LayerSpec, ...], trainable: bool):
        self.layout = layout
        self.layers: list[tuple[ad.Tensor, ad.Tensor]] = []
        offset = 0
        make = ad.parameter if trainable else ad.constant
        for spec in layout:
            w = make(flat[offset : offset + spec.n_in * spec.n_out].reshape(spec.n_in, spec.n_out))
            offset += spec.n_in * spec.n_out
            b = make(flat[offset : offset + spec.n_out])
            offset += spec.n_out
            self.layers.append((w, b))

    def flat_grad(self) -> Gradient:
        chunks = []
        for (w, b), spec in zip(self.layers, self.layout):
            gw = w.grad if w.grad is not None else np.zeros_like(w.data)
            gb = b.grad if b.grad is not None else np.zeros_like(b.data)
            chunks.append(gw.reshape(-1))
            chunks.append(gb)
        return Gradient(np.concatenate(chunks))


def dense_forward(layer: tuple[ad.Tensor, ad.Tensor], spec: LayerSpec, x: ad.Tensor) -> ad.Tensor:
    """Affine map plus the layer's nonlinearity; input rows are samples."""
    if x.data.ndim != 2 or x.data.shape[1] != spec.n_in:
        raise ShapeMismatch(
            f"input shape {x.data.shape} does not match layer width {spec.n_in}"
        )
    w, b = layer
    out = ad.add(ad.matmul(x, w), b)
    if spec.kind == "relu":
        return ad.relu(out)
    if spec.kind == "tanh":
        return ad.tanh(out)
    return out


def stack_forward(
    tensors: ParamTensors, layer_ids: tuple[int, ...], x: ad.Tensor
) -> ad.Tensor:
    """Run x through the listed layers in order."""
    for i in layer_ids:
        x = dense_forward(tensors.layers[i], tensors.layout[i], x)
    return x


def set_encode(
    tensors: ParamTensors, layer_ids: tuple[int, ...], x: ad.Tensor
) -> tuple[ad.Tensor, ad.Tensor]:
    """Shared per-element stack, then coordinate-wise max over elements.

    Returns (global feature vector, per-element feature rows).  The max pool
    makes the global feature invariant to input row order.
    """
    if x.data.shape[0] == 0:
        raise EmptyInput("set encoder requires at least one element")
    per_elem = stack_forward(tensors, layer_ids, x)
    return ad.max_rows(per_elem), per_elem


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AdamState:
    """First and second moment vectors plus the step counter."""

    m: np.ndarray
    v: np.ndarray
    step: int

    def __post_init__(self):
        m = np.asarray(self.m, dtype=np.float32).copy()
        v = np.asarray(self.v, dtype=np.float32).copy()
        m.setflags(write=False)
        v.setflags(write=False)
        object.__setattr__(self, "m", m)
        object.__setattr__(self, "v", v)

    @staticmethod
    def fresh(count: int) -> "AdamState":
        return AdamState(m=np.zeros(count, np.float32), v=np.zeros(count, np.float32), step=0)


def clip_gradient(grad: Gradient, max_norm: float = 1.0) -> Gradient:
    """Scale the whole vector down when its L2 norm exceeds max_norm."""
    norm = grad.norm
    if norm <= max_norm or norm == 0.0:
        return grad
    return Gradient(grad.values * (max_norm / norm))


def adam_step(
    params: NetParams, grad: Gradient, lr: float, state: AdamState
) -> tuple[NetParams, AdamState]:
    """One Adam update; float64 math, float32 results, fully deterministic."""
    if not lr > 0.0:
        raise ValueError("lr must be > 0")
    if grad.values.size != params.count:
        raise ShapeMismatch("gradient length does not match parameters")
    t = state.step + 1
    g = grad.values
    m = ADAM_BETA1 * state.m.astype(np.float64) + (1.0 - ADAM_BETA1) * g
    v = ADAM_BETA2 * state.v.astype(np.float64) + (1.0 - ADAM_BETA2) * g * g
    m_hat = m / (1.0 - ADAM_BETA1**t)
    v_hat = v / (1.0 - ADAM_BETA2**t)
    new_vals = params.values.astype(np.float64) - lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS)
    new_params = NetParams(
        values=new_vals.astype(np.float32), layout=params.layout, rng_seed=params.rng_seed
    )
    new_state = AdamState(m=m.astype(np.float32), v=v.astype(np.float32), step=t)
    return new_params, new_state


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------
#
# Byte layout (all multi-byte integers and reals little-endian):
#   bytes 0..3   magic "PCCK"
#   bytes 4..7   uint32 header length H
#   bytes 8..8+H utf-8 JSON header: {"format_version": 1,
#                "layout": [[kind, n_in, n_out], ...], "rng_seed": int,
#                "step": int, "param_count": int}
#   then         param_count float32 parameter values
#   then         param_count float32 first moments
#   then         param_count float32 second moments


def save_checkpoint(path, params: NetParams, state: AdamState) -> None:
    """Write parameters plus optimizer state; reload restores both bitwise."""
    if state.m.size != params.count:
        raise ShapeMismatch("optimizer state does not match parameters")
    header = {
        "format_version": CHECKPOINT_VERSION,
        "layout": [[s.kind, s.n_in, s.n_out] for s in params.layout],
        "rng_seed": params.rng_seed,
        "step": state.step,
        "param_count": params.count,
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(params.values.astype("<f4").tobytes())
        fh.write(state.m.astype("<f4").tobytes())
        fh.write(state.v.astype("<f4").tobytes())


def load_checkpoint(path) -> tuple[NetParams, AdamState]:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 8 or raw[:4] != CHECKPOINT_MAGIC:
        raise ParseError(f"{path}: not a checkpoint file")
    (hlen,) = struct.unpack("<I", raw[4:8])
    try:
        header = json.loads(raw[8 : 8 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ParseError(f"{path}: bad checkpoint header") from exc
    if header.get("format_version") != CHECKPOINT_VERSION:
        raise ParseError(f"{path}: unsupported format version")
    layout = tuple(LayerSpec(kind, int(a), int(b)) for kind, a, b in header["layout"])
    count = int(header["param_count"])
    body = raw[8 + hlen :]
    if len(body) != 3 * 4 * count:
        raise ParseError(f"{path}: truncated checkpoint body")
    arrays = np.frombuffer(body, dtype="<f4").reshape(3, count)
    params = NetParams(values=arrays[0], layout=layout, rng_seed=int(header["rng_seed"]))
    state = AdamState(m=arrays[1], v=arrays[2], step=int(header["step"]))
    return params, state
