"""Small differentiable models with hand-derived gradients.

Three architectures cover the feature and image modes:

* ``linear``:  affine map.
* ``mlp``:     affine -> rectify -> affine.
* ``tinycnn``: two blocks of conv3x3 -> rectify -> maxpool2x2, then a
  global average pool and an affine head. Inputs are channel-last RGB.

Parameters live in one flat float64 vector so the optimizer and the
checkpoint format never care about tensor structure. ``unpack`` exposes
named views into that vector for anyone who does.

Backward passes are exact analytic transposes of the forward passes and
are validated against central finite differences in the test suite. The
max pool resolves ties toward the first cell of the window in row-major
order, and its backward routes the incoming gradient to that same cell.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from hiercls.errors import ConfigError
from hiercls.rng import Rng

MODEL_KINDS = ("linear", "mlp", "tinycnn")


@dataclass(frozen=True)
class ModelSpec:
    """Architecture description, small enough to embed in checkpoints.

    Vector models (``linear``, ``mlp``) take ``input_dim`` features; the
    ``tinycnn`` takes ``input_hw`` RGB images whose sides are multiples
    of four (two rounds of 2x2 pooling must divide evenly).
    """

    kind: str
    n_outputs: int
    input_dim: int | None = None
    input_hw: tuple[int, int] | None = None
    hidden: int = 64
    channels: tuple[int, int] = (8, 16)

    def __post_init__(self) -> None:
        if self.kind not in MODEL_KINDS:
            raise ConfigError(f"unknown model kind {self.kind!r}; expected one of {MODEL_KINDS}")
        if self.n_outputs < 2:
            raise ConfigError(f"n_outputs must be >= 2, got {self.n_outputs}")
        if self.input_dim is not None and self.input_hw is not None:
            raise ConfigError("give input_dim or input_hw, not both")
        if self.kind == "tinycnn":
            if self.input_hw is None:
                raise ConfigError("tinycnn requires input_hw")
            h, w = self.input_hw
            if h < 4 or w < 4 or h % 4 or w % 4:
                raise ConfigError(
                    f"tinycnn input sides must be multiples of 4, got {self.input_hw}"
                )
            object.__setattr__(self, "input_hw", (int(h), int(w)))
            c1, c2 = self.channels
            if c1 < 1 or c2 < 1:
                raise ConfigError(f"channels must be positive, got {self.channels}")
            object.__setattr__(self, "channels", (int(c1), int(c2)))
        else:
            if self.input_dim is None or self.input_dim < 1:
                raise ConfigError(f"{self.kind} requires a positive input_dim")
            if self.kind == "mlp" and self.hidden < 1:
                raise ConfigError(f"hidden width must be positive, got {self.hidden}")

    def to_dict(self) -> dict:
        doc = {"kind": self.kind, "n_outputs": self.n_outputs}
        if self.input_dim is not None:
            doc["input_dim"] = self.input_dim
        if self.input_hw is not None:
            doc["input_hw"] = list(self.input_hw)
        if self.kind == "mlp":
            doc["hidden"] = self.hidden
        if self.kind == "tinycnn":
            doc["channels"] = list(self.channels)
        return doc

    @staticmethod
    def from_dict(doc: Mapping) -> "ModelSpec":
        try:
            kind = doc["kind"]
            n_outputs = int(doc["n_outputs"])
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"bad model spec document: {exc}") from exc
        hw = doc.get("input_hw")
        ch = doc.get("channels")
        return ModelSpec(
            kind=kind,
            n_outputs=n_outputs,
            input_dim=None if doc.get("input_dim") is None else int(doc["input_dim"]),
            input_hw=None if hw is None else (int(hw[0]), int(hw[1])),
            hidden=int(doc.get("hidden", 64)),
            channels=(8, 16) if ch is None else (int(ch[0]), int(ch[1])),
        )


def spec_param_count(spec: ModelSpec) -> int:
    """Closed-form parameter count; the checkpoint loader enforces it."""
    if spec.kind == "linear":
        return (spec.input_dim + 1) * spec.n_outputs
    if spec.kind == "mlp":
        return (spec.input_dim + 1) * spec.hidden + (spec.hidden + 1) * spec.n_outputs
    c1, c2 = spec.channels
    return (9 * 3 + 1) * c1 + (9 * c1 + 1) * c2 + (c2 + 1) * spec.n_outputs


# --------------------------------------------------------------- kernels


def _pad_reflect(x: np.ndarray) -> np.ndarray:
    # hand-rolled np.pad(..., mode="reflect"): filling rows first and
    # then whole columns of the padded array mirrors the corners
    # diagonally for free, and sliced assignment is far cheaper than
    # np.pad on the micro arrays the gradient checks sweep
    n, h, w, c = x.shape
    xp = np.empty((n, h + 2, w + 2, c), dtype=x.dtype)
    xp[:, 1 : h + 1, 1 : w + 1] = x
    xp[:, 0, 1 : w + 1] = x[:, 1]
    xp[:, h + 1, 1 : w + 1] = x[:, h - 2]
    xp[:, :, 0] = xp[:, :, 2]
    xp[:, :, w + 1] = xp[:, :, w - 1]
    return xp


def conv3x3(x: np.ndarray, k: np.ndarray) -> np.ndarray:
    """Same-size 3x3 convolution with reflect padding, channel-last.

    x: (N, H, W, Cin); k: (3, 3, Cin, Cout). Implemented as nine shifted
    matmuls over a padded copy, which keeps everything in BLAS. Reflect
    padding (border rows mirrored, no edge repeat) instead of zeros: on
    small images with a light background a zero pad is a strong fake
    dark frame, and with two stacked convs that frame contaminates a
    visible share of the feature cells and dominates attribution maps.
    """
    n, h, w, ci = x.shape
    co = k.shape[3]
    xp = _pad_reflect(x)
    out = np.zeros((n, h, w, co))
    flat = out.reshape(-1, co)
    for dy in range(3):
        for dx in range(3):
            patch = xp[:, dy : dy + h, dx : dx + w, :].reshape(-1, ci)
            flat += patch @ k[dy, dx]
    return out


def conv3x3_backward(
    x: np.ndarray, k: np.ndarray, gout: np.ndarray, need_dx: bool = True
) -> tuple[np.ndarray, np.ndarray, np.ndarray | None]:
    """Gradients of a conv3x3 given the output gradient.

    Returns (dk, db, dx); dx is None when need_dx is False (the first
    layer never propagates into the input). The dx path folds the
    padded-array gradient back through the reflection: each pad cell
    mirrors one interior cell (offset 1 from the border, corners
    diagonally), so its gradient is added onto that source.
    """
    n, h, w, ci = x.shape
    co = k.shape[3]
    xp = _pad_reflect(x)
    g2 = gout.reshape(-1, co)
    dk = np.zeros_like(k)
    dxp = np.zeros_like(xp) if need_dx else None
    for dy in range(3):
        for dx in range(3):
            patch = xp[:, dy : dy + h, dx : dx + w, :].reshape(-1, ci)
            dk[dy, dx] = patch.T @ g2
            if need_dx:
                dxp[:, dy : dy + h, dx : dx + w, :] += (g2 @ k[dy, dx].T).reshape(n, h, w, ci)
    db = g2.sum(axis=0)
    if not need_dx:
        return dk, db, None
    dx_full = dxp[:, 1 : h + 1, 1 : w + 1, :].copy()
    dx_full[:, 1, :, :] += dxp[:, 0, 1 : w + 1, :]
    dx_full[:, h - 2, :, :] += dxp[:, h + 1, 1 : w + 1, :]
    dx_full[:, :, 1, :] += dxp[:, 1 : h + 1, 0, :]
    dx_full[:, :, w - 2, :] += dxp[:, 1 : h + 1, w + 1, :]
    dx_full[:, 1, 1, :] += dxp[:, 0, 0, :]
    dx_full[:, 1, w - 2, :] += dxp[:, 0, w + 1, :]
    dx_full[:, h - 2, 1, :] += dxp[:, h + 1, 0, :]
    dx_full[:, h - 2, w - 2, :] += dxp[:, h + 1, w + 1, :]
    return dk, db, dx_full


def maxpool2(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """2x2 stride-2 max pool; ties go to the first window cell (row-major).

    Returns (pooled, idx) where idx holds the winning cell (0..3) per
    window in the order (0,0), (0,1), (1,0), (1,1).
    """
    n, h, w, c = x.shape
    t = (
        x.reshape(n, h // 2, 2, w // 2, 2, c)
        .transpose(0, 1, 3, 2, 4, 5)
        .reshape(n, h // 2, w // 2, 4, c)
    )
    idx = t.argmax(axis=3)
    out = np.take_along_axis(t, idx[:, :, :, None, :], axis=3)[:, :, :, 0, :]
    return out, idx


def maxpool2_backward(g: np.ndarray, idx: np.ndarray, shape: Sequence[int]) -> np.ndarray:
    """Scatter the pooled gradient back to the winning cells."""
    n, h, w, c = shape
    gt = np.zeros((n, h // 2, w // 2, 4, c))
    np.put_along_axis(gt, idx[:, :, :, None, :], g[:, :, :, None, :], axis=3)
    return (
        gt.reshape(n, h // 2, w // 2, 2, 2, c)
        .transpose(0, 1, 3, 2, 4, 5)
        .reshape(n, h, w, c)
    )


# ---------------------------------------------------------------- models


class Model:
    """Shared packing, init, and validation for the three architectures."""

    def __init__(self, spec: ModelSpec, shapes: Sequence[tuple[str, tuple[int, ...]]]):
        self.spec = spec
        self._shapes = list(shapes)
        self._slices: dict[str, tuple[slice, tuple[int, ...]]] = {}
        offset = 0
        for name, shape in self._shapes:
            size = int(np.prod(shape))
            self._slices[name] = (slice(offset, offset + size), shape)
            offset += size
        self._count = offset

    def param_count(self) -> int:
        return self._count

    def unpack(self, params: np.ndarray) -> dict[str, np.ndarray]:
        params = self._check_params(params)
        return {name: params[sl].reshape(shape) for name, (sl, shape) in self._slices.items()}

    def pack(self, tensors: Mapping[str, np.ndarray]) -> np.ndarray:
        out = np.empty(self._count)
        for name, (sl, shape) in self._slices.items():
            out[sl] = np.asarray(tensors[name], dtype=np.float64).reshape(-1)
        return out

    def init_params(self, rng: Rng) -> np.ndarray:
        """Uniform(-lim, lim) weights with lim = sqrt(6/(fan_in+fan_out)); zero biases."""
        tensors = {}
        for name, shape in self._shapes:
            if len(shape) == 1:
                tensors[name] = np.zeros(shape)
                continue
            if len(shape) == 2:
                fan_in, fan_out = shape
            else:  # conv kernel (3, 3, cin, cout): fan over the receptive field
                fan_in = shape[0] * shape[1] * shape[2]
                fan_out = shape[0] * shape[1] * shape[3]
            lim = np.sqrt(6.0 / (fan_in + fan_out))
            size = int(np.prod(shape))
            tensors[name] = (rng.uniforms(size) * 2.0 - 1.0).reshape(shape) * lim
        return self.pack(tensors)

    def _check_params(self, params: np.ndarray) -> np.ndarray:
        params = np.asarray(params, dtype=np.float64)
        if params.shape != (self._count,):
            raise ValueError(
                f"expected flat parameter vector of length {self._count}, got shape {params.shape}"
            )
        return params

    def _check_input(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def forward(self, params: np.ndarray, x: np.ndarray) -> np.ndarray:
        return self.forward_cached(params, x)[0]

    def forward_cached(self, params, x):
        raise NotImplementedError

    def backward(self, params, cache, grad_scores):
        raise NotImplementedError


class LinearModel(Model):
    def __init__(self, spec: ModelSpec):
        super().__init__(spec, [("W", (spec.input_dim, spec.n_outputs)), ("b", (spec.n_outputs,))])

    def _check_input(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.spec.input_dim:
            raise ValueError(f"expected input of shape (N, {self.spec.input_dim}), got {x.shape}")
        return x

    def forward_cached(self, params, x):
        x = self._check_input(x)
        t = self.unpack(params)
        return x @ t["W"] + t["b"], {"x": x}

    def backward(self, params, cache, grad_scores):
        x = cache["x"]
        g = np.asarray(grad_scores, dtype=np.float64)
        return self.pack({"W": x.T @ g, "b": g.sum(axis=0)})


class MlpModel(Model):
    def __init__(self, spec: ModelSpec):
        super().__init__(
            spec,
            [
                ("W1", (spec.input_dim, spec.hidden)),
                ("b1", (spec.hidden,)),
                ("W2", (spec.hidden, spec.n_outputs)),
                ("b2", (spec.n_outputs,)),
            ],
        )

    def _check_input(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.spec.input_dim:
            raise ValueError(f"expected input of shape (N, {self.spec.input_dim}), got {x.shape}")
        return x

    def forward_cached(self, params, x):
        x = self._check_input(x)
        t = self.unpack(params)
        z1 = x @ t["W1"] + t["b1"]
        a1 = np.maximum(z1, 0.0)
        return a1 @ t["W2"] + t["b2"], {"x": x, "z1": z1, "a1": a1}

    def backward(self, params, cache, grad_scores):
        t = self.unpack(params)
        g = np.asarray(grad_scores, dtype=np.float64)
        d_a1 = g @ t["W2"].T
        d_z1 = d_a1 * (cache["z1"] > 0.0)
        return self.pack(
            {
                "W1": cache["x"].T @ d_z1,
                "b1": d_z1.sum(axis=0),
                "W2": cache["a1"].T @ g,
                "b2": g.sum(axis=0),
            }
        )


class TinyCnnModel(Model):
    """conv3x3 -> relu -> pool, twice, then global average pool and a head.

    ``forward_cached`` keeps the post-rectifier activations of the second
    block under the cache key ``"a2"``; attribution reads them, and
    ``backward(..., want_activation_grad=True)`` also returns the exact
    gradient of the objective with respect to that tensor.
    """

    def __init__(self, spec: ModelSpec):
        c1, c2 = spec.channels
        super().__init__(
            spec,
            [
                ("K1", (3, 3, 3, c1)),
                ("b1", (c1,)),
                ("K2", (3, 3, c1, c2)),
                ("b2", (c2,)),
                ("Wh", (c2, spec.n_outputs)),
                ("bh", (spec.n_outputs,)),
            ],
        )

    def _check_input(self, x):
        x = np.asarray(x, dtype=np.float64)
        h, w = self.spec.input_hw
        if x.ndim != 4 or x.shape[1:] != (h, w, 3):
            raise ValueError(f"expected input of shape (N, {h}, {w}, 3), got {x.shape}")
        return x

    def forward_cached(self, params, x):
        x = self._check_input(x)
        t = self.unpack(params)
        z1 = conv3x3(x, t["K1"]) + t["b1"]
        a1 = np.maximum(z1, 0.0)
        p1, i1 = maxpool2(a1)
        z2 = conv3x3(p1, t["K2"]) + t["b2"]
        a2 = np.maximum(z2, 0.0)
        p2, i2 = maxpool2(a2)
        feats = p2.mean(axis=(1, 2))
        scores = feats @ t["Wh"] + t["bh"]
        cache = {"x": x, "z1": z1, "p1": p1, "i1": i1, "z2": z2, "a2": a2, "i2": i2, "f": feats}
        return scores, cache

    def backward(self, params, cache, grad_scores, want_activation_grad: bool = False):
        t = self.unpack(params)
        g = np.asarray(grad_scores, dtype=np.float64)
        d_feats = g @ t["Wh"].T
        a2 = cache["a2"]
        n, h2, w2, c2 = a2.shape
        d_p2 = np.broadcast_to(
            d_feats[:, None, None, :] / ((h2 // 2) * (w2 // 2)), (n, h2 // 2, w2 // 2, c2)
        )
        d_a2 = maxpool2_backward(d_p2, cache["i2"], a2.shape)
        d_z2 = d_a2 * (cache["z2"] > 0.0)
        d_k2, d_b2, d_p1 = conv3x3_backward(cache["p1"], t["K2"], d_z2, need_dx=True)
        d_a1 = maxpool2_backward(d_p1, cache["i1"], cache["z1"].shape)
        d_z1 = d_a1 * (cache["z1"] > 0.0)
        d_k1, d_b1, _ = conv3x3_backward(cache["x"], t["K1"], d_z1, need_dx=False)
        grads = self.pack(
            {
                "K1": d_k1,
                "b1": d_b1,
                "K2": d_k2,
                "b2": d_b2,
                "Wh": cache["f"].T @ g,
                "bh": g.sum(axis=0),
            }
        )
        if want_activation_grad:
            return grads, d_a2
        return grads


def build_model(spec: ModelSpec) -> Model:
    if spec.kind == "linear":
        return LinearModel(spec)
    if spec.kind == "mlp":
        return MlpModel(spec)
    return TinyCnnModel(spec)
