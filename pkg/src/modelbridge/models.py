"""Toy layer-stack encoders with prefix/suffix execution.

An encoder maps a signal of shape ``(T, C)`` (or a batch ``(B, T, C)``) to a
stack of token representations ``h_i`` of shape ``(N_i, d_i)``. Instead of
forward hooks, representations are captured with :meth:`EncoderModel.forward_prefix`
and injected with :meth:`EncoderModel.forward_suffix`; running the prefix then
the suffix performs exactly the same arithmetic as :meth:`EncoderModel.forward`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tape, Tensor
from .optim import Adam

LAYER_KINDS = ("conv-block", "attention-block", "norm-block")


class TrainingDivergedError(RuntimeError):
    def __init__(self, what: str, epoch: int, step: int | None = None):
        where = f"epoch {epoch}" + (f", step {step}" if step is not None else "")
        super().__init__(f"{what}: non-finite loss at {where}")
        self.epoch = epoch
        self.step = step


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    hparams: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")

    def output_shape(self, in_shape: tuple[int, int]) -> tuple[int, int]:
        n, d = in_shape
        hp = self.hparams
        if self.kind == "conv-block":
            if d != hp["in_channels"]:
                raise ValueError(f"conv-block expects {hp['in_channels']} channels, got {d}")
            n_out = (n + 2 * hp["padding"] - hp["kernel"]) // hp["stride"] + 1
            if n_out < 1:
                raise ValueError(f"conv-block output length {n_out} < 1")
            return n_out, hp["out_channels"]
        if d != hp["dim"]:
            raise ValueError(f"{self.kind} expects dim {hp['dim']}, got {d}")
        return n, d

    def to_dict(self) -> dict:
        return {"kind": self.kind, "hparams": dict(sorted(self.hparams.items()))}


def conv_spec(in_channels, out_channels, kernel, stride=1, padding=None, norm=True,
              activation="gelu", positional=False) -> LayerSpec:
    return LayerSpec("conv-block", {
        "in_channels": in_channels,
        "out_channels": out_channels,
        "kernel": kernel,
        "stride": stride,
        "padding": kernel // 2 if padding is None else padding,
        "norm": norm,
        "activation": activation,
        "positional": positional,
    })


def attention_spec(dim, mlp_ratio=2) -> LayerSpec:
    return LayerSpec("attention-block", {"dim": dim, "mlp_ratio": mlp_ratio})


def norm_spec(dim) -> LayerSpec:
    return LayerSpec("norm-block", {"dim": dim})


_ACTIVATIONS: dict[str, Callable[[Tensor], Tensor]] = {
    "gelu": ad.gelu,
    "relu": ad.relu,
    "none": lambda h: h,
}


class Layer:
    """One block: a spec plus its named parameters."""

    def __init__(self, spec: LayerSpec, in_shape: tuple[int, int], rng: np.random.Generator | None = None,
                 params: dict[str, np.ndarray] | None = None):
        self.spec = spec
        self.in_shape = tuple(in_shape)
        self.out_shape = spec.output_shape(self.in_shape)
        shapes = self._param_shapes()
        if params is None:
            rng = rng if rng is not None else np.random.default_rng(0)
            params = self._init(shapes, rng)
        missing = set(shapes) - set(params)
        if missing:
            raise ValueError(f"missing parameters {sorted(missing)} for {spec.kind}")
        self.params = {}
        for name, shape in shapes.items():
            value = np.asarray(params[name], dtype=np.float64)
            if value.shape != shape:
                raise ValueError(f"{spec.kind}.{name}: shape {value.shape} != {shape}")
            self.params[name] = Parameter(value.copy(), trainable=False, name=name)

    def _param_shapes(self) -> dict[str, tuple[int, ...]]:
        hp = self.spec.hparams
        if self.spec.kind == "conv-block":
            n_out, c_out = self.out_shape
            shapes = {"weight": (hp["kernel"], hp["in_channels"], c_out), "bias": (c_out,)}
            if hp["positional"]:
                shapes["pos"] = (n_out, c_out)
            if hp["norm"]:
                shapes["ln_gain"] = (c_out,)
                shapes["ln_bias"] = (c_out,)
            return shapes
        d = hp["dim"]
        if self.spec.kind == "norm-block":
            return {"ln_gain": (d,), "ln_bias": (d,)}
        hidden = d * hp["mlp_ratio"]
        return {
            "ln1_gain": (d,), "ln1_bias": (d,),
            "wq": (d, d), "wk": (d, d), "wv": (d, d), "wo": (d, d),
            "ln2_gain": (d,), "ln2_bias": (d,),
            "w1": (d, hidden), "b1": (hidden,), "w2": (hidden, d), "b2": (d,),
        }

    def _init(self, shapes, rng) -> dict[str, np.ndarray]:
        out = {}
        for name, shape in shapes.items():
            if name.endswith("gain"):
                out[name] = np.ones(shape)
            elif len(shape) == 1:
                out[name] = np.zeros(shape)
            elif name == "pos":
                out[name] = 0.02 * rng.standard_normal(shape)
            else:
                fan_in = int(np.prod(shape[:-1]))
                out[name] = rng.standard_normal(shape) / math.sqrt(fan_in)
        return out

    def __call__(self, h: Tensor) -> Tensor:
        p = self.params
        hp = self.spec.hparams
        if self.spec.kind == "conv-block":
            h = ad.conv1d(h, p["weight"], p["bias"], stride=hp["stride"], padding=hp["padding"])
            if hp["positional"]:
                h = h + p["pos"]
            if hp["norm"]:
                h = ad.layer_norm(h, p["ln_gain"], p["ln_bias"])
            return _ACTIVATIONS[hp["activation"]](h)
        if self.spec.kind == "norm-block":
            return ad.layer_norm(h, p["ln_gain"], p["ln_bias"])
        a = ad.layer_norm(h, p["ln1_gain"], p["ln1_bias"])
        attended = ad.attention(a @ p["wq"], a @ p["wk"], a @ p["wv"])
        h = h + attended @ p["wo"]
        a = ad.layer_norm(h, p["ln2_gain"], p["ln2_bias"])
        return h + ad.gelu(a @ p["w1"] + p["b1"]) @ p["w2"] + p["b2"]

    def parameters(self) -> list[Parameter]:
        return list(self.params.values())


def _batched(x) -> tuple[Tensor, bool]:
    t = x if isinstance(x, Tensor) else Tensor(x)
    if t.ndim == 2:
        return ad.reshape(t, (1,) + t.shape), True
    return t, False


def _unbatched(t: Tensor, squeeze: bool) -> Tensor:
    return ad.reshape(t, t.shape[1:]) if squeeze else t


class EncoderModel:
    """Ordered stack of layers over a ``(T, C)`` input signal."""

    def __init__(self, specs: Sequence[LayerSpec], input_shape: tuple[int, int], modality: str,
                 seed: int = 0, params: Sequence[dict[str, np.ndarray]] | None = None):
        if not specs:
            raise ValueError("an encoder needs at least one layer")
        self.modality = modality
        self.input_shape = tuple(int(v) for v in input_shape)
        rng = np.random.default_rng(seed)
        self.layers: list[Layer] = []
        shape = self.input_shape
        for i, spec in enumerate(specs):
            layer = Layer(spec, shape, rng, None if params is None else params[i])
            self.layers.append(layer)
            shape = layer.out_shape

    @property
    def layer_count(self) -> int:
        return len(self.layers)

    @property
    def specs(self) -> list[LayerSpec]:
        return [layer.spec for layer in self.layers]

    def layer_shapes(self) -> list[tuple[int, int]]:
        return [layer.out_shape for layer in self.layers]

    def parameters(self) -> list[Parameter]:
        return [p for layer in self.layers for p in layer.parameters()]

    def param_count(self) -> int:
        return sum(p.data.size for p in self.parameters())

    def set_trainable(self, flag: bool) -> None:
        for p in self.parameters():
            p.trainable = flag

    def freeze(self) -> None:
        self.set_trainable(False)

    def forward_prefix(self, x, m: int) -> Tensor:
        """Representation after the first ``m`` layers (1 <= m <= layer_count)."""
        if not 1 <= m <= self.layer_count:
            raise IndexError(f"prefix position {m} outside 1..{self.layer_count}")
        h, squeeze = _batched(x)
        if h.shape[1:] != self.input_shape:
            raise ValueError(f"{self.modality} encoder expects input {self.input_shape}, got {h.shape[1:]}")
        for layer in self.layers[:m]:
            h = layer(h)
        return _unbatched(h, squeeze)

    def forward_suffix(self, h, l: int, stop: int | None = None) -> Tensor:
        """Run layers ``l+1 .. stop`` (default: last) on an injected ``h_l``.

        ``l == stop`` returns ``h`` unchanged.
        """
        stop = self.layer_count if stop is None else stop
        if not 0 <= l <= stop <= self.layer_count:
            raise IndexError(f"suffix range ({l}, {stop}] outside 0..{self.layer_count}")
        h, squeeze = _batched(h)
        expected = self.input_shape if l == 0 else self.layers[l - 1].out_shape
        if h.shape[1:] != expected:
            raise ValueError(f"injected representation {h.shape[1:]} != layer {l} shape {expected}")
        for layer in self.layers[l:stop]:
            h = layer(h)
        return _unbatched(h, squeeze)

    def forward(self, x) -> Tensor:
        return self.forward_prefix(x, self.layer_count)

    def all_layers(self, x) -> list[np.ndarray]:
        """Every intermediate representation h_1..h_L in one pass (no recording)."""
        h, squeeze = _batched(x)
        outs = []
        for layer in self.layers:
            h = layer(h)
            outs.append(h.data[0] if squeeze else h.data)
        return outs


def list_layer_shapes(model: EncoderModel) -> list[tuple[int, int]]:
    return model.layer_shapes()


class TaskHead:
    """Linear classifier over the token-mean of the final representation."""

    def __init__(self, dim: int, n_classes: int, seed: int = 0, weight=None, bias=None):
        rng = np.random.default_rng(seed)
        if weight is None:
            weight = rng.standard_normal((dim, n_classes)) / math.sqrt(dim)
        if bias is None:
            bias = np.zeros(n_classes)
        self.weight = Parameter(weight, trainable=False, name="head_weight")
        self.bias = Parameter(bias, trainable=False, name="head_bias")

    @property
    def n_classes(self) -> int:
        return self.weight.shape[1]

    @property
    def dim(self) -> int:
        return self.weight.shape[0]

    def parameters(self) -> list[Parameter]:
        return [self.weight, self.bias]

    def set_trainable(self, flag: bool) -> None:
        for p in self.parameters():
            p.trainable = flag

    def logits_from_pooled(self, pooled: Tensor) -> Tensor:
        return pooled @ self.weight + self.bias

    def __call__(self, h_last: Tensor) -> Tensor:
        h, squeeze = _batched(h_last)
        if h.shape[-1] != self.dim:
            raise ValueError(f"head expects dim {self.dim}, got {h.shape[-1]}")
        logits = self.logits_from_pooled(ad.mean(h, axis=1))
        return ad.reshape(logits, (self.n_classes,)) if squeeze else logits


def softmax_np(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def predict(model: EncoderModel, head: TaskHead, x) -> np.ndarray:
    """Class probabilities for one sample ``(T, C)`` or a batch ``(B, T, C)``."""
    return softmax_np(head(model.forward(x)).data)


def cross_entropy(logits: Tensor, target_probs: np.ndarray) -> Tensor:
    """Mean over the batch of ``-sum(target * log_softmax(logits))``."""
    return -ad.mean(ad.sum(ad.log_softmax(logits) * target_probs, axis=-1))


def one_hot(y, n_classes: int) -> np.ndarray:
    y = np.asarray(y, dtype=int)
    out = np.zeros((y.size, n_classes))
    out[np.arange(y.size), y] = 1.0
    return out


def iterate_minibatches(n: int, batch_size: int, rng: np.random.Generator, drop_last: bool = False):
    order = rng.permutation(n)
    stop = n - n % batch_size if drop_last and n >= batch_size else n
    for start in range(0, stop, batch_size):
        yield order[start : start + batch_size]


def _fit(params: list[Parameter], loss_fn, n: int, epochs: int, lr: float, batch_size: int, seed: int,
         what: str) -> list[float]:
    opt = Adam(params, lr=lr)
    rng = np.random.default_rng(seed)
    history = []
    for epoch in range(1, epochs + 1):
        total = 0.0
        for step, idx in enumerate(iterate_minibatches(n, batch_size, rng)):
            with Tape() as tape:
                loss = loss_fn(idx)
            if not np.isfinite(loss.data):
                raise TrainingDivergedError(what, epoch, step)
            opt.step(ad.backward(tape, loss, opt.params))
            total += loss.item() * len(idx)
        history.append(total / n)
    return history


def pretrain_supervised(model: EncoderModel, head: TaskHead, x: np.ndarray, y: np.ndarray, epochs: int,
                        lr: float = 1e-3, batch_size: int = 32, seed: int = 0,
                        train_encoder: bool = True) -> list[float]:
    """Train encoder (optionally) and head with cross-entropy, then freeze both.

    Returns the mean training loss of each epoch.
    """
    if head.dim != model.layer_shapes()[-1][1]:
        raise ValueError("head dimension does not match the encoder output")
    targets = one_hot(y, head.n_classes)
    model.set_trainable(train_encoder)
    head.set_trainable(True)
    params = [p for p in model.parameters() + head.parameters() if p.trainable]

    def loss_fn(idx):
        return cross_entropy(head(model.forward(x[idx])), targets[idx])

    try:
        return _fit(params, loss_fn, len(x), epochs, lr, batch_size, seed, "pretrain")
    finally:
        model.freeze()
        head.set_trainable(False)


def pretrain_regression(model: EncoderModel, x: np.ndarray, targets: np.ndarray, epochs: int,
                        lr: float = 1e-3, batch_size: int = 32, seed: int = 0) -> list[float]:
    """Self-contained representation pretraining: regress ``targets`` from pooled features.

    Used to give the new-modality encoder structured features before any
    transfer happens; the temporary regression head is discarded.
    """
    targets = np.asarray(targets, dtype=np.float64)
    dim = model.layer_shapes()[-1][1]
    rng = np.random.default_rng(seed + 7919)
    w = Parameter(rng.standard_normal((dim, targets.shape[1])) / math.sqrt(dim), name="reg_weight")
    b = Parameter(np.zeros(targets.shape[1]), name="reg_bias")
    model.set_trainable(True)

    def loss_fn(idx):
        pred = ad.mean(model.forward(x[idx]), axis=1) @ w + b
        diff = pred - targets[idx]
        return ad.mean(diff * diff)

    try:
        return _fit(model.parameters() + [w, b], loss_fn, len(x), epochs, lr, batch_size, seed, "pretrain")
    finally:
        model.freeze()


# ------------------------------------------------------------------ architectures


def _conv_stack(channels: Sequence[int], kernels: Sequence[int], strides: Sequence[int], in_channels: int):
    specs, c = [], in_channels
    for out, k, s in zip(channels, kernels, strides):
        specs.append(conv_spec(c, out, k, s))
        c = out
    return specs


def _attention_stack(in_channels: int, patch: int, dim: int, depth: int, mlp_ratio: int = 2):
    embed = conv_spec(in_channels, dim, patch, stride=patch, padding=0, activation="none", positional=True)
    return [embed] + [attention_spec(dim, mlp_ratio) for _ in range(depth)]


ARCHITECTURES: dict[str, Callable[[int], list[LayerSpec]]] = {
    # new-modality style CNN: halves the sequence each block
    "conv": lambda c: _conv_stack((16, 24, 32, 48, 48), (7, 5, 5, 3, 3), (2, 2, 2, 2, 1), c),
    "conv-wide": lambda c: _conv_stack((32, 48, 64, 64), (7, 5, 5, 3), (2, 2, 2, 2), c),
    # old-modality style transformer: patch embedding then attention blocks
    "attention": lambda c: _attention_stack(c, patch=16, dim=32, depth=3),
    "attention-deep": lambda c: _attention_stack(c, patch=16, dim=24, depth=5),
}


def build_encoder(arch: str, input_shape: tuple[int, int], modality: str, seed: int = 0) -> EncoderModel:
    try:
        specs = ARCHITECTURES[arch](input_shape[1])
    except KeyError:
        raise ValueError(f"unknown architecture {arch!r}; choose from {sorted(ARCHITECTURES)}") from None
    return EncoderModel(specs, input_shape, modality, seed=seed)
