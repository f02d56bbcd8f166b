"""Siamese residual network over (reference, query) spectrogram images.

One branch network is built and evaluated on both images, so sharing is
structural. In training mode the two images of every pair go through the
branch as one concatenated batch, so gradients from both sides accumulate
into the same parameters in a single backward pass.
"""
from __future__ import annotations

import hashlib
import json
import math
import struct
import zlib
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np

from . import kernels as K
from .errors import (
    ChecksumError,
    ConfigError,
    DataIOError,
    MalformedFileError,
    NumericalError,
    ShapeMismatchError,
)

CHECKPOINT_MAGIC = b"SRNNCKPT"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class StageConfig:
    out_channels: int
    conv_kernel: int
    conv_stride: int = 1
    conv_padding: int | None = None  # None: "same" padding, kernel // 2

    @property
    def padding(self) -> int:
        return self.conv_kernel // 2 if self.conv_padding is None else self.conv_padding


@dataclass(frozen=True)
class SResnnConfig:
    stages: tuple[StageConfig, ...]
    branch_pool: tuple[int, int]
    branch_fc_out: int
    head_dropout_p: float = 0.5
    n_classes: int = 28
    input: tuple[int, int, int] = (3, 224, 224)

    def __post_init__(self):
        self.validate()

    @property
    def branch_fc_in(self) -> int:
        return self.stages[-1].out_channels * self.branch_pool[0] * self.branch_pool[1]

    def validate(self):
        if len(self.stages) != 4:
            raise ConfigError(f"exactly 4 stages are required, got {len(self.stages)}")
        for i, st in enumerate(self.stages, 1):
            if st.out_channels < 1 or st.conv_kernel % 2 == 0 or st.conv_stride < 1:
                raise ConfigError(f"stage {i}: invalid {st}")
            if st.out_channels % 4:
                raise ConfigError(f"stage {i}: {st.out_channels} channels not divisible by 4")
        if not 0 <= self.head_dropout_p < 1:
            raise ConfigError("head_dropout_p must lie in [0, 1)")
        if self.n_classes < 2 or self.branch_fc_out < 1 or min(self.branch_pool) < 1:
            raise ConfigError("n_classes >= 2, branch_fc_out >= 1 and branch_pool >= 1 required")
        h, w = self.input[1:]
        for i, st in enumerate(self.stages, 1):
            h = K.conv_output_size(h, st.conv_kernel, st.conv_stride, st.padding)
            w = K.conv_output_size(w, st.conv_kernel, st.conv_stride, st.padding)
            if h < 3 or w < 3:
                raise ConfigError(f"stage {i}: feature map {h}x{w} too small for 3x3 max pooling")
            h, w = (h - 3) // 2 + 1, (w - 3) // 2 + 1

    def spatial_trace(self) -> list[tuple[str, int, int]]:
        trace = [("input", *self.input[1:])]
        h, w = self.input[1:]
        for i, st in enumerate(self.stages, 1):
            h = K.conv_output_size(h, st.conv_kernel, st.conv_stride, st.padding)
            w = K.conv_output_size(w, st.conv_kernel, st.conv_stride, st.padding)
            trace.append((f"conv{i}", h, w))
            h, w = (h - 3) // 2 + 1, (w - 3) // 2 + 1
            trace.append((f"pool{i}", h, w))
        trace.append(("adaptive_pool", *self.branch_pool))
        return trace

    def to_dict(self) -> dict:
        d = asdict(self)
        d["branch_pool"] = list(self.branch_pool)
        d["input"] = list(self.input)
        d["stages"] = [asdict(s) for s in self.stages]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SResnnConfig":
        known = {"stages", "branch_pool", "branch_fc_out", "head_dropout_p", "n_classes", "input"}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        try:
            stages = tuple(StageConfig(**s) for s in d["stages"])
            return cls(stages=stages, branch_pool=tuple(d["branch_pool"]),
                       branch_fc_out=int(d["branch_fc_out"]),
                       head_dropout_p=float(d.get("head_dropout_p", 0.5)),
                       n_classes=int(d.get("n_classes", 28)), input=tuple(d.get("input", (3, 224, 224))))
        except (KeyError, TypeError) as exc:
            raise ConfigError(f"invalid model config: {exc}") from exc

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


def paper_config(n_classes: int = 28) -> SResnnConfig:
    """Full-size configuration: 3x224x224 input, 256*5*5 = 6400 -> 2048 branch FC."""
    return SResnnConfig(
        stages=(StageConfig(32, 7, 2, 3), StageConfig(64, 5), StageConfig(128, 3), StageConfig(256, 3)),
        branch_pool=(5, 5), branch_fc_out=2048, head_dropout_p=0.5, n_classes=n_classes,
        input=(3, 224, 224))


def desk_config(n_classes: int = 28, dropout: float = 0.5) -> SResnnConfig:
    """CPU-trainable configuration on 3x64x64 images."""
    return SResnnConfig(
        stages=(StageConfig(8, 5), StageConfig(16, 3), StageConfig(32, 3), StageConfig(64, 3)),
        branch_pool=(2, 2), branch_fc_out=128, head_dropout_p=dropout, n_classes=n_classes,
        input=(3, 64, 64))


PRESETS = {"paper": paper_config, "desk": desk_config}


# ---------------------------------------------------------------------------
# network
# ---------------------------------------------------------------------------

def _build_branch(cfg: SResnnConfig, rng, dtype) -> K.Sequential:
    layers = []
    in_ch = cfg.input[0]
    for i, st in enumerate(cfg.stages, 1):
        stage = K.Sequential(
            ("conv", K.Conv2d(in_ch, st.out_channels, st.conv_kernel, st.conv_stride, st.padding,
                              bias=False, rng=rng, dtype=dtype)),
            ("bn", K.BatchNorm2d(st.out_channels, dtype=dtype)),
            ("relu", K.ReLU()),
            ("pool", K.MaxPool2d(3, 2)),
            ("res", K.ResidualBlock(st.out_channels, st.conv_kernel, rng=rng, dtype=dtype)),
        )
        layers.append((f"stage{i}", stage))
        in_ch = st.out_channels
    layers += [
        ("pool", K.AdaptiveAvgPool2d(cfg.branch_pool)),
        ("flatten", K.Flatten()),
        ("fc", K.Dense(cfg.branch_fc_in, cfg.branch_fc_out, rng=rng, dtype=dtype)),
        ("relu", K.ReLU()),
    ]
    return K.Sequential(*layers)


class SResNN(K.Layer):
    kind = "sresnn"

    def __init__(self, config: SResnnConfig, seed: int = 0, dtype=K.DEFAULT_DTYPE):
        super().__init__()
        self.config = config
        self.seed = seed
        rng = np.random.default_rng(seed)
        self.branch = _build_branch(config, rng, dtype)
        self.set_input_grad(False)
        self.dropout = K.Dropout(config.head_dropout_p, rng=np.random.default_rng([seed, 1]))
        self.classifier = K.Dense(2 * config.branch_fc_out, config.n_classes, rng=rng, dtype=dtype)
        # zero classifier: the untrained model predicts uniformly, loss = ln(n_classes)
        self.classifier.weight.value[...] = 0.0

    def children(self):
        return iter([("branch", self.branch), ("head", _Head(self.dropout, self.classifier))])

    def layers(self):
        yield self
        yield from self.branch.layers()
        yield self.dropout
        yield self.classifier

    def set_input_grad(self, enabled: bool):
        """Whether backward() also returns image gradients (off for training)."""
        self.branch.named_layers[0][1].named_layers[0][1].input_grad = enabled

    @property
    def dtype(self):
        return self.classifier.weight.value.dtype

    def reseed_dropout(self, seed):
        self.dropout.rng = np.random.default_rng([seed, 1])

    def _as_batch(self, x):
        x = np.asarray(x, dtype=self.dtype)
        if x.ndim == 3:
            x = x[None]
        if x.shape[1:] != tuple(self.config.input):
            raise ShapeMismatchError(f"image shape {x.shape[1:]} != configured {tuple(self.config.input)}")
        return x

    def embed(self, images, train=False):
        """Branch embedding G for a batch (or single image)."""
        return self.branch.forward(self._as_batch(images), train)

    def forward(self, x, train=False):
        ref, query = (self._as_batch(a) for a in x)
        if ref.shape[0] != query.shape[0]:
            raise ShapeMismatchError("reference and query batches differ in size")
        b = ref.shape[0]
        if train:
            g = self.branch.forward(np.concatenate([ref, query]), True)
            g1, g2 = g[:b], g[b:]
        else:
            g1, g2 = self.branch.forward(ref), self.branch.forward(query)
        h = np.concatenate([g1, g2], axis=1)
        h = self.dropout.forward(h, train)
        logits = self.classifier.forward(h, train)
        if train:
            self._cache = b
        return logits

    def backward(self, dlogits):
        b = self._take_cache()
        dh = self.dropout.backward(self.classifier.backward(dlogits))
        f = self.config.branch_fc_out
        dg = np.concatenate([dh[:, :f], dh[:, f:]])
        dx = self.branch.backward(dg)
        return (None, None) if dx is None else (dx[:b], dx[b:])

    def layer_plan(self) -> list:
        return {"branch": self.branch.describe(),
                "head": [{"name": "concat", "kind": "concat", "order": ["reference", "query"]},
                         {"name": "dropout", **self.dropout.describe()},
                         {"name": "classifier", **self.classifier.describe()}]}


class _Head(K.Layer):
    """Naming shim so head parameters are listed as ``head.classifier.*``."""

    def __init__(self, dropout, classifier):
        super().__init__()
        self._children = [("classifier", classifier)]

    def children(self):
        return iter(self._children)


def build(config: SResnnConfig, seed: int = 0, dtype=K.DEFAULT_DTYPE) -> SResNN:
    config.validate()
    return SResNN(config, seed, dtype)


def branch_forward(model: SResNN, image, mode="eval") -> np.ndarray:
    g = model.embed(image, K._is_train(mode))
    model.release()
    return g[0] if np.asarray(image).ndim == 3 else g


def branch_activations(model: SResNN, image) -> dict[str, np.ndarray]:
    """Eval-mode per-stage conv outputs Y_i and stage outputs X_{i+1}, plus G."""
    x = model._as_batch(image)
    acts = {}
    named = dict(model.branch.named_layers)
    for i in range(1, 5):
        stage = dict(named[f"stage{i}"].named_layers)
        y = stage["relu"].forward(stage["bn"].forward(stage["conv"].forward(x)))
        x = stage["res"].forward(stage["pool"].forward(y))
        acts[f"Y{i}"], acts[f"X{i + 1}"] = y, x
    for name in ("pool", "flatten", "fc", "relu"):
        x = named[name].forward(x)
    acts["G"] = x
    return acts


def forward(model: SResNN, reference_image, query_image, mode="eval") -> np.ndarray:
    single = np.asarray(reference_image).ndim == 3
    logits = model.forward((reference_image, query_image), K._is_train(mode))
    model.release()
    return logits[0] if single else logits


def predict_proba(model: SResNN, refs, queries, batch_size: int = 64) -> np.ndarray:
    out = []
    for i in range(0, len(refs), batch_size):
        logits = model.forward((refs[i:i + batch_size], queries[i:i + batch_size]), False)
        out.append(K.softmax(logits.astype(np.float64)))
    return np.concatenate(out) if out else np.zeros((0, model.config.n_classes))


# ---------------------------------------------------------------------------
# accounting
# ---------------------------------------------------------------------------

def _conv_params(cin, cout, k, bias=False):
    return cin * cout * k * k + (cout if bias else 0)


def count_params(config: SResnnConfig) -> int:
    """Weights + biases + batch-norm affine parameters, from the config alone."""
    total, cin = 0, config.input[0]
    for st in config.stages:
        c, mid, k = st.out_channels, st.out_channels // 4, st.conv_kernel
        total += _conv_params(cin, c, k) + 2 * c
        total += _conv_params(c, mid, 1) + 2 * mid
        total += _conv_params(mid, mid, k) + 2 * mid
        total += _conv_params(mid, c, 1) + 2 * c
        cin = c
    total += config.branch_fc_in * config.branch_fc_out + config.branch_fc_out
    total += 2 * config.branch_fc_out * config.n_classes + config.n_classes
    return total


def count_flops(config: SResnnConfig) -> dict[str, int]:
    """Multiply-accumulates of conv and dense layers for one (reference, query) pair.

    ``flops`` counts each MAC as two operations; ``macs`` as one.
    """
    branch, cin = 0, config.input[0]
    h, w = config.input[1:]
    for st in config.stages:
        c, mid, k = st.out_channels, st.out_channels // 4, st.conv_kernel
        h = K.conv_output_size(h, k, st.conv_stride, st.padding)
        w = K.conv_output_size(w, k, st.conv_stride, st.padding)
        branch += cin * c * k * k * h * w
        h, w = (h - 3) // 2 + 1, (w - 3) // 2 + 1
        branch += (c * mid + mid * mid * k * k + mid * c) * h * w
        cin = c
    branch += config.branch_fc_in * config.branch_fc_out
    macs = 2 * branch + 2 * config.branch_fc_out * config.n_classes
    return {"macs": macs, "flops": 2 * macs}


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def save(model: SResNN, path, metadata: dict | None = None) -> Path:
    """Write magic, length-prefixed JSON header, float32 payload, CRC32."""
    path = Path(path)
    entries, chunks, offset = [], [], 0
    for name, p in model.named_parameters():
        data = np.ascontiguousarray(p.value, dtype="<f4").tobytes()
        entries.append({"name": name, "shape": list(p.shape), "offset": offset, "nbytes": len(data)})
        chunks.append(data)
        offset += len(data)
    payload = b"".join(chunks)
    header = {
        "format_version": CHECKPOINT_VERSION,
        "config": model.config.to_dict(),
        "layer_plan": model.layer_plan(),
        "tensors": entries,
        "buffers": {n: [float(v) for v in np.asarray(b, dtype=np.float32)]
                    for n, b in model.named_buffers()},
        "metadata": {"seed": model.seed, **(metadata or {})},
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    blob = CHECKPOINT_MAGIC + struct.pack("<Q", len(head)) + head + payload + struct.pack(
        "<I", zlib.crc32(payload))
    try:
        path.write_bytes(blob)
    except OSError as exc:
        raise DataIOError(f"cannot write checkpoint {path}: {exc}") from exc
    return path


def read_header(path) -> tuple[dict, bytes]:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise DataIOError(f"cannot read checkpoint {path}: {exc}") from exc
    if len(blob) < 20 or not blob.startswith(CHECKPOINT_MAGIC):
        raise MalformedFileError(f"{path}: not a checkpoint (bad magic)")
    (n,) = struct.unpack_from("<Q", blob, 8)
    if 16 + n + 4 > len(blob):
        raise MalformedFileError(f"{path}: truncated checkpoint header")
    try:
        header = json.loads(blob[16:16 + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise MalformedFileError(f"{path}: unreadable checkpoint header: {exc}") from exc
    payload = blob[16 + n:-4]
    (crc,) = struct.unpack("<I", blob[-4:])
    if zlib.crc32(payload) != crc:
        raise ChecksumError(f"{path}: payload CRC32 mismatch (file corrupted)")
    return header, payload


def load(path) -> SResNN:
    header, payload = read_header(path)
    version = header.get("format_version")
    if version != CHECKPOINT_VERSION:
        raise MalformedFileError(
            f"{path}: checkpoint format_version {version}, expected {CHECKPOINT_VERSION}")
    config = SResnnConfig.from_dict(header["config"])
    meta = header.get("metadata", {})
    model = build(config, seed=int(meta.get("seed", 0)))
    params = dict(model.named_parameters())
    entries = {e["name"]: e for e in header["tensors"]}
    missing = set(params) - set(entries)
    extra = set(entries) - set(params)
    if missing or extra:
        raise ShapeMismatchError(
            f"checkpoint tensors do not match the config: missing {sorted(missing)}, extra {sorted(extra)}")
    for name, p in params.items():
        e = entries[name]
        if tuple(e["shape"]) != p.shape:
            raise ShapeMismatchError(
                f"tensor {name!r}: checkpoint shape {tuple(e['shape'])} != config shape {p.shape}")
        raw = payload[e["offset"]:e["offset"] + e["nbytes"]]
        if len(raw) != 4 * p.size:
            raise MalformedFileError(f"tensor {name!r}: payload truncated")
        p.value[...] = np.frombuffer(raw, dtype="<f4").reshape(p.shape)
    buffers = dict(model.named_buffers())
    for name, values in header.get("buffers", {}).items():
        if name not in buffers or len(values) != buffers[name].size:
            raise ShapeMismatchError(f"buffer {name!r} does not match the config")
        buffers[name][...] = np.asarray(values, dtype=np.float32)
    model.metadata = meta
    return model


def checkpoint_param_elements(path) -> int:
    header, _ = read_header(path)
    return sum(math.prod(e["shape"]) for e in header["tensors"])


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@dataclass
class TrainConfig:
    epochs: int = 200
    batch_size: int = 16
    lr: float = K.SGD_LR
    momentum: float = K.SGD_MOMENTUM
    weight_decay: float = K.SGD_WEIGHT_DECAY


@dataclass
class TrainReport:
    epoch_loss: list[float] = field(default_factory=list)
    epoch_accuracy: list[float] = field(default_factory=list)
    steps: int = 0

    @property
    def final_loss(self):
        return self.epoch_loss[-1] if self.epoch_loss else float("nan")

    @property
    def final_accuracy(self):
        return self.epoch_accuracy[-1] if self.epoch_accuracy else float("nan")


def fit_arrays(model: SResNN, refs, queries, labels, hp: TrainConfig = TrainConfig(), seed: int = 0,
               on_epoch: Callable[[int, float, float], None] | None = None) -> TrainReport:
    """Mini-batch SGD on (reference image, query image, label) triples."""
    refs = np.asarray(refs, dtype=model.dtype)
    queries = np.asarray(queries, dtype=model.dtype)
    labels = np.asarray(labels, dtype=int)
    n = len(labels)
    if n == 0:
        raise ValueError("training set is empty")
    rng = np.random.default_rng(seed)
    model.reseed_dropout(seed)
    params = [p for _, p in model.named_parameters()]
    report = TrainReport()
    for epoch in range(hp.epochs):
        order = rng.permutation(n)
        loss_sum, correct = 0.0, 0
        for start in range(0, n, hp.batch_size):
            idx = order[start:start + hp.batch_size]
            logits = model.forward((refs[idx], queries[idx]), train=True)
            result = K.softmax_cross_entropy(logits.astype(np.float64),
                                             K.one_hot(labels[idx], model.config.n_classes, np.float64))
            if not math.isfinite(result.loss):
                model.release()
                raise NumericalError(
                    f"non-finite loss at epoch {epoch + 1}, step {report.steps + 1} "
                    f"(lr={hp.lr}); lower the learning rate")
            model.zero_grad()
            K.backward(model, result.logit_grad.astype(model.dtype))
            K.sgd_step(params, hp.lr, hp.momentum, hp.weight_decay)
            report.steps += 1
            loss_sum += result.loss * len(idx)
            correct += int((logits.argmax(axis=1) == labels[idx]).sum())
        report.epoch_loss.append(loss_sum / n)
        report.epoch_accuracy.append(correct / n)
        if on_epoch is not None:
            on_epoch(epoch + 1, report.epoch_loss[-1], report.epoch_accuracy[-1])
    return report


def fit(model: SResNN, manifest, preprocess, hp: TrainConfig = TrainConfig(), seed: int = 0,
        on_epoch=None) -> TrainReport:
    """Train on every row of ``manifest``; ``preprocess(manifest)`` yields (refs, queries)."""
    if len(manifest) == 0:
        raise ValueError("manifest is empty")
    refs, queries = preprocess(manifest)
    return fit_arrays(model, refs, queries, manifest.labels, hp, seed, on_epoch)


# ---------------------------------------------------------------------------
# gradient checks
# ---------------------------------------------------------------------------

LAYER_TOLERANCE = 1e-4
MODEL_TOLERANCE = 1e-3


class _FrozenMaskDropout(K.Dropout):
    """Dropout that draws the same mask on every call, so finite differences see one function."""

    def __init__(self, p_drop, seed):
        super().__init__(p_drop)
        self._seed = seed

    def forward(self, x, train=False):
        self.rng = np.random.default_rng(self._seed)
        return super().forward(x, train)


def layer_check_cases(seed: int = 0):
    """(kind, layer, input) triples covering every layer kind of the branch and head."""
    rng = np.random.default_rng(seed)
    f64 = np.float64

    def x(*shape):
        return rng.standard_normal(shape)

    return [
        ("conv2d", K.Conv2d(3, 4, 3, stride=2, padding=1, rng=rng, dtype=f64), x(2, 3, 7, 7)),
        ("batchnorm2d", K.BatchNorm2d(3, dtype=f64), x(4, 3, 5, 5)),
        ("relu", K.ReLU(), x(2, 3, 4, 4)),
        ("maxpool2d", K.MaxPool2d(3, 2), x(2, 3, 9, 9)),
        ("residual_block", K.ResidualBlock(8, 3, rng=rng, dtype=f64), x(3, 8, 6, 6)),
        ("adaptive_avg_pool", K.AdaptiveAvgPool2d((2, 2)), x(2, 3, 7, 5)),
        ("flatten", K.Flatten(), x(2, 3, 2, 2)),
        ("dense", K.Dense(12, 5, rng=rng, dtype=f64), x(4, 12)),
        ("dropout", _FrozenMaskDropout(0.5, seed), x(4, 12)),
    ]


def gradient_report(config: SResnnConfig, seed: int = 0, max_entries: int = 16) -> dict:
    """Per-kind and whole-model finite-difference checks in 64-bit mode, dropout off."""
    layers = {}
    for kind, layer, inp in layer_check_cases(seed):
        layers[kind] = max(K.grad_check_report(layer, inp, max_entries=max_entries, seed=seed).values())
    net = build(replace(config, head_dropout_p=0.0), seed=seed, dtype=np.float64)
    rng = np.random.default_rng(seed)
    # a zero classifier would hide every branch gradient; give it random weights
    w = net.classifier.weight.value
    w[...] = rng.uniform(-1.0, 1.0, w.shape) * math.sqrt(3.0 / w.shape[1])
    pair = (rng.standard_normal((2, *config.input)), rng.standard_normal((2, *config.input)))
    tensors = K.grad_check_report(net, pair, max_entries=max_entries, seed=seed, check_inputs=False)
    model_max = max(tensors.values())
    return {"layers": layers, "tensors": tensors, "model_max": model_max,
            "ok": model_max <= MODEL_TOLERANCE and all(v <= LAYER_TOLERANCE for v in layers.values())}
