"""The graph convolutional classifier: architecture grammar, parameters,
forward/backward passes and checkpoints.

Layer tokens: ``C`` graph convolution (Chebyshev filter, batch norm,
Softplus), ``P`` stride-2 graph max pooling, ``F`` fully connected with
Softplus, ``S`` softmax head. ``(C-P)x6-S`` expands to six conv/pool
pairs followed by the head.
"""

from __future__ import annotations

import hashlib
import json
import os
import re
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import expit

from .chebyshev import ChebConvParams, cheb_basis, cheb_conv_backward, cheb_conv_forward
from .coarsening import CoarseningPlan, masked_max_pool, masked_max_pool_backward, max_levels, permute_input

__all__ = [
    "ArchError",
    "CheckpointError",
    "ModelSpec",
    "ParameterSet",
    "parse_arch",
    "format_arch",
    "init_params",
    "count_params",
    "forward",
    "backward",
    "softplus",
    "softmax",
    "save_checkpoint",
    "load_checkpoint",
]

BN_EPS = 1e-5
BN_MOMENTUM = 0.9


class ArchError(ValueError):
    """Architecture string or spec does not fit the grammar or the graph."""


class CheckpointError(ValueError):
    pass


# ---------------------------------------------------------------------------
# architecture grammar

_TOKEN = re.compile(r"\s*(\(|\)|[CPFS]|[x×]\s*\d+|-)\s*", re.IGNORECASE)


def _tokenize(text: str) -> list[str]:
    pos, out = 0, []
    text = text.strip()
    while pos < len(text):
        m = _TOKEN.match(text, pos)
        if not m:
            raise ArchError(f"unknown token at {text[pos:]!r} in {text!r}")
        out.append(m.group(1).upper().replace(" ", ""))
        pos = m.end()
    return out


def _parse_seq(tokens: list[str], i: int, text: str, depth: int) -> tuple[list[str], int]:
    layers: list[str] = []
    expect_item = True
    while i < len(tokens):
        tok = tokens[i]
        if tok == ")":
            if depth == 0:
                raise ArchError(f"unbalanced ')' in {text!r}")
            return layers, i
        if expect_item:
            if tok == "(":
                inner, i = _parse_seq(tokens, i + 1, text, depth + 1)
                if i >= len(tokens) or tokens[i] != ")":
                    raise ArchError(f"unclosed '(' in {text!r}")
                if not inner:
                    raise ArchError(f"empty group in {text!r}")
                i += 1
                reps = 1
                if i < len(tokens) and tokens[i][0] in "X×":
                    reps = int(tokens[i][1:])
                    if reps < 1:
                        raise ArchError(f"repetition count must be >= 1 in {text!r}")
                    i += 1
                layers.extend(inner * reps)
            elif tok in ("C", "P", "F", "S"):
                layers.append(tok)
                i += 1
                if i < len(tokens) and tokens[i][0] in "X×":
                    raise ArchError(f"repetition without group after {tok!r} in {text!r}")
            elif tok[0] in "X×":
                raise ArchError(f"repetition without group in {text!r}")
            else:
                raise ArchError(f"unexpected {tok!r} in {text!r}")
            expect_item = False
        else:
            if tok != "-":
                raise ArchError(f"expected '-' before {tok!r} in {text!r}")
            i += 1
            expect_item = True
    if expect_item and layers:
        raise ArchError(f"dangling '-' in {text!r}")
    if depth:
        raise ArchError(f"unclosed '(' in {text!r}")
    return layers, i


def parse_arch(text: str) -> list[str]:
    """Expand a framework string such as ``(C-C-P)x2-C-P-S`` to a flat layer list."""
    layers, _ = _parse_seq(_tokenize(text), 0, text, 0)
    if not layers or layers[-1] != "S":
        raise ArchError(f"architecture {text!r} must end with the softmax head 'S'")
    if layers.count("S") != 1:
        raise ArchError(f"architecture {text!r} has more than one 'S'")
    if "F" in layers:
        first_fc = layers.index("F")
        if any(t in ("C", "P") for t in layers[first_fc:]):
            raise ArchError(f"graph layers cannot follow a fully-connected layer in {text!r}")
    return layers


def format_arch(layers) -> str:
    return "-".join(layers)


@dataclass(frozen=True)
class ModelSpec:
    arch: str
    filters: tuple[int, ...]
    order: int
    n_classes: int
    fc_sizes: tuple[int, ...] = ()
    dropout_rate: float = 0.5
    input_channels: int = 1
    layers: tuple[str, ...] = field(init=False)

    def __post_init__(self):
        layers = tuple(parse_arch(self.arch))
        object.__setattr__(self, "layers", layers)
        object.__setattr__(self, "filters", tuple(int(f) for f in self.filters))
        object.__setattr__(self, "fc_sizes", tuple(int(f) for f in self.fc_sizes))
        if layers.count("C") != len(self.filters):
            raise ArchError(f"{layers.count('C')} conv layers but {len(self.filters)} filter counts")
        if layers.count("F") != len(self.fc_sizes):
            raise ArchError(f"{layers.count('F')} FC layers but {len(self.fc_sizes)} FC sizes")
        if self.order < 1:
            raise ArchError("polynomial order K must be >= 1")
        if self.n_classes < 2:
            raise ArchError("at least 2 classes are required")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ArchError("dropout rate must lie in [0, 1)")
        if self.input_channels != 1:
            raise ArchError("each node carries exactly one scalar per sample")
        if any(f < 1 for f in self.filters + self.fc_sizes):
            raise ArchError("layer widths must be positive")

    @property
    def n_pool(self) -> int:
        return self.layers.count("P")

    def check_graph(self, n_nodes: int) -> None:
        limit = max_levels(n_nodes)
        if self.n_pool > limit:
            raise ArchError(
                f"{self.n_pool} pooling layers exceed floor(log2 {n_nodes}) = {limit} for {n_nodes} channels"
            )

    def to_dict(self) -> dict:
        return {
            "arch": self.arch,
            "filters": list(self.filters),
            "order": self.order,
            "n_classes": self.n_classes,
            "fc_sizes": list(self.fc_sizes),
            "dropout_rate": self.dropout_rate,
            "input_channels": self.input_channels,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        return cls(
            arch=d["arch"],
            filters=tuple(d["filters"]),
            order=int(d["order"]),
            n_classes=int(d["n_classes"]),
            fc_sizes=tuple(d.get("fc_sizes", ())),
            dropout_rate=float(d.get("dropout_rate", 0.5)),
            input_channels=int(d.get("input_channels", 1)),
        )


# ---------------------------------------------------------------------------
# parameters


@dataclass
class ParameterSet:
    """Named tensors plus Adam moments for the trainable ones."""

    tensors: dict[str, np.ndarray]
    trainable: tuple[str, ...]
    regularized: tuple[str, ...]
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0

    def __post_init__(self):
        for name in self.trainable:
            self.m.setdefault(name, np.zeros_like(self.tensors[name]))
            self.v.setdefault(name, np.zeros_like(self.tensors[name]))

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def copy(self) -> "ParameterSet":
        return ParameterSet(
            {k: t.copy() for k, t in self.tensors.items()},
            self.trainable,
            self.regularized,
            {k: t.copy() for k, t in self.m.items()},
            {k: t.copy() for k, t in self.v.items()},
            self.step,
        )

    def l2_sum(self) -> float:
        return float(sum(np.sum(self.tensors[n] ** 2) for n in self.regularized))


def _level_sizes(plan) -> list[int]:
    return list(plan.sizes) if isinstance(plan, CoarseningPlan) else [int(s) for s in plan]


def _layer_shapes(spec: ModelSpec, sizes: list[int]) -> list[tuple[str, str, tuple[int, ...]]]:
    """(name, role, shape) for every tensor, in initialization order."""
    if spec.n_pool > len(sizes) - 1:
        raise ArchError(f"spec has {spec.n_pool} pooling layers but the plan only {len(sizes) - 1} levels")
    shapes = []
    level, width = 0, spec.input_channels
    n_conv = n_fc = 0
    flat = None
    for tok in spec.layers:
        if tok == "C":
            f_out = spec.filters[n_conv]
            shapes += [
                (f"conv{n_conv}.theta", "weight", (width, f_out, spec.order)),
                (f"conv{n_conv}.bias", "bias", (sizes[level], f_out)),
                (f"bn{n_conv}.gamma", "gamma", (f_out,)),
                (f"bn{n_conv}.beta", "beta", (f_out,)),
                (f"bn{n_conv}.running_mean", "running_mean", (f_out,)),
                (f"bn{n_conv}.running_var", "running_var", (f_out,)),
            ]
            width = f_out
            n_conv += 1
        elif tok == "P":
            level += 1
        else:
            if flat is None:
                flat = sizes[level] * width
            out = spec.fc_sizes[n_fc] if tok == "F" else spec.n_classes
            name = f"fc{n_fc}" if tok == "F" else "head"
            shapes += [(f"{name}.weight", "weight", (flat, out)), (f"{name}.bias", "bias", (out,))]
            flat = out
            n_fc += tok == "F"
    return shapes


def init_params(spec: ModelSpec, plan, seed: int = 0) -> ParameterSet:
    """Glorot-uniform weights (conv fan-in counts ``F_in * K``), zero biases,
    unit BN scale."""
    rng = np.random.default_rng(seed)
    tensors, trainable, regularized = {}, [], []
    for name, role, shape in _layer_shapes(spec, _level_sizes(plan)):
        if role == "weight":
            if len(shape) == 3:
                fan_in, fan_out = shape[0] * shape[2], shape[1]
            else:
                fan_in, fan_out = shape
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            t = rng.uniform(-limit, limit, size=shape)
        elif role in ("gamma", "running_var"):
            t = np.ones(shape)
        else:
            t = np.zeros(shape)
        tensors[name] = t
        if role in ("weight", "bias", "gamma", "beta"):
            trainable.append(name)
        if role in ("weight", "bias"):
            regularized.append(name)
    return ParameterSet(tensors, tuple(trainable), tuple(regularized))


def count_params(spec: ModelSpec, plan) -> dict[str, int]:
    """Trainable parameter counts from the layer shape formulas.

    Returns a breakdown (``conv_weights``, ``conv_bias``, ``batch_norm``,
    ``fc_weights``, ``fc_bias``, ``head_weights``, ``head_bias``) plus
    ``total``.
    """
    counts = dict.fromkeys(
        ("conv_weights", "conv_bias", "batch_norm", "fc_weights", "fc_bias", "head_weights", "head_bias"), 0
    )
    for name, role, shape in _layer_shapes(spec, _level_sizes(plan)):
        size = int(np.prod(shape))
        if name.startswith("conv"):
            counts["conv_weights" if role == "weight" else "conv_bias"] += size
        elif role in ("gamma", "beta"):
            counts["batch_norm"] += size
        elif name.startswith("fc"):
            counts["fc_weights" if role == "weight" else "fc_bias"] += size
        elif name.startswith("head"):
            counts["head_weights" if role == "weight" else "head_bias"] += size
    counts["total"] = sum(counts.values())
    return counts


# ---------------------------------------------------------------------------
# forward / backward


def softplus(x):
    """``log(1 + e^x)`` without overflow."""
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


@dataclass
class ForwardCache:
    mode: str
    params: ParameterSet
    spec: ModelSpec
    plan: CoarseningPlan
    records: list = field(default_factory=list)
    probs: np.ndarray | None = None
    running: dict[str, np.ndarray] = field(default_factory=dict)


def forward(params: ParameterSet, spec: ModelSpec, plan: CoarseningPlan, batch, mode: str = "eval", rng=None):
    """Run the network on ``batch`` (B x N raw samples).

    Returns ``(logits, probabilities, cache)``. In train mode batch norm uses
    batch statistics over valid nodes and the updated running statistics are
    placed in ``cache.running`` (the parameters themselves are not touched).
    ``rng`` (a Generator or a seed) drives dropout in train mode.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    x = np.asarray(batch, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != plan.n_nodes:
        raise ValueError(f"batch must be B x {plan.n_nodes}, got shape {x.shape}")
    train = mode == "train"
    if train and x.shape[0] < 2:
        raise ValueError("train mode needs at least 2 samples for batch statistics")
    if train and not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    cache = ForwardCache(mode, params, spec, plan)
    h = permute_input(x, plan)[..., None]  # (B, N0, 1)
    level = 0
    n_conv = n_fc = 0
    flat = False
    for tok in spec.layers:
        mask = plan.valid_mask[level]
        if tok == "C":
            p = ChebConvParams(params[f"conv{n_conv}.theta"], params[f"conv{n_conv}.bias"])
            lap = plan.operators[level]
            basis = cheb_basis(lap, h, spec.order)
            z = cheb_conv_forward(p, basis)
            gamma, beta = params[f"bn{n_conv}.gamma"], params[f"bn{n_conv}.beta"]
            if train:
                zv = z[:, mask, :]
                count = zv.shape[0] * zv.shape[1]
                mu = zv.mean(axis=(0, 1))
                var = ((zv - mu) ** 2).mean(axis=(0, 1))
                rm, rv = params[f"bn{n_conv}.running_mean"], params[f"bn{n_conv}.running_var"]
                unbiased = var * count / max(count - 1, 1)
                cache.running[f"bn{n_conv}.running_mean"] = BN_MOMENTUM * rm + (1 - BN_MOMENTUM) * mu
                cache.running[f"bn{n_conv}.running_var"] = BN_MOMENTUM * rv + (1 - BN_MOMENTUM) * unbiased
            else:
                mu, var = params[f"bn{n_conv}.running_mean"], params[f"bn{n_conv}.running_var"]
            std = np.sqrt(var + BN_EPS)
            xhat = (z - mu) / std
            y = gamma * xhat + beta
            h = softplus(y)
            cache.records.append(("C", n_conv, level, basis, xhat, std, y))
            n_conv += 1
        elif tok == "P":
            h, _, choice = masked_max_pool(h, mask, return_choice=True)
            cache.records.append(("P", level, choice))
            level += 1
        else:
            if not flat:
                shape = h.shape
                h = (h * mask[:, None]).reshape(shape[0], -1)
                cache.records.append(("flatten", level, shape))
                flat = True
            keep = None
            if train and spec.dropout_rate > 0:
                keep = (rng.random(h.shape) >= spec.dropout_rate) / (1.0 - spec.dropout_rate)
                h = h * keep
            name = f"fc{n_fc}" if tok == "F" else "head"
            z = h @ params[f"{name}.weight"] + params[f"{name}.bias"]
            cache.records.append((tok, name, h, keep, z))
            if tok == "F":
                h = softplus(z)
                n_fc += 1
            else:
                h = z
    logits = h
    cache.probs = softmax(logits)
    return logits, cache.probs, cache


def backward(cache: ForwardCache, labels, l2_lambda: float = 0.0) -> dict[str, np.ndarray]:
    """Exact gradients of mean cross-entropy plus ``l2_lambda * sum(w^2 + b^2)``."""
    params, plan = cache.params, cache.plan
    labels = np.asarray(labels, dtype=np.int64)
    probs = cache.probs
    if labels.shape != (probs.shape[0],):
        raise ValueError(f"{labels.shape[0]} labels for a batch of {probs.shape[0]}")
    if cache.mode != "train":
        raise ValueError("backward requires a cache from a train-mode forward pass")
    b = probs.shape[0]
    g = probs.copy()
    g[np.arange(b), labels] -= 1.0
    g /= b
    grads: dict[str, np.ndarray] = {}
    for rec in reversed(cache.records):
        kind = rec[0]
        if kind in ("F", "S"):
            _, name, h_in, keep, z = rec
            if kind == "F":
                g = g * expit(z)
            grads[f"{name}.weight"] = h_in.T @ g
            grads[f"{name}.bias"] = g.sum(axis=0)
            g = g @ params[f"{name}.weight"].T
            if keep is not None:
                g = g * keep
        elif kind == "flatten":
            _, level, shape = rec
            g = g.reshape(shape) * plan.valid_mask[level][:, None]
        elif kind == "P":
            _, level, choice = rec
            g = masked_max_pool_backward(g, choice, plan.valid_mask[level + 1])
        else:
            _, idx, level, basis, xhat, std, y = rec
            mask = plan.valid_mask[level]
            g = g * expit(y)
            gamma = params[f"bn{idx}.gamma"]
            grads[f"bn{idx}.gamma"] = (g * xhat).sum(axis=(0, 1))
            grads[f"bn{idx}.beta"] = g.sum(axis=(0, 1))
            gx = g * gamma
            count = g.shape[0] * int(mask.sum())
            # mean and variance come from valid nodes only; fakes still depend on them
            d_mu = -gx.sum(axis=(0, 1)) / std
            d_var = -0.5 * (gx * xhat).sum(axis=(0, 1)) / std**2
            gz = gx / std
            gz[:, mask, :] += (d_mu + 2.0 * d_var * xhat[:, mask, :] * std) / count
            p = ChebConvParams(params[f"conv{idx}.theta"], params[f"conv{idx}.bias"])
            need_x = idx > 0
            gt, gb, gxin = cheb_conv_backward(p, basis, gz, plan.operators[level] if need_x else None)
            grads[f"conv{idx}.theta"] = gt
            grads[f"conv{idx}.bias"] = gb
            g = gxin
            if g is None:
                # nothing trainable precedes the first conv layer
                break
    if l2_lambda:
        for name in params.regularized:
            grads[name] = grads[name] + 2.0 * l2_lambda * params[name]
    return {name: grads[name] for name in params.trainable}


# ---------------------------------------------------------------------------
# checkpoints

CHECKPOINT_MAGIC = b"GCNM"
CHECKPOINT_VERSION = 1


def _write_tensor(fh, name: str, arr: np.ndarray) -> None:
    raw = name.encode("utf-8")
    arr = np.asarray(arr, dtype="<f8")
    fh.write(struct.pack("<H", len(raw)) + raw)
    fh.write(struct.pack("<B", arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
    fh.write(np.ascontiguousarray(arr).tobytes())


def save_checkpoint(path, params: ParameterSet, spec: ModelSpec, coarsening_seed: int, fingerprint: int, meta=None) -> None:
    """Binary checkpoint, written to a temp file and renamed into place.

    Layout: ``GCNM`` | u16 version | u32 len + UTF-8 JSON (spec, meta,
    trainable/regularized names) | u64 coarsening seed | u64 graph
    fingerprint | u32 tensor count | tensors as (u16 name len, name, u8 rank,
    u64 dims, float64 LE values).
    """
    path = Path(path)
    doc = {
        "spec": spec.to_dict(),
        "meta": meta or {},
        "trainable": list(params.trainable),
        "regularized": list(params.regularized),
        "adam_step": params.step,
    }
    text = json.dumps(doc, sort_keys=True).encode("utf-8")
    entries = list(params.tensors.items())
    entries += [(f"adam.m/{k}", params.m[k]) for k in params.trainable]
    entries += [(f"adam.v/{k}", params.v[k]) for k in params.trainable]
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC + struct.pack("<H", CHECKPOINT_VERSION))
        fh.write(struct.pack("<I", len(text)) + text)
        fh.write(struct.pack("<QQ", coarsening_seed, fingerprint))
        fh.write(struct.pack("<I", len(entries)))
        for name, arr in entries:
            _write_tensor(fh, name, arr)
    os.replace(tmp, path)


def load_checkpoint(path, expected_fingerprint: int | None = None):
    """Return ``(params, spec, coarsening_seed, fingerprint, meta)``.

    Raises :class:`CheckpointError` on a malformed file or when
    ``expected_fingerprint`` differs from the stored one.
    """
    blob = Path(path).read_bytes()
    try:
        if blob[:4] != CHECKPOINT_MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint (magic {blob[:4]!r})")
        (version,) = struct.unpack_from("<H", blob, 4)
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
        off = 6
        (n_text,) = struct.unpack_from("<I", blob, off)
        off += 4
        doc = json.loads(blob[off : off + n_text].decode("utf-8"))
        off += n_text
        seed, fingerprint = struct.unpack_from("<QQ", blob, off)
        off += 16
        (n_tensors,) = struct.unpack_from("<I", blob, off)
        off += 4
        tensors = {}
        for _ in range(n_tensors):
            (n_name,) = struct.unpack_from("<H", blob, off)
            off += 2
            name = blob[off : off + n_name].decode("utf-8")
            off += n_name
            (rank,) = struct.unpack_from("<B", blob, off)
            off += 1
            dims = struct.unpack_from(f"<{rank}Q", blob, off)
            off += 8 * rank
            count = int(np.prod(dims)) if rank else 1
            if off + 8 * count > len(blob):
                raise CheckpointError(f"{path}: truncated tensor {name!r}")
            tensors[name] = np.frombuffer(blob, dtype="<f8", count=count, offset=off).reshape(dims).copy()
            off += 8 * count
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError, KeyError) as exc:
        raise CheckpointError(f"{path}: malformed checkpoint ({exc})") from exc
    if expected_fingerprint is not None and expected_fingerprint != fingerprint:
        raise CheckpointError(
            f"graph fingerprint mismatch: checkpoint {fingerprint:016x}, data {expected_fingerprint:016x}"
        )
    spec = ModelSpec.from_dict(doc["spec"])
    m = {k.split("/", 1)[1]: t for k, t in tensors.items() if k.startswith("adam.m/")}
    v = {k.split("/", 1)[1]: t for k, t in tensors.items() if k.startswith("adam.v/")}
    plain = {k: t for k, t in tensors.items() if not k.startswith("adam.")}
    params = ParameterSet(plain, tuple(doc["trainable"]), tuple(doc["regularized"]), m, v, int(doc["adam_step"]))
    return params, spec, seed, fingerprint, doc["meta"]


def file_digest(path) -> str:
    """64-bit blake2b digest of a file's bytes, as hex."""
    h = hashlib.blake2b(digest_size=8)
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def spec_replace(spec: ModelSpec, **changes) -> ModelSpec:
    d = spec.to_dict()
    d.update(changes)
    return ModelSpec.from_dict(d)

