"""Decoder-only transformer with top-k routed mixture-of-experts feed-forwards."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from . import _accel
from .tensor import Tensor, no_grad, ops


class RoutingError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 64
    n_layer: int = 2
    n_head: int = 4
    d_attn: int = 64
    d_ff: int = 256
    n_experts: int = 8
    n_topk: int = 2
    n_vocab: int = 512
    n_ctx: int = 64
    ff_matrices: int = 2
    seed: int = 0
    dtype: str = "float32"

    def __post_init__(self):
        for name in ("d_model", "n_layer", "n_head", "d_attn", "d_ff", "n_experts", "n_topk", "n_vocab"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.n_ctx < 0:
            raise ValueError("n_ctx must be >= 0")
        if not 1 <= self.n_topk <= self.n_experts:
            raise ValueError("need 1 <= n_topk <= n_experts")
        if self.d_attn % self.n_head:
            raise ValueError("d_attn must be divisible by n_head")
        if self.ff_matrices not in (2, 3):
            raise ValueError("ff_matrices must be 2 or 3")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> ModelConfig:
        return cls(**d)

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


@dataclass
class ExpertMask:
    """Boolean keep matrix of shape (n_layer, n_experts)."""

    keep: np.ndarray

    def __post_init__(self):
        self.keep = np.array(self.keep, dtype=bool)
        if self.keep.ndim != 2:
            raise ValueError("ExpertMask.keep must be 2-D (n_layer, n_experts)")

    @classmethod
    def full(cls, n_layer: int, n_experts: int) -> ExpertMask:
        return cls(np.ones((n_layer, n_experts), dtype=bool))

    @classmethod
    def from_kept(cls, kept: list[list[int]], n_experts: int) -> ExpertMask:
        keep = np.zeros((len(kept), n_experts), dtype=bool)
        for layer, idx in enumerate(kept):
            keep[layer, list(idx)] = True
        return cls(keep)

    @property
    def n_layer(self) -> int:
        return self.keep.shape[0]

    @property
    def n_experts(self) -> int:
        return self.keep.shape[1]

    def kept_per_layer(self) -> list[int]:
        return [int(c) for c in self.keep.sum(axis=1)]

    def kept(self) -> list[list[int]]:
        return [[int(j) for j in np.flatnonzero(row)] for row in self.keep]

    @property
    def n_kept(self) -> int:
        return int(self.keep.sum())

    def check_feasible(self, k: int) -> None:
        low = min(self.kept_per_layer())
        if k > low:
            raise RoutingError(f"k={k} exceeds the {low} experts kept in some layer")

    def __eq__(self, other) -> bool:
        return isinstance(other, ExpertMask) and np.array_equal(self.keep, other.keep)


@dataclass
class RoutingRecord:
    """Routing decisions of one MoE layer for a flat batch of tokens."""

    layer: int
    gate_probs: np.ndarray  # (N, n_experts), 0 on masked experts
    selected: np.ndarray  # (N, k)
    combine_weights: np.ndarray  # (N, k)
    gate_tensor: Tensor | None = field(default=None, repr=False, compare=False)

    @property
    def n_tokens(self) -> int:
        return self.gate_probs.shape[0]

    @property
    def k(self) -> int:
        return self.selected.shape[1]


def _keep_vector(mask, n_experts: int) -> np.ndarray:
    if mask is None:
        return np.ones(n_experts, dtype=bool)
    keep = np.asarray(mask, dtype=bool)
    if keep.shape != (n_experts,):
        raise RoutingError(f"mask has shape {keep.shape}, expected ({n_experts},)")
    return keep


def select_experts(logits: np.ndarray, k: int, keep: np.ndarray) -> np.ndarray:
    """Top-k kept experts per row of ``logits`` (N, E)."""
    n_kept = int(keep.sum())
    if not 1 <= k <= n_kept:
        raise RoutingError(f"k={k} but only {n_kept} experts are kept")
    # ranking masked logits orders exactly like ranking the renormalized probabilities
    ranked = np.where(keep[None, :], logits.astype(np.float64), -np.inf)
    return _accel.topk_rows(ranked, k)


def route(router_logits, k: int, mask=None) -> RoutingRecord:
    """Route a single token: masked softmax, top-k selection, renormalized weights."""
    logits = np.asarray(router_logits, dtype=np.float64)
    if logits.ndim != 1:
        raise RoutingError("route expects a vector of router logits")
    if not np.all(np.isfinite(logits)):
        raise RoutingError("router logits must be finite")
    rec = route_batch(logits[None, :], k, _keep_vector(mask, logits.size))
    return rec


def route_batch(logits: np.ndarray, k: int, keep: np.ndarray, layer: int = 0) -> RoutingRecord:
    logits = np.asarray(logits, dtype=np.float64)
    with no_grad():
        probs = ops.softmax(Tensor(logits), mask=keep[None, :]).data
    selected = select_experts(logits, k, keep)
    sel = np.take_along_axis(logits, selected, axis=1)
    w = np.exp(sel - sel.max(axis=1, keepdims=True))
    w /= w.sum(axis=1, keepdims=True)
    return RoutingRecord(layer, probs, selected, w)


# --- parameters -----------------------------------------------------------


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    shapes: dict[str, tuple[int, ...]] = {
        "embed.tok": (cfg.n_vocab, cfg.d_model),
        "embed.pos": (max(cfg.n_ctx, 1), cfg.d_model),
    }
    for l in range(cfg.n_layer):
        p = f"layers.{l}"
        shapes[f"{p}.ln1.g"] = (cfg.d_model,)
        shapes[f"{p}.ln1.b"] = (cfg.d_model,)
        shapes[f"{p}.attn.qkv"] = (cfg.d_model, 3 * cfg.d_attn)
        shapes[f"{p}.attn.proj"] = (cfg.d_attn, cfg.d_model)
        shapes[f"{p}.ln2.g"] = (cfg.d_model,)
        shapes[f"{p}.ln2.b"] = (cfg.d_model,)
        shapes[f"{p}.moe.gate"] = (cfg.d_model, cfg.n_experts)
        for j in range(cfg.n_experts):
            shapes[f"{p}.moe.experts.{j}.w_in"] = (cfg.d_model, cfg.d_ff)
            shapes[f"{p}.moe.experts.{j}.w_out"] = (cfg.d_ff, cfg.d_model)
    shapes["ln_f.g"] = (cfg.d_model,)
    shapes["ln_f.b"] = (cfg.d_model,)
    shapes["unembed"] = (cfg.d_model, cfg.n_vocab)
    return shapes


def init_params(cfg: ModelConfig) -> dict[str, np.ndarray]:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, unit LN gains, zero LN biases."""
    if cfg.ff_matrices != 2:
        raise ValueError("the trainable model implements the two-matrix expert only")
    rng = np.random.default_rng(cfg.seed)
    dtype = np.dtype(cfg.dtype)
    params: dict[str, np.ndarray] = {}
    for name, shape in param_shapes(cfg).items():
        if name.endswith(".g"):
            params[name] = np.ones(shape, dtype=dtype)
        elif name.endswith(".b"):
            params[name] = np.zeros(shape, dtype=dtype)
        else:
            fan_in = shape[1] if name.startswith("embed.") else shape[0]
            bound = 1.0 / math.sqrt(fan_in)
            params[name] = rng.uniform(-bound, bound, size=shape).astype(dtype)
    return params


def is_router_param(name: str) -> bool:
    return name.endswith(".moe.gate")


# --- forward --------------------------------------------------------------


def expert_forward(x: Tensor, w_in: Tensor, w_out: Tensor) -> Tensor:
    return ops.gelu(x @ w_in) @ w_out


def moe_forward(
    features: Tensor,
    params: dict[str, Tensor],
    layer: int,
    k: int,
    keep: np.ndarray,
) -> tuple[Tensor, RoutingRecord]:
    """Sparse MoE block over flat tokens (N, d_model); only selected experts run."""
    p = f"layers.{layer}.moe"
    gate = params[f"{p}.gate"]
    n_experts = gate.shape[1]
    keep = _keep_vector(keep, n_experts)
    if features.ndim != 2 or features.shape[1] != gate.shape[0]:
        raise ValueError(f"features must be (N, {gate.shape[0]}), got {features.shape}")
    logits = features @ gate
    probs = ops.softmax(logits, mask=keep[None, :])
    selected = select_experts(logits.data, k, keep)
    weights = ops.softmax(ops.take_along_last(logits, selected))
    n = features.shape[0]
    parts, rows_list = [], []
    for j in range(n_experts):
        rows, slot = np.nonzero(selected == j)
        if rows.size == 0:
            continue
        xj = ops.take_rows(features, rows)
        hj = expert_forward(xj, params[f"{p}.experts.{j}.w_in"], params[f"{p}.experts.{j}.w_out"])
        wj = ops.reshape(ops.take_along_last(ops.take_rows(weights, rows), slot[:, None]), (rows.size, 1))
        parts.append(hj * wj)
        rows_list.append(rows)
    out = ops.scatter_rows_sum(parts, rows_list, n)
    record = RoutingRecord(layer, probs.data, selected, weights.data, gate_tensor=probs)
    return out, record


def moe_forward_dense(features: Tensor, params: dict[str, Tensor], layer: int, k: int, keep) -> np.ndarray:
    """Reference: run every expert on every token, zero the unselected mixtures."""
    p = f"layers.{layer}.moe"
    gate = params[f"{p}.gate"].data
    x = features.data.astype(np.float64)
    keep = _keep_vector(keep, gate.shape[1])
    logits = x @ gate
    rec = route_batch(logits, k, keep, layer)
    dense_w = np.zeros_like(logits)
    np.put_along_axis(dense_w, rec.selected, rec.combine_weights, axis=1)
    out = np.zeros_like(x)
    for j in range(gate.shape[1]):
        w_in = params[f"{p}.experts.{j}.w_in"].data
        w_out = params[f"{p}.experts.{j}.w_out"].data
        with no_grad():
            h = expert_forward(Tensor(x), Tensor(w_in), Tensor(w_out)).data
        out += dense_w[:, j : j + 1] * h
    return out


def attention(x: Tensor, params: dict[str, Tensor], layer: int, n_head: int) -> Tensor:
    b, t, d = x.shape
    p = f"layers.{layer}.attn"
    qkv = params[f"{p}.qkv"]
    d_attn = qkv.shape[1] // 3
    dh = d_attn // n_head
    h = ops.reshape(x @ qkv, (b, t, 3, n_head, dh))
    h = ops.transpose(h, (2, 0, 3, 1, 4))  # (3, B, H, T, dh)
    flat = ops.reshape(h, (3, b * n_head * t * dh))

    def part(i):
        return ops.reshape(ops.take_rows(flat, np.array([i])), (b * n_head, t, dh))

    q, kk, v = part(0), part(1), part(2)
    scores = ops.matmul(q, ops.transpose(kk, (0, 2, 1))) * (1.0 / math.sqrt(dh))
    causal = np.tril(np.ones((t, t), dtype=bool))[None, :, :]
    attn = ops.softmax(scores, mask=causal)
    ctx = ops.matmul(attn, v)  # (B*H, T, dh)
    ctx = ops.transpose(ops.reshape(ctx, (b, n_head, t, dh)), (0, 2, 1, 3))
    ctx = ops.reshape(ctx, (b, t, d_attn))
    return ctx @ params[f"{p}.proj"]


@dataclass
class ForwardResult:
    logits: Tensor  # (B, T, n_vocab)
    records: list[RoutingRecord]


class MoEModel:
    """Parameters plus configuration; ``forward`` builds a fresh graph each call."""

    def __init__(self, config: ModelConfig, params: dict[str, np.ndarray] | None = None):
        self.config = config
        arrays = init_params(config) if params is None else params
        expected = param_shapes(config)
        if set(arrays) != set(expected):
            missing = sorted(set(expected) ^ set(arrays))
            raise ValueError(f"parameter names do not match config: {missing[:5]}")
        dtype = np.dtype(config.dtype)
        self.params: dict[str, Tensor] = {}
        for name in expected:
            arr = np.ascontiguousarray(arrays[name], dtype=dtype)
            if arr.shape != expected[name]:
                raise ValueError(f"{name}: shape {arr.shape} != {expected[name]}")
            self.params[name] = Tensor(arr.copy(), requires_grad=True)

    def arrays(self) -> dict[str, np.ndarray]:
        return {n: t.data for n, t in self.params.items()}

    def copy(self) -> MoEModel:
        return MoEModel(self.config, {n: a.copy() for n, a in self.arrays().items()})

    def checksum(self, names=None) -> str:
        h = hashlib.sha256()
        for n in names if names is not None else self.params:
            h.update(n.encode())
            h.update(np.ascontiguousarray(self.params[n].data).tobytes())
        return h.hexdigest()

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    def forward(self, tokens, mask: ExpertMask | None = None, k_per_layer=None) -> ForwardResult:
        cfg = self.config
        tokens = np.asarray(tokens, dtype=np.int64)
        if tokens.ndim == 1:
            tokens = tokens[None, :]
        b, t = tokens.shape
        if t > cfg.n_ctx:
            raise ValueError(f"sequence length {t} exceeds n_ctx={cfg.n_ctx}")
        if tokens.size and (tokens.min() < 0 or tokens.max() >= cfg.n_vocab):
            raise IndexError(f"token id out of range [0, {cfg.n_vocab})")
        if mask is None:
            mask = ExpertMask.full(cfg.n_layer, cfg.n_experts)
        if mask.keep.shape != (cfg.n_layer, cfg.n_experts):
            raise ValueError("mask shape does not match model")
        ks = _resolve_k(k_per_layer, cfg)
        P = self.params
        x = ops.add(ops.embedding(P["embed.tok"], tokens), ops.embedding(P["embed.pos"], np.arange(t)))
        records = []
        for l in range(cfg.n_layer):
            pre = f"layers.{l}"
            h = ops.layer_norm(x, P[f"{pre}.ln1.g"], P[f"{pre}.ln1.b"])
            x = x + attention(h, P, l, cfg.n_head)
            h = ops.layer_norm(x, P[f"{pre}.ln2.g"], P[f"{pre}.ln2.b"])
            y, rec = moe_forward(ops.reshape(h, (b * t, cfg.d_model)), P, l, ks[l], mask.keep[l])
            records.append(rec)
            x = x + ops.reshape(y, (b, t, cfg.d_model))
        h = ops.layer_norm(x, P["ln_f.g"], P["ln_f.b"])
        logits = h @ P["unembed"]
        return ForwardResult(logits, records)


def _resolve_k(k_per_layer, cfg: ModelConfig) -> list[int]:
    if k_per_layer is None:
        return [cfg.n_topk] * cfg.n_layer
    if isinstance(k_per_layer, (int, np.integer)):
        return [int(k_per_layer)] * cfg.n_layer
    ks = [int(k) for k in k_per_layer]
    if len(ks) != cfg.n_layer:
        raise ValueError("k_per_layer length must equal n_layer")
    return ks


def model_forward(tokens, model: MoEModel, mask: ExpertMask | None = None, k_per_layer=None):
    """Next-token logits (B, T, n_vocab) and one RoutingRecord per MoE layer."""
    res = model.forward(tokens, mask, k_per_layer)
    return res.logits, res.records


# --- checkpoints ----------------------------------------------------------

CHECKPOINT_FORMAT = "moelab-checkpoint/1"


def save_checkpoint(model: MoEModel, path, extra: dict[str, Any] | None = None) -> Path:
    """Write ``<path>`` (JSON manifest) and ``<path>.bin`` (little-endian float32)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    blob_path = path.with_name(path.name + ".bin")
    entries, chunks, offset = [], [], 0
    for name, t in model.params.items():
        buf = np.ascontiguousarray(t.data, dtype="<f4").tobytes()
        entries.append({"name": name, "shape": list(t.shape), "offset": offset, "nbytes": len(buf)})
        chunks.append(buf)
        offset += len(buf)
    blob = b"".join(chunks)
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "config": model.config.to_dict(),
        "seed": model.config.seed,
        "blob": blob_path.name,
        "blob_sha256": hashlib.sha256(blob).hexdigest(),
        "params": entries,
        "extra": extra or {},
    }
    blob_path.write_bytes(blob)
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def load_checkpoint(path) -> tuple[MoEModel, dict[str, Any]]:
    path = Path(path)
    manifest = json.loads(path.read_text())
    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not a moelab checkpoint")
    blob = (path.parent / manifest["blob"]).read_bytes()
    if hashlib.sha256(blob).hexdigest() != manifest["blob_sha256"]:
        raise ValueError(f"{path}: blob hash mismatch")
    cfg = ModelConfig.from_dict(manifest["config"])
    params = {}
    for e in manifest["params"]:
        raw = np.frombuffer(blob, dtype="<f4", count=int(np.prod(e["shape"])), offset=e["offset"])
        params[e["name"]] = raw.reshape(e["shape"]).astype(cfg.dtype)
    return MoEModel(cfg, params), manifest.get("extra", {})
