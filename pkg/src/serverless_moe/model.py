"""Deterministic toy MoE transformer.

Every matrix product goes through :func:`matmul_f32`, which accumulates
left to right over the shared dimension in float32. Results are therefore
independent of BLAS kernels, batch shapes and memory alignment, which is
what lets a decoupled deployment reproduce the monolithic logits bit for bit.

The forward pass is a generator (:func:`forward_steps`) that suspends at
every MoE layer with a :class:`LayerDispatch` and resumes once the routed
expert outputs are sent back. Local execution, remote execution and
multi-tenant lockstep scheduling all drive that same generator.
"""
from __future__ import annotations

import math
import re
from dataclasses import dataclass
from functools import lru_cache
from typing import Callable, Generator, Mapping, Sequence

import numpy as np

from .config import BOS_ID, EOS_ID, ModelConfig
from .rng import fnv1a64, uniform_signed

F32 = np.float32
RMS_EPS = 1e-6

ExpertEval = Callable[[int, int, np.ndarray], np.ndarray]


# --- tokenizer -------------------------------------------------------------

def tokenize(text: bytes | str, max_seq: int | None = None) -> list[int]:
    if isinstance(text, str):
        text = text.encode("utf-8")
    if max_seq is not None and len(text) >= max_seq:
        raise ValueError(f"input of {len(text)} bytes does not fit max_seq={max_seq} with BOS")
    return [BOS_ID, *text]


def detokenize(ids: Sequence[int]) -> bytes:
    return bytes(i for i in ids if i < 256)


# --- parameters ------------------------------------------------------------

@dataclass(frozen=True)
class ParamKey:
    path: str
    shape: tuple[int, int]


_EXPERT_PATH = re.compile(r"^layer(\d+)/(expert|shared)(\d+)/(w_gate|w_up|w_down)$")


def expert_path(layer: int, expert: int, matrix: str, shared: bool = False) -> str:
    kind = "shared" if shared else "expert"
    return f"layer{layer}/{kind}{expert}/{matrix}"


def param_keys(cfg: ModelConfig) -> dict[str, ParamKey]:
    """Catalog of every parameter of the model, keyed by path."""
    d, f = cfg.embed_dim, cfg.ffn_dim
    shapes: dict[str, tuple[int, int]] = {
        "embed": (cfg.vocab_size, d),
        "pos": (cfg.max_seq, d),
        "norm_f": (1, d),
    }
    for layer in range(cfg.num_layers):
        pre = f"layer{layer}/"
        shapes[pre + "norm_a"] = (1, d)
        shapes[pre + "norm_m"] = (1, d)
        for name in ("wq", "wk", "wv", "wo"):
            shapes[pre + name] = (d, d)
        shapes[pre + "router"] = (cfg.num_experts, d)
        for shared, count in ((False, cfg.num_experts), (True, cfg.num_shared)):
            for e in range(count):
                shapes[expert_path(layer, e, "w_gate", shared)] = (f, d)
                shapes[expert_path(layer, e, "w_up", shared)] = (f, d)
                shapes[expert_path(layer, e, "w_down", shared)] = (d, f)
    return {path: ParamKey(path, shape) for path, shape in shapes.items()}


def derive_param(cfg: ModelConfig, key: ParamKey | str) -> np.ndarray:
    """Materialize one parameter matrix from ``(model_seed, path)``."""
    catalog = _catalog(cfg)
    path = key if isinstance(key, str) else key.path
    if path not in catalog:
        raise KeyError(f"unknown parameter path {path!r}")
    rows, cols = catalog[path].shape
    if not isinstance(key, str) and tuple(key.shape) != (rows, cols):
        raise KeyError(f"{path}: shape {key.shape} does not match {(rows, cols)}")
    seed = fnv1a64(f"m{cfg.model_seed}/{path}")
    return uniform_signed(seed, rows * cols, 1.0 / math.sqrt(cols)).reshape(rows, cols)


@lru_cache(maxsize=16)
def _catalog(cfg: ModelConfig) -> dict[str, ParamKey]:
    return param_keys(cfg)


def is_routed_expert(path: str) -> bool:
    m = _EXPERT_PATH.match(path)
    return bool(m) and m.group(2) == "expert"


class ParamStore:
    """Lazily derived, cached parameters with residency accounting."""

    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        self._cache: dict[str, np.ndarray] = {}

    def __getitem__(self, path: str) -> np.ndarray:
        arr = self._cache.get(path)
        if arr is None:
            arr = derive_param(self.cfg, path)
            arr.setflags(write=False)
            self._cache[path] = arr
        return arr

    def materialize(self, routed_experts: bool = True) -> "ParamStore":
        for path in _catalog(self.cfg):
            if routed_experts or not is_routed_expert(path):
                self[path]
        return self

    def resident_bytes(self, routed_experts: bool | None = None) -> int:
        return sum(
            arr.nbytes
            for path, arr in self._cache.items()
            if routed_experts is None or is_routed_expert(path) == routed_experts
        )

    def expert_weights(self, layer: int, expert: int, shared: bool = False):
        return tuple(self[expert_path(layer, expert, m, shared)] for m in ("w_gate", "w_up", "w_down"))


@lru_cache(maxsize=16)
def default_params(cfg: ModelConfig) -> ParamStore:
    return ParamStore(cfg)


# --- kernels ---------------------------------------------------------------

def matmul_f32(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """``a @ b`` in float32, summing products left to right over the inner axis."""
    a = np.asarray(a, dtype=F32)
    b = np.asarray(b, dtype=F32)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"cannot multiply shapes {a.shape} and {b.shape}")
    acc = np.zeros((a.shape[0], b.shape[1]), dtype=F32)
    for j in range(a.shape[1]):
        acc += a[:, j, None] * b[None, j, :]
    return acc


def rms_norm(x: np.ndarray, gain: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=F32)
    gain = np.asarray(gain, dtype=F32).reshape(-1)
    if x.shape[-1] != gain.shape[0]:
        raise ValueError(f"dimension mismatch: {x.shape[-1]} vs gain {gain.shape[0]}")
    mean_sq = np.mean(np.square(x.astype(np.float64)), axis=-1, keepdims=True)
    denom = np.sqrt(mean_sq + RMS_EPS).astype(F32)
    return (x * gain) / denom


def softmax(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=F32)
    e = np.exp(x - np.max(x, axis=-1, keepdims=True))
    # sequential sum: masked (zero) tail entries leave a prefix row's total unchanged
    return e / np.cumsum(e, axis=-1)[..., -1:]


def silu(x: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        return x / (F32(1) + np.exp(-x))


def ffn(x: np.ndarray, w_gate: np.ndarray, w_up: np.ndarray, w_down: np.ndarray) -> np.ndarray:
    """Gated expert FFN over a batch of rows (or a single vector)."""
    x = np.asarray(x, dtype=F32)
    rows = x.reshape(1, -1) if x.ndim == 1 else x
    if rows.shape[1] != w_gate.shape[1]:
        raise ValueError(f"dimension mismatch: {rows.shape[1]} vs {w_gate.shape[1]}")
    hidden = silu(matmul_f32(rows, w_gate.T)) * matmul_f32(rows, w_up.T)
    out = matmul_f32(hidden, w_down.T)
    return out[0] if x.ndim == 1 else out


def causal_attention(h, wq, wk, wv, wo) -> np.ndarray:
    h = np.asarray(h, dtype=F32)
    if h.ndim != 2 or h.shape[0] < 1 or h.shape[1] != wq.shape[0]:
        raise ValueError(f"attention input must be tokens x {wq.shape[0]}, got {h.shape}")
    q, k, v = matmul_f32(h, wq), matmul_f32(h, wk), matmul_f32(h, wv)
    scores = matmul_f32(q, k.T) / F32(math.sqrt(h.shape[1]))
    n = h.shape[0]
    scores[np.triu_indices(n, 1)] = -np.inf
    return matmul_f32(matmul_f32(softmax(scores), v), wo)


# --- model operations ------------------------------------------------------

@dataclass(frozen=True)
class GateDecision:
    token_index: int
    layer: int
    selected: tuple[int, ...]
    weights: tuple[float, ...]


def attention(h: np.ndarray, layer: int, cfg: ModelConfig, params: ParamStore | None = None) -> np.ndarray:
    p = params or default_params(cfg)
    pre = f"layer{layer}/"
    return causal_attention(h, p[pre + "wq"], p[pre + "wk"], p[pre + "wv"], p[pre + "wo"])


def top_k(probs: np.ndarray, k: int) -> tuple[int, ...]:
    """Indices of the ``k`` largest probabilities, ties to the lower index, ascending."""
    ranked = sorted(range(len(probs)), key=lambda i: (-float(probs[i]), i))
    return tuple(sorted(ranked[:k]))


def gate(
    x_norm: np.ndarray,
    layer: int,
    cfg: ModelConfig,
    params: ParamStore | None = None,
    token_index: int = 0,
) -> GateDecision:
    p = params or default_params(cfg)
    x = np.asarray(x_norm, dtype=F32)
    if x.shape != (cfg.embed_dim,):
        raise ValueError(f"gate input must have length {cfg.embed_dim}")
    probs = softmax(matmul_f32(x[None, :], p[f"layer{layer}/router"].T)[0])
    selected = top_k(probs, cfg.top_k)
    chosen = probs[list(selected)].astype(np.float64)
    weights = tuple(float(w) for w in chosen / chosen.sum())
    return GateDecision(token_index, layer, selected, weights)


def expert_ffn(
    x: np.ndarray,
    layer: int,
    expert: int,
    cfg: ModelConfig,
    params: ParamStore | None = None,
    shared: bool = False,
) -> np.ndarray:
    limit = cfg.num_shared if shared else cfg.num_experts
    if not 0 <= expert < limit:
        raise IndexError(f"{'shared' if shared else 'routed'} expert {expert} out of range")
    p = params or default_params(cfg)
    return ffn(x, *p.expert_weights(layer, expert, shared))


def combine(
    x_norm: np.ndarray,
    decision: GateDecision,
    routed: Mapping[int, np.ndarray],
    cfg: ModelConfig,
    params: ParamStore | None = None,
    shared_out: Sequence[np.ndarray] | None = None,
) -> np.ndarray:
    """Sum shared experts (ascending) then routed experts (ascending index) in f32."""
    out = np.zeros(cfg.embed_dim, dtype=F32)
    if shared_out is None:
        shared_out = [expert_ffn(x_norm, decision.layer, s, cfg, params, shared=True) for s in range(cfg.num_shared)]
    for y in shared_out:
        out += y
    for expert, weight in zip(decision.selected, decision.weights):
        y = np.asarray(routed[expert], dtype=F32)
        if y.shape != (cfg.embed_dim,):
            raise ValueError(f"expert {expert} returned shape {y.shape}")
        out += F32(weight) * y
    return out


def moe_layer(
    x_norm: np.ndarray,
    layer: int,
    cfg: ModelConfig,
    expert_eval: ExpertEval,
    params: ParamStore | None = None,
) -> np.ndarray:
    decision = gate(x_norm, layer, cfg, params)
    routed = {e: expert_eval(layer, e, x_norm) for e in decision.selected}
    return combine(x_norm, decision, routed, cfg, params)


@dataclass
class LayerDispatch:
    """Routing work for one MoE layer: send back one ``{expert: output}`` per token."""

    layer: int
    decisions: list[GateDecision]
    activations: np.ndarray

    def pairs(self):
        for d in self.decisions:
            for e in d.selected:
                yield d.token_index, e


Routed = list[dict[int, np.ndarray]]


def forward_steps(
    ids: Sequence[int], cfg: ModelConfig, params: ParamStore | None = None
) -> Generator[LayerDispatch, Routed, np.ndarray]:
    p = params or default_params(cfg)
    ids = list(ids)
    if not ids or ids[0] != BOS_ID or len(ids) > cfg.max_seq:
        raise ValueError("token sequence must start with BOS and fit max_seq")
    if any(not 0 <= i < cfg.vocab_size for i in ids):
        raise ValueError("token id outside vocabulary")
    n = len(ids)
    h = p["embed"][ids] + p["pos"][:n]
    for layer in range(cfg.num_layers):
        pre = f"layer{layer}/"
        h = h + attention(rms_norm(h, p[pre + "norm_a"]), layer, cfg, p)
        xn = rms_norm(h, p[pre + "norm_m"])
        decisions = [gate(xn[t], layer, cfg, p, token_index=t) for t in range(n)]
        shared = [expert_ffn(xn, layer, s, cfg, p, shared=True) for s in range(cfg.num_shared)]
        routed = yield LayerDispatch(layer, decisions, xn)
        if len(routed) != n:
            raise ValueError(f"expected routed outputs for {n} tokens, got {len(routed)}")
        moe = np.stack([
            combine(xn[t], decisions[t], routed[t], cfg, p, [s[t] for s in shared]) for t in range(n)
        ])
        h = h + moe
    return matmul_f32(rms_norm(h, p["norm_f"]), p["embed"].T)


def local_resolver(cfg: ModelConfig, params: ParamStore | None = None) -> Callable[[LayerDispatch], Routed]:
    """Evaluate a dispatch in-process, batching tokens per expert."""
    p = params or default_params(cfg)

    def resolve(req: LayerDispatch) -> Routed:
        routed: Routed = [{} for _ in req.decisions]
        by_expert: dict[int, list[int]] = {}
        for t, e in req.pairs():
            by_expert.setdefault(e, []).append(t)
        for e, tokens in sorted(by_expert.items()):
            out = expert_ffn(req.activations[tokens], req.layer, e, cfg, p)
            for row, t in enumerate(tokens):
                routed[t][e] = out[row]
        return routed

    return resolve


def callable_resolver(expert_eval: ExpertEval) -> Callable[[LayerDispatch], Routed]:
    def resolve(req: LayerDispatch) -> Routed:
        routed: Routed = [{} for _ in req.decisions]
        for t, e in req.pairs():
            routed[t][e] = expert_eval(req.layer, e, req.activations[t])
        return routed

    return resolve


def drive(steps: Generator, resolve: Callable):
    """Run a step generator to completion, answering each yielded request with ``resolve``."""
    try:
        request = next(steps)
        while True:
            request = steps.send(resolve(request))
    except StopIteration as stop:
        return stop.value


def forward(
    tokens: Sequence[int],
    cfg: ModelConfig,
    expert_eval: ExpertEval | None = None,
    params: ParamStore | None = None,
) -> np.ndarray:
    resolve = callable_resolver(expert_eval) if expert_eval else local_resolver(cfg, params)
    return drive(forward_steps(tokens, cfg, params), resolve)


def generate_steps(
    prompt: bytes | str, max_new: int, cfg: ModelConfig, params: ParamStore | None = None
) -> Generator[LayerDispatch, Routed, list[int]]:
    """Greedy decoding with full-prefix recomputation; returns the new token ids."""
    if max_new < 0:
        raise ValueError("max_new must be >= 0")
    ids = tokenize(prompt, cfg.max_seq)
    new: list[int] = []
    while len(new) < max_new and len(ids) < cfg.max_seq:
        logits = yield from forward_steps(ids, cfg, params)
        nxt = int(np.argmax(logits[-1]))
        if nxt == EOS_ID:
            break
        ids.append(nxt)
        new.append(nxt)
    return new


def generate(
    prompt: bytes | str,
    max_new: int,
    cfg: ModelConfig,
    expert_eval: ExpertEval | None = None,
    params: ParamStore | None = None,
) -> bytes:
    resolve = callable_resolver(expert_eval) if expert_eval else local_resolver(cfg, params)
    return detokenize(drive(generate_steps(prompt, max_new, cfg, params), resolve))
