"""Wire format for batched expert invocation.

Both messages are compact JSON objects whose keys appear in a fixed order.
Every float vector travels as base64 of its little-endian IEEE-754 float32
bytes, so values survive transport bit for bit.

Request::

    {"v":1,"model_seed":0,"layer":2,"block":1,
     "items":[{"token_ref":17,"expert":4,"activation":"AACAPw..."}]}

Response::

    {"v":1,"items":[{"token_ref":17,"expert":4,"output":"AACAPw..."}]}
"""
from __future__ import annotations

import base64
import binascii
import json
from dataclasses import dataclass

import numpy as np

PROTOCOL_VERSION = 1
_LE_F32 = np.dtype("<f4")
_U64_MAX = 2**64 - 1


class ProtocolError(ValueError):
    """Malformed, mismatched or unsupported message."""


@dataclass(frozen=True)
class ExpertWorkItem:
    token_ref: int
    expert: int
    activation: np.ndarray


@dataclass(frozen=True)
class ExpertBatchRequest:
    model_seed: int
    layer: int
    block: int
    items: tuple[ExpertWorkItem, ...]


@dataclass(frozen=True)
class ExpertResult:
    token_ref: int
    expert: int
    output: np.ndarray


@dataclass(frozen=True)
class ExpertBatchResponse:
    items: tuple[ExpertResult, ...]


def encode_vector(vec: np.ndarray) -> str:
    return base64.b64encode(np.asarray(vec, dtype=_LE_F32).tobytes()).decode("ascii")


def decode_vector(text) -> np.ndarray:
    if not isinstance(text, str):
        raise ProtocolError("vector must be a base64 string")
    try:
        raw = base64.b64decode(text.encode("ascii"), validate=True)
    except (binascii.Error, UnicodeEncodeError) as exc:
        raise ProtocolError(f"malformed base64: {exc}") from None
    if len(raw) % 4:
        raise ProtocolError(f"vector byte length {len(raw)} is not a multiple of 4")
    return np.frombuffer(raw, dtype=_LE_F32).astype(np.float32)


def _check_request(req: ExpertBatchRequest) -> None:
    if not req.items:
        raise ProtocolError("request must carry at least one item")
    refs = [it.token_ref for it in req.items]
    if len(set(refs)) != len(refs):
        raise ProtocolError("token_ref values must be unique within a batch")
    dims = {np.asarray(it.activation).shape for it in req.items}
    if len(dims) != 1 or len(next(iter(dims))) != 1:
        raise ProtocolError("activations must be vectors of one common length")


def _dump(obj) -> bytes:
    return json.dumps(obj, separators=(",", ":")).encode("utf-8")


def encode_request(req: ExpertBatchRequest) -> bytes:
    _check_request(req)
    return _dump({
        "v": PROTOCOL_VERSION,
        "model_seed": req.model_seed,
        "layer": req.layer,
        "block": req.block,
        "items": [
            {"token_ref": it.token_ref, "expert": it.expert, "activation": encode_vector(it.activation)}
            for it in req.items
        ],
    })


def encode_response(resp: ExpertBatchResponse) -> bytes:
    return _dump({
        "v": PROTOCOL_VERSION,
        "items": [
            {"token_ref": it.token_ref, "expert": it.expert, "output": encode_vector(it.output)}
            for it in resp.items
        ],
    })


def _load(data: bytes, keys: tuple[str, ...]) -> dict:
    try:
        obj = json.loads(data)
    except (ValueError, RecursionError) as exc:
        raise ProtocolError(f"malformed envelope: {exc.__class__.__name__}") from None
    if not isinstance(obj, dict):
        raise ProtocolError("envelope must be an object")
    if "v" in obj and (type(obj["v"]) is not int or obj["v"] != PROTOCOL_VERSION):
        raise ProtocolError(f"unsupported protocol version {obj['v']!r}")
    if set(obj) != set(keys):
        raise ProtocolError(f"envelope keys must be {list(keys)}")
    return obj


def _uint(obj: dict, key: str, limit: int = _U64_MAX) -> int:
    value = obj.get(key)
    if type(value) is not int or not 0 <= value <= limit:
        raise ProtocolError(f"{key} must be an unsigned integer")
    return value


def _items(obj: dict, vector_key: str) -> list[tuple[int, int, np.ndarray]]:
    items = obj["items"]
    if not isinstance(items, list):
        raise ProtocolError("items must be a list")
    out = []
    for item in items:
        if not isinstance(item, dict) or set(item) != {"token_ref", "expert", vector_key}:
            raise ProtocolError(f"item keys must be token_ref, expert, {vector_key}")
        out.append((_uint(item, "token_ref"), _uint(item, "expert", 2**31), decode_vector(item[vector_key])))
    return out


def decode_request(data: bytes) -> ExpertBatchRequest:
    obj = _load(data, ("v", "model_seed", "layer", "block", "items"))
    items = tuple(ExpertWorkItem(r, e, v) for r, e, v in _items(obj, "activation"))
    req = ExpertBatchRequest(_uint(obj, "model_seed"), _uint(obj, "layer", 2**31), _uint(obj, "block", 2**31), items)
    _check_request(req)
    return req


def decode_response(data: bytes) -> ExpertBatchResponse:
    obj = _load(data, ("v", "items"))
    return ExpertBatchResponse(tuple(ExpertResult(r, e, v) for r, e, v in _items(obj, "output")))
