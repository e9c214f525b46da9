import numpy as np
import pytest

from serverless_moe.config import pack_blocks
from serverless_moe.expert import ExpertService, RoutingError, handle, init_block, serve_experts
from serverless_moe.httpio import HttpClient
from serverless_moe.model import derive_param, expert_ffn
from serverless_moe.protocol import (
    ExpertBatchRequest,
    ExpertWorkItem,
    ProtocolError,
    decode_response,
    encode_request,
)


def _req(layer, block, pairs, seed=0, d=32, rng_seed=0):
    rng = np.random.default_rng(rng_seed)
    items = tuple(ExpertWorkItem(i, e, rng.standard_normal(d).astype(np.float32)) for i, e in enumerate(pairs))
    return ExpertBatchRequest(seed, layer, block, items)


def test_whole_layer_block(toy):
    host = init_block(toy, 1, 0, pack_blocks(toy, 8))
    assert host.hosted == tuple(range(8))
    assert host.resident_bytes == 8 * toy.expert_bytes()


def test_short_block_residency(toy):
    host = init_block(toy, 0, 2, pack_blocks(toy, 3))
    assert host.hosted == (6, 7)
    assert host.resident_bytes == 2 * 3 * 64 * 32 * 4


def test_weights_match_derivation(toy):
    host = init_block(toy, 2, 1, pack_blocks(toy, 3))
    assert np.array_equal(host.weights[5][0], derive_param(toy, "layer2/expert5/w_gate"))


def test_zero_activation(toy):
    host = init_block(toy, 0, 0, pack_blocks(toy, 3))
    req = ExpertBatchRequest(0, 0, 0, (ExpertWorkItem(0, 1, np.zeros(32, np.float32)),))
    assert not handle(req, host).items[0].output.any()


def test_batch_bit_equal_to_local(toy):
    host = init_block(toy, 3, 1, pack_blocks(toy, 3))
    req = _req(3, 1, [3, 4, 5, 4, 3, 3, 5])
    resp = handle(req, host)
    assert [r.token_ref for r in resp.items] == list(range(7))
    for item, res in zip(req.items, resp.items):
        assert res.expert == item.expert
        assert np.array_equal(res.output, expert_ffn(item.activation, 3, item.expert, toy))


def test_unhosted_expert_rejected(toy):
    host = init_block(toy, 0, 0, pack_blocks(toy, 3))
    with pytest.raises(RoutingError):
        handle(_req(0, 0, [0, 1, 6]), host)


def test_wrong_block_and_seed(toy):
    host = init_block(toy, 0, 0, pack_blocks(toy, 3))
    with pytest.raises(RoutingError):
        handle(_req(1, 0, [0]), host)
    with pytest.raises(ProtocolError):
        handle(_req(0, 0, [0], seed=1), host)
    with pytest.raises(ProtocolError):
        handle(_req(0, 0, [0], d=31), host)


def test_unknown_block(toy):
    with pytest.raises(RoutingError):
        init_block(toy, 0, 3, pack_blocks(toy, 3))


def test_service_for_model(toy):
    bm = pack_blocks(toy, 3)
    svc = ExpertService.for_model(toy, bm)
    assert svc.stats()["resident_bytes"] == toy.routed_expert_bytes()
    out = decode_response(svc.invoke("exp-l2-b2", encode_request(_req(2, 2, [6, 7]))))
    assert len(out.items) == 2 and svc.stats()["requests_served"] == 1
    with pytest.raises(KeyError):
        svc.invoke(None, encode_request(_req(2, 2, [6])))


def test_http_worker(toy):
    bm = pack_blocks(toy, 3)
    server = serve_experts(ExpertService.for_block(toy, bm, 0, 0))
    client = HttpClient()
    try:
        req = _req(0, 0, [0, 2])
        status, body = client.request("POST", server.url + "/invoke", encode_request(req))
        assert status == 200
        out = decode_response(body)
        assert np.array_equal(out.items[1].output, expert_ffn(req.items[1].activation, 0, 2, toy))
        status, _ = client.request("POST", server.url + "/invoke", encode_request(_req(0, 0, [5])))
        assert status == 400
        status, _ = client.request("POST", server.url + "/invoke", b"junk")
        assert status == 400
        stats = client.get_json(server.url + "/stats")
        assert stats["hosted"] == {"exp-l0-b0": [0, 1, 2]} and stats["requests_served"] == 1
    finally:
        client.close()
        server.shutdown()
