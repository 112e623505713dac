import json
from pathlib import Path

import httpx
import numpy as np
import pytest
from fastapi import FastAPI, HTTPException
from fastapi.testclient import TestClient

from selfroute.backend import (
    BackendSpec,
    DEFAULT_LONG_ACCURACY,
    Q7B_SHORT_ACCURACY,
    SyntheticBackend,
    SyntheticBackendConfig,
    WireBackend,
    gaussian_capability_layers,
    general_synthetic_config,
    make_backend,
    parse_query_tags,
    reasoning_synthetic_config,
    synthetic_gold,
)
from selfroute.core import grade
from selfroute.errors import (
    CapabilityError,
    ConfigError,
    DomainError,
    ProtocolError,
    TransportError,
)
from wire_stub import build_wire_app

SCHEMA_DIR = Path(__file__).resolve().parent.parent / "schemas"


def tagged(i: int, level: int) -> str:
    return f"[id=t{level}-{i}] [level={level}] Work out problem {i}."


class TestQueryTags:
    def test_tagged(self):
        assert parse_query_tags("[id=abc-1] [level=4] solve it") == ("abc-1", 4)

    def test_untagged_is_stable_and_level3(self):
        qid, level = parse_query_tags("What is 2+2?")
        qid2, _ = parse_query_tags("What is 2+2?")
        assert qid == qid2
        assert qid.startswith("anon-")
        assert level == 3
        qid3, _ = parse_query_tags("What is 3+3?")
        assert qid3 != qid

    def test_gold_is_three_digits(self):
        for i in range(50):
            g = synthetic_gold(f"q{i}")
            assert g == synthetic_gold(f"q{i}")
            assert 100 <= int(g) <= 999


class TestSyntheticConfig:
    def test_level_coverage_required(self):
        with pytest.raises(ConfigError):
            SyntheticBackendConfig(per_level_accuracy={1: 0.5, 2: 0.5})

    def test_accuracy_range(self):
        bad = dict(Q7B_SHORT_ACCURACY)
        bad[3] = 1.2
        with pytest.raises(ConfigError):
            general_synthetic_config(accuracy=bad)

    def test_signal_layers_bounds(self):
        with pytest.raises(ConfigError):
            general_synthetic_config(signal_layers=(9,), embedding_layers=8)

    def test_signal_layers_sorted_deduped(self):
        cfg = general_synthetic_config(signal_layers=(6, 5, 6))
        assert cfg.signal_layers == (5, 6)


class TestSyntheticGeneration:
    def test_budget_one_truncates(self, general_backend):
        res = general_backend.generate(tagged(0, 3), 1)
        assert res.completion_tokens == 1
        assert res.truncated is True
        assert "answer is" not in res.text

    def test_determinism(self, general_backend):
        a = general_backend.generate(tagged(1, 2), 4096)
        b = general_backend.generate(tagged(1, 2), 4096)
        assert a == b
        pa = general_backend.probe(tagged(1, 2), 256)
        pb = general_backend.probe(tagged(1, 2), 256)
        assert pa.generation == pb.generation
        for va, vb in zip(pa.layers, pb.layers):
            assert va.dtype == np.float32
            assert np.array_equal(va, vb)

    def test_trial_seeds_are_independent_draws(self, general_backend):
        canonical = general_backend.generate(tagged(2, 3), 4096)
        outcomes = set()
        for s in range(40):
            r = general_backend.generate(tagged(2, 3), 4096, seed=s)
            outcomes.add(r.text)
        # at level 3 (p=0.6) forty independent trials produce both answers
        assert len(outcomes) == 2
        assert general_backend.generate(tagged(2, 3), 4096) == canonical

    def test_canonical_level1_accuracy(self, general_backend):
        hits = 0
        n = 2000
        for i in range(n):
            q = tagged(i, 1)
            res = general_backend.generate(q, 4096)
            qid, _ = parse_query_tags(q)
            hits += grade(res.text, synthetic_gold(qid))
        assert abs(hits / n - Q7B_SHORT_ACCURACY[1]) < 0.02

    def test_trial_stream_level1_accuracy(self, general_backend):
        q = tagged(0, 1)
        qid, _ = parse_query_tags(q)
        gold = synthetic_gold(qid)
        hits = sum(
            grade(general_backend.generate(q, 4096, seed=s).text, gold) for s in range(2000)
        )
        assert abs(hits / 2000 - Q7B_SHORT_ACCURACY[1]) < 0.02

    def test_completion_token_mean_level3(self, general_backend):
        draws = [general_backend.generate(tagged(i, 3), 4096).completion_tokens for i in range(800)]
        assert abs(np.mean(draws) - 700.0) < 5.0
        assert min(draws) >= 1

    def test_long_tokens_dominate_short(self, general_backend, reasoning_backend):
        for level in range(1, 6):
            short = np.mean(
                [general_backend.generate(tagged(i, level), 10**6).completion_tokens for i in range(100)]
            )
            long = np.mean(
                [reasoning_backend.generate(tagged(i, level), 10**6).completion_tokens for i in range(100)]
            )
            assert long > short

    def test_comonotone_across_kinds(self, general_backend, reasoning_backend):
        # shared solvability coin: the weaker model never solves a query
        # the stronger one misses
        for level in range(1, 6):
            for i in range(200):
                q = tagged(i, level)
                qid, _ = parse_query_tags(q)
                s = general_backend.canonical_solvable(qid, level)
                l = reasoning_backend.canonical_solvable(qid, level)
                assert not (s and not l)

    def test_equal_accuracy_equal_canonical_outcomes(self):
        acc = dict(DEFAULT_LONG_ACCURACY)
        g = SyntheticBackend(
            BackendSpec("g", "general"), general_synthetic_config(0, accuracy=acc)
        )
        r = SyntheticBackend(
            BackendSpec("r", "reasoning", default_max_tokens=32768),
            reasoning_synthetic_config(0, accuracy=acc),
        )
        for i in range(500):
            qid, level = parse_query_tags(tagged(i, (i % 5) + 1))
            assert g.canonical_solvable(qid, level) == r.canonical_solvable(qid, level)

    def test_trial_stream_keyed_by_kind(self):
        acc = dict(DEFAULT_LONG_ACCURACY)
        g = SyntheticBackend(
            BackendSpec("g", "general"), general_synthetic_config(0, accuracy=acc)
        )
        r = SyntheticBackend(
            BackendSpec("r", "reasoning", default_max_tokens=32768),
            reasoning_synthetic_config(0, accuracy=acc),
        )
        q = tagged(0, 3)
        gold = synthetic_gold(parse_query_tags(q)[0])
        gs = [grade(g.generate(q, 4096, seed=s).text, gold) for s in range(200)]
        rs = [grade(r.generate(q, 4096, seed=s).text, gold) for s in range(200)]
        assert gs != rs

    def test_prompt_tokens_floor(self, general_backend):
        assert general_backend.generate("[id=x] [level=1] ab", 4096).prompt_tokens >= 1

    def test_max_tokens_validation(self, general_backend):
        with pytest.raises(DomainError):
            general_backend.generate(tagged(0, 1), 0)


class TestSyntheticEmbeddings:
    def test_shape_and_card(self, general_backend):
        card = general_backend.advertise()
        assert (card.layers, card.dim, card.probe_capable) == (8, 64, True)
        probe = general_backend.probe(tagged(0, 1), 256)
        assert len(probe.layers) == card.layers
        assert all(v.shape == (card.dim,) for v in probe.layers)

    def test_probe_token_mean(self, general_backend):
        draws = [
            general_backend.probe(tagged(i, (i % 5) + 1), 4096).generation.completion_tokens
            for i in range(600)
        ]
        assert abs(np.mean(draws) - 120.0) < 2.5

    def test_signal_layer_class_shift(self):
        cfg = general_synthetic_config(0)
        d = cfg.embedding_dim
        pos, neg = [], []
        for i in range(400):
            pos.append(gaussian_capability_layers(cfg, f"p{i}", True)[4])  # layer 5
            neg.append(gaussian_capability_layers(cfg, f"n{i}", False)[4])
        diff = float(np.mean(pos) - np.mean(neg))
        expected = cfg.class_separation / np.sqrt(d)
        assert abs(diff - expected) < 0.03

    def test_non_signal_layers_class_free(self):
        cfg = general_synthetic_config(0)
        for i in range(50):
            a = gaussian_capability_layers(cfg, f"q{i}", True)
            b = gaussian_capability_layers(cfg, f"q{i}", False)
            for layer in range(1, cfg.embedding_layers + 1):
                va, vb = a[layer - 1], b[layer - 1]
                if layer in cfg.signal_layers:
                    assert not np.array_equal(va, vb)
                else:
                    assert np.array_equal(va, vb)


def _wire_pair(backend, **stub_kwargs):
    app = build_wire_app(backend, **stub_kwargs)
    spec = BackendSpec(backend.spec.name, backend.spec.kind, endpoint="http://testserver")
    return WireBackend(spec, client=TestClient(app))


class TestWireBackend:
    def test_round_trip_matches_direct_calls(self, general_backend):
        wire = _wire_pair(general_backend)
        q = tagged(7, 2)
        assert wire.generate(q, 512, seed=3) == general_backend.generate(q, 512, seed=3)
        wp = wire.probe(q, 256)
        dp = general_backend.probe(q, 256)
        assert wp.generation == dp.generation
        for a, b in zip(wp.layers, dp.layers):
            assert np.array_equal(a, b)

    def test_card_round_trip(self, general_backend):
        wire = _wire_pair(general_backend)
        card = wire.advertise()
        direct = general_backend.advertise()
        assert (card.layers, card.dim, card.probe_capable) == (
            direct.layers,
            direct.dim,
            direct.probe_capable,
        )
        assert wire.advertise() is card  # cached

    def test_missing_card_route_means_no_probe(self, general_backend):
        wire = _wire_pair(general_backend, include_card=False)
        card = wire.advertise()
        assert card.probe_capable is False
        with pytest.raises(CapabilityError):
            wire.probe(tagged(0, 1), 64)
        # plain generation still works
        assert wire.generate(tagged(0, 1), 64).completion_tokens >= 1

    def test_malformed_generation_payload(self, general_backend):
        wire = _wire_pair(general_backend, mangle={"completion_tokens": None})
        with pytest.raises(ProtocolError):
            wire.generate(tagged(0, 1), 64)

    def test_wrong_layer_count_rejected(self):
        lying = FastAPI()

        @lying.post("/v1/probe")
        def probe(payload: dict) -> dict:  # pragma: no cover - exercised via client
            return {
                "text": "x",
                "prompt_tokens": 1,
                "completion_tokens": 1,
                "truncated": False,
                "layers": [[0.0] * 64] * 3,  # card says 8
            }

        @lying.get("/v1/card")
        def card() -> dict:
            return {"model_name": "liar", "layers": 8, "dim": 64, "probe_capable": True}

        wire = WireBackend(
            BackendSpec("liar", "general", endpoint="http://testserver"),
            client=TestClient(lying),
        )
        with pytest.raises(ProtocolError, match="layers"):
            wire.probe(tagged(0, 1), 64)

    def test_server_error_is_transport_error(self, general_backend):
        flag = {"on": True}
        wire = _wire_pair(general_backend, fail_generate=flag)
        with pytest.raises(TransportError):
            wire.generate(tagged(0, 1), 64)
        flag["on"] = False
        assert wire.generate(tagged(0, 1), 64).completion_tokens >= 1

    def test_client_error_is_protocol_error(self):
        app = FastAPI()

        @app.post("/v1/generate")
        def generate(payload: dict) -> dict:
            raise HTTPException(status_code=422, detail="bad request shape")

        wire = WireBackend(
            BackendSpec("picky", "general", endpoint="http://testserver"),
            client=TestClient(app),
        )
        with pytest.raises(ProtocolError):
            wire.generate("x", 64)

    def test_unreachable_endpoint(self):
        spec = BackendSpec(
            "dead", "general", endpoint="http://127.0.0.1:9", request_timeout=0.2
        )
        wire = WireBackend(spec)
        try:
            with pytest.raises(TransportError):
                wire.generate("x", 16)
        finally:
            wire.close()

    def test_synthetic_endpoint_rejected(self):
        with pytest.raises(ConfigError):
            WireBackend(BackendSpec("s", "general"))

    def test_make_backend_dispatch(self, general_backend):
        assert isinstance(make_backend(BackendSpec("a", "general")), SyntheticBackend)
        wire = make_backend(
            BackendSpec("b", "reasoning", endpoint="http://testserver"),
            client=TestClient(build_wire_app(general_backend)),
        )
        assert isinstance(wire, WireBackend)


@pytest.fixture(scope="module")
def schema_client():
    backend = SyntheticBackend(
        BackendSpec("schema-check", "general"), general_synthetic_config(0)
    )
    return TestClient(build_wire_app(backend))


class TestWireSchemas:
    """Stub responses must satisfy the published wire schemas."""

    @staticmethod
    def _schema(name: str) -> dict:
        return json.loads((SCHEMA_DIR / f"{name}.schema.json").read_text())

    def test_generate_schema(self, schema_client):
        import jsonschema

        req = {"prompt": tagged(0, 2), "max_tokens": 128, "seed": 5}
        jsonschema.validate(req, self._schema("generate_request"))
        body = schema_client.post("/v1/generate", json=req).json()
        jsonschema.validate(body, self._schema("generate_response"))

    def test_probe_schema(self, schema_client):
        import jsonschema

        body = schema_client.post(
            "/v1/probe", json={"prompt": tagged(0, 2), "max_tokens": 128}
        ).json()
        jsonschema.validate(body, self._schema("probe_response"))
        assert len(body["layers"]) == 8

    def test_card_schema(self, schema_client):
        import jsonschema

        body = schema_client.get("/v1/card").json()
        jsonschema.validate(body, self._schema("card"))
