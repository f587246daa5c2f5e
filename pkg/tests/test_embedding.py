import json
import threading
import time
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from trialmatch.embedding import (
    EmbeddingCache,
    ENDPOINT_ENV_VAR,
    HttpProvider,
    MockProvider,
    embed_texts,
    embed_tokens,
    http_embed,
    mock_embed,
    resolve_endpoint,
)
from trialmatch.errors import (
    CacheFormatError,
    ConfigError,
    DataError,
    DimensionMismatchError,
    ProviderResponseError,
    ProviderStatusError,
    ProviderTimeoutError,
    ProviderError,
)
from trialmatch.representation import mean_pool


# ---------------------------------------------------------------------------
# mock embedder
# ---------------------------------------------------------------------------

class TestMockEmbed:
    def test_unit_norm(self):
        for text in ("fever", "fever and chills", "a b c d e f g"):
            vec = mock_embed(text, dim=32, seed=0)
            assert abs(np.linalg.norm(vec) - 1.0) < 1e-9

    def test_bit_identical(self):
        a = mock_embed("fever chills", dim=16, seed=3)
        b = mock_embed("fever chills", dim=16, seed=3)
        assert np.array_equal(a, b)

    def test_dim_and_seed_matter(self):
        assert mock_embed("x", dim=8, seed=0).shape == (8,)
        a = mock_embed("x y", dim=8, seed=0)
        b = mock_embed("x y", dim=8, seed=1)
        assert not np.array_equal(a, b)

    def test_dim_too_small(self):
        with pytest.raises(ConfigError):
            mock_embed("x", dim=1)

    def test_no_tokens(self):
        with pytest.raises(DataError):
            mock_embed("   ", dim=8)

    def test_shared_tokens_raise_cosine(self):
        # Lexical overlap must beat disjoint vocabulary nearly always.
        rng = np.random.default_rng(42)
        hits = 0
        for trial in range(100):
            words = [f"w{rng.integers(1_000_000)}" for _ in range(4)]
            shared_a = mock_embed(f"{words[0]} {words[1]}", dim=32, seed=7)
            shared_b = mock_embed(f"{words[0]} {words[2]}", dim=32, seed=7)
            disjoint = mock_embed(f"{words[3]} w_other_{trial}", dim=32, seed=7)
            if float(shared_a @ shared_b) > float(shared_a @ disjoint):
                hits += 1
        assert hits >= 99


class TestMockProvider:
    def test_repeated_text_identical(self):
        provider = MockProvider(dim=64, seed=0)
        a, b = embed_texts(provider, ["a", "a"])
        assert np.array_equal(a, b)

    def test_shape_contract(self):
        provider = MockProvider(dim=64, seed=0)
        for vec in embed_texts(provider, ["x", "y z"]):
            assert vec.shape == (64,)

    def test_batch_invariance(self):
        provider = MockProvider(dim=32, seed=5)
        batch = embed_texts(provider, ["a", "b"])
        single_a = embed_texts(provider, ["a"])[0]
        single_b = embed_texts(provider, ["b"])[0]
        assert np.array_equal(batch[0], single_a)
        assert np.array_equal(batch[1], single_b)

    def test_matches_mock_embed(self):
        provider = MockProvider(dim=16, seed=9)
        assert np.allclose(
            embed_texts(provider, ["fever chills"])[0],
            mock_embed("fever chills", dim=16, seed=9),
            atol=1e-12,
        )

    def test_empty_inputs_rejected(self):
        provider = MockProvider(dim=8)
        with pytest.raises(DataError):
            embed_texts(provider, [])
        with pytest.raises(DataError):
            embed_texts(provider, ["ok", ""])


class TestEmbedTokens:
    def test_row_per_token(self):
        provider = MockProvider(dim=16, seed=0)
        matrix = embed_tokens(provider, "a b c")
        assert matrix.shape == (3, 16)

    def test_single_token_equals_mean_pool(self):
        provider = MockProvider(dim=16, seed=0)
        matrix = embed_tokens(provider, "solo")
        assert np.array_equal(mean_pool(matrix).values, matrix[0])

    def test_deterministic(self):
        provider = MockProvider(dim=16, seed=2)
        assert np.array_equal(embed_tokens(provider, "x y"), embed_tokens(provider, "x y"))

    def test_pooled_consistency_with_text_embedding(self):
        # Renormalized mean pooling of the token matrix equals the text vector.
        provider = MockProvider(dim=48, seed=4)
        for text in ("fever", "fever chills cough", "a b c d e a b"):
            pooled = mean_pool(embed_tokens(provider, text)).values
            pooled = pooled / np.linalg.norm(pooled)
            direct = embed_texts(provider, [text])[0]
            assert np.allclose(pooled, direct, atol=1e-9)

    def test_unsupported_provider(self):
        provider = HttpProvider("http://127.0.0.1:9", model="m", dim=4, max_attempts=1)
        with pytest.raises(ConfigError):
            embed_tokens(provider, "x")


# ---------------------------------------------------------------------------
# cache
# ---------------------------------------------------------------------------

class TestEmbeddingCache:
    def test_store_lookup_round_trip(self, tmp_path):
        cache = EmbeddingCache(tmp_path / "c.bin", dim=8)
        vec = np.arange(8, dtype=np.float64) / 7.0
        cache.store("fever", vec)
        got = cache.lookup("fever")
        assert got is not None
        assert np.array_equal(got, np.asarray(vec, dtype=np.float32).astype(np.float64))

    def test_absent_key(self, tmp_path):
        cache = EmbeddingCache(tmp_path / "c.bin", dim=8)
        assert cache.lookup("missing") is None

    def test_persistence(self, tmp_path):
        path = tmp_path / "c.bin"
        cache = EmbeddingCache(path, dim=4)
        stored = {}
        rng = np.random.default_rng(0)
        for i in range(50):
            key = f"text {i} é中"
            vec = rng.standard_normal(4)
            cache.store(key, vec)
            stored[key] = cache.lookup(key)
        cache.save()

        reopened = EmbeddingCache(path, dim=4)
        assert len(reopened) == 50
        for key, vec in stored.items():
            assert np.array_equal(reopened.lookup(key), vec)

    def test_dim_mismatch_on_store(self, tmp_path):
        cache = EmbeddingCache(tmp_path / "c.bin", dim=4)
        with pytest.raises(DimensionMismatchError):
            cache.store("x", np.zeros(5))

    def test_dim_mismatch_on_open(self, tmp_path):
        path = tmp_path / "c.bin"
        cache = EmbeddingCache(path, dim=4)
        cache.store("x", np.zeros(4))
        cache.save()
        with pytest.raises(DimensionMismatchError):
            EmbeddingCache(path, dim=8)

    def test_bad_magic_reports_offset(self, tmp_path):
        path = tmp_path / "c.bin"
        path.write_bytes(b"NOPE" + b"\x00" * 20)
        with pytest.raises(CacheFormatError, match="offset 0"):
            EmbeddingCache(path, dim=4)

    def test_bad_version(self, tmp_path):
        path = tmp_path / "c.bin"
        path.write_bytes(b"EMBC" + b"\x09\x00" + b"\x00" * 12)
        with pytest.raises(CacheFormatError, match="version"):
            EmbeddingCache(path, dim=4)

    def test_truncation_reports_offset(self, tmp_path):
        path = tmp_path / "c.bin"
        cache = EmbeddingCache(path, dim=4)
        cache.store("hello", np.zeros(4))
        cache.save()
        payload = path.read_bytes()
        path.write_bytes(payload[:-3])
        with pytest.raises(CacheFormatError, match="offset"):
            EmbeddingCache(path, dim=4)

    @settings(max_examples=30, deadline=None)
    @given(
        keys=st.dictionaries(
            st.text(min_size=1, max_size=40), st.none(), min_size=1, max_size=8
        )
    )
    def test_unicode_keys_round_trip(self, tmp_path_factory, keys):
        path = tmp_path_factory.mktemp("cache") / "c.bin"
        cache = EmbeddingCache(path, dim=3)
        rng = np.random.default_rng(1)
        expected = {}
        for key in keys:
            vec = rng.standard_normal(3)
            cache.store(key, vec)
            expected[key] = cache.lookup(key)
        cache.save()
        reopened = EmbeddingCache(path, dim=3)
        for key, vec in expected.items():
            assert np.array_equal(reopened.lookup(key), vec)


# ---------------------------------------------------------------------------
# HTTP transport
# ---------------------------------------------------------------------------

class _EmbedHandler(BaseHTTPRequestHandler):
    behavior = {"mode": "ok", "dim": 4, "fail_times": 0, "delay": 0.0}
    calls = {"count": 0}

    def log_message(self, *args):  # silence test output
        pass

    def do_POST(self):
        cls = type(self)
        cls.calls["count"] += 1
        cfg = cls.behavior
        if cfg["delay"]:
            time.sleep(cfg["delay"])
        if cfg["mode"] == "fail_then_ok" and cls.calls["count"] <= cfg["fail_times"]:
            # Simulated transport failure: slam the connection shut.
            self.connection.close()
            return
        length = int(self.headers["Content-Length"])
        body = json.loads(self.rfile.read(length))
        texts = body["texts"]
        dim = cfg["dim"]
        if cfg["mode"] == "bad_status":
            self.send_response(500)
            self.end_headers()
            return
        if cfg["mode"] == "bad_json":
            payload = b"this is not json"
        else:
            rows = [[float(i + j) for j in range(dim)] for i in range(len(texts))]
            if cfg["mode"] == "short_vector":
                rows = [row[:-1] for row in rows]
            payload = json.dumps({"dim": dim, "embeddings": rows}).encode()
        self.send_response(200)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(payload)))
        self.end_headers()
        self.wfile.write(payload)


@pytest.fixture
def embed_server():
    server = ThreadingHTTPServer(("127.0.0.1", 0), _EmbedHandler)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    _EmbedHandler.behavior = {"mode": "ok", "dim": 4, "fail_times": 0, "delay": 0.0}
    _EmbedHandler.calls = {"count": 0}
    yield f"http://127.0.0.1:{server.server_address[1]}"
    server.shutdown()


class TestHttpEmbed:
    def test_happy_path(self, embed_server):
        vectors = http_embed(embed_server, "m", ["a"], expected_dim=4)
        assert len(vectors) == 1
        assert vectors[0].shape == (4,)

    def test_dimension_mismatch(self, embed_server):
        _EmbedHandler.behavior["mode"] = "short_vector"
        with pytest.raises(DimensionMismatchError):
            http_embed(embed_server, "m", ["a"], expected_dim=4)

    def test_declared_dim_mismatch(self, embed_server):
        with pytest.raises(DimensionMismatchError):
            http_embed(embed_server, "m", ["a"], expected_dim=7)

    def test_bad_status(self, embed_server):
        _EmbedHandler.behavior["mode"] = "bad_status"
        with pytest.raises(ProviderStatusError):
            http_embed(embed_server, "m", ["a"])

    def test_malformed_json(self, embed_server):
        _EmbedHandler.behavior["mode"] = "bad_json"
        with pytest.raises(ProviderResponseError):
            http_embed(embed_server, "m", ["a"])

    def test_retries_then_success(self, embed_server, caplog):
        _EmbedHandler.behavior.update(mode="fail_then_ok", fail_times=2)
        with caplog.at_level("WARNING", logger="trialmatch.embedding"):
            vectors = http_embed(
                embed_server, "m", ["a"], expected_dim=4, backoff_base=0.01
            )
        assert len(vectors) == 1
        retries = [r for r in caplog.records if "retrying" in r.message]
        assert len(retries) == 2

    def test_retries_exhausted(self, embed_server):
        _EmbedHandler.behavior.update(mode="fail_then_ok", fail_times=99)
        with pytest.raises(ProviderError):
            http_embed(embed_server, "m", ["a"], backoff_base=0.01, max_attempts=2)

    def test_timeout(self, embed_server):
        _EmbedHandler.behavior["delay"] = 0.5
        with pytest.raises(ProviderTimeoutError):
            http_embed(embed_server, "m", ["a"], timeout=0.05, max_attempts=1)

    def test_batch_limit(self, embed_server):
        with pytest.raises(ConfigError):
            http_embed(embed_server, "m", ["a", "b", "c"], max_batch=2)

    def test_provider_batches(self, embed_server):
        provider = HttpProvider(embed_server, model="m", dim=4, max_batch=2)
        vectors = provider.embed_texts(["a", "b", "c", "d", "e"])
        assert len(vectors) == 5
        # 5 texts at batch size 2 -> 3 round trips
        assert _EmbedHandler.calls["count"] == 3


class TestEndpointResolution:
    def test_env_override(self, monkeypatch):
        monkeypatch.setenv(ENDPOINT_ENV_VAR, "http://from-env:1")
        assert resolve_endpoint("http://configured:2") == "http://from-env:1"

    def test_configured_fallback(self, monkeypatch):
        monkeypatch.delenv(ENDPOINT_ENV_VAR, raising=False)
        assert resolve_endpoint("http://configured:2") == "http://configured:2"

    def test_neither(self, monkeypatch):
        monkeypatch.delenv(ENDPOINT_ENV_VAR, raising=False)
        with pytest.raises(ConfigError):
            resolve_endpoint(None)
