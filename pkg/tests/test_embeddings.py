import json
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import numpy as np
import pytest

from ssense.embeddings import (EMBED_DIM, ENDPOINT_ENV, SentenceEmbeddingSet, fetch_remote,
                               load_embeddings, resolve_provider, save_embeddings)
from ssense.errors import DimensionMismatchError, EmbeddingFetchError, ValidationError


def vec_for(text):
    rng = np.random.default_rng(abs(hash(text)) % 2**32)
    return (rng.normal(size=EMBED_DIM) * 3).tolist()


class MockServer:
    """Tiny embedding service; ``mode`` changes what it answers."""

    def __init__(self):
        self.requests = []
        self.mode = "ok"
        outer = self

        class Handler(BaseHTTPRequestHandler):
            def do_POST(self):
                body = json.loads(self.rfile.read(int(self.headers["Content-Length"])))
                outer.requests.append(body["sentences"])
                sents = body["sentences"]
                if outer.mode == "short":
                    payload = {"vectors": [vec_for(s) for s in sents[:-1]]}
                elif outer.mode == "garbage":
                    payload = {"nope": 1}
                elif outer.mode == "dim":
                    payload = {"vectors": [[1.0] * 10 for _ in sents]}
                else:
                    payload = {"vectors": [vec_for(s) for s in sents]}
                data = json.dumps(payload).encode()
                self.send_response(200)
                self.send_header("Content-Type", "application/json")
                self.send_header("Content-Length", str(len(data)))
                self.end_headers()
                self.wfile.write(data)

            def log_message(self, *args):
                pass

        self.httpd = ThreadingHTTPServer(("127.0.0.1", 0), Handler)
        self.url = f"http://127.0.0.1:{self.httpd.server_address[1]}/embed"
        self.thread = threading.Thread(target=self.httpd.serve_forever, daemon=True)
        self.thread.start()

    def close(self):
        self.httpd.shutdown()
        self.httpd.server_close()


@pytest.fixture
def server():
    s = MockServer()
    yield s
    s.close()


def test_load_normalizes(tmp_path):
    v = np.zeros((1, EMBED_DIM))
    v[0, :2] = (3, 4)
    emb = SentenceEmbeddingSet(["a"], v)
    assert emb.vectors[0, 0] == np.float32(0.6) and emb.vectors[0, 1] == np.float32(0.8)
    path = tmp_path / "e.sstx"
    save_embeddings(emb, path)
    assert load_embeddings(path).vectors[0, :2].tolist() == [np.float32(0.6), np.float32(0.8)]


def test_round_trip_bit_identical(tmp_path):
    rng = np.random.default_rng(0)
    emb = SentenceEmbeddingSet([f"s{i}" for i in range(50)], rng.normal(size=(50, EMBED_DIM)),
                               "test:v1")
    path = tmp_path / "e.sstx"
    save_embeddings(emb, path)
    back = load_embeddings(path)
    assert back.sentences == emb.sentences and back.source_tag == "test:v1"
    assert back.vectors.tobytes() == emb.vectors.tobytes()
    np.testing.assert_allclose(np.linalg.norm(back.vectors.astype(float), axis=1), 1, atol=1e-6)
    save_embeddings(back, tmp_path / "again.sstx")
    assert (tmp_path / "again.sstx").read_bytes() == path.read_bytes()


def test_wrong_dim_file(tmp_path):
    path = tmp_path / "e.sstx"
    data = b"SSTX" + (1).to_bytes(4, "little") + (1).to_bytes(4, "little") + (768).to_bytes(4, "little")
    path.write_bytes(data + b"\0" * 768 * 4)
    with pytest.raises(DimensionMismatchError):
        load_embeddings(path)


def test_zero_vector_and_truncation(tmp_path):
    with pytest.raises(ValidationError, match="zero vector"):
        SentenceEmbeddingSet(["a"], np.zeros((1, EMBED_DIM)))
    emb = SentenceEmbeddingSet(["a", "b"], np.ones((2, EMBED_DIM)))
    path = tmp_path / "e.sstx"
    save_embeddings(emb, path)
    path.write_bytes(path.read_bytes()[:100])
    with pytest.raises(ValidationError):
        load_embeddings(path)


def test_lookup_missing_sentence():
    emb = SentenceEmbeddingSet(["a"], np.ones((1, EMBED_DIM)))
    with pytest.raises(ValidationError, match="no embedding"):
        emb.lookup(["a", "b"])


def test_fetch_order_and_normalization(server):
    sents = ["one", "two", "three"]
    emb = fetch_remote(server.url, sents)
    assert emb.sentences == sents
    assert server.requests == [sents]
    for s, v in zip(sents, emb.vectors):
        want = np.asarray(vec_for(s))
        np.testing.assert_allclose(v, want / np.linalg.norm(want), rtol=1e-6)
    assert emb.source_tag == f"remote:{server.url}"


def test_fetch_batches_of_64(server):
    sents = [f"s{i}" for i in range(150)]
    emb = fetch_remote(server.url, sents)
    assert [len(r) for r in server.requests] == [64, 64, 22]
    assert emb.sentences == sents


@pytest.mark.parametrize("mode,match", [("short", "2 vectors for 3"), ("garbage", "malformed"),
                                        ("dim", "shape")])
def test_fetch_bad_responses(server, mode, match):
    server.mode = mode
    with pytest.raises(EmbeddingFetchError, match=match):
        fetch_remote(server.url, ["a", "b", "c"])


def test_fetch_unreachable():
    with pytest.raises(EmbeddingFetchError):
        fetch_remote("http://127.0.0.1:9/embed", ["a"], timeout_s=1)


def test_cache_serves_without_requests(server, tmp_path):
    sents = ["x", "y", "z"]
    first = fetch_remote(server.url, sents, cache_dir=tmp_path)
    assert len(server.requests) == 1
    second = fetch_remote(server.url, sents, cache_dir=tmp_path)
    assert len(server.requests) == 1
    assert second.vectors.tobytes() == first.vectors.tobytes()
    fetch_remote(server.url, sents + ["w"], cache_dir=tmp_path)
    assert len(server.requests) == 2


def test_resolve_provider(monkeypatch, tmp_path):
    monkeypatch.delenv(ENDPOINT_ENV, raising=False)
    with pytest.raises(ValidationError):
        resolve_provider(None, None)
    with pytest.raises(ValidationError, match="mutually exclusive"):
        resolve_provider(tmp_path / "e.sstx", "http://x")
    assert resolve_provider("e.sstx", None) == ("file", "e.sstx")
    monkeypatch.setenv(ENDPOINT_ENV, "http://env")
    assert resolve_provider(None, None) == ("remote", "http://env")
    assert resolve_provider(None, "http://flag") == ("remote", "http://flag")
    assert resolve_provider("e.sstx", None)[0] == "file"
