import asyncio
import gzip

import httpx
import numpy as np
import pytest

from batle.errors import FetchError
from batle.services.datasets import load_ihdp
from batle.services.fetcher import DatasetFetcher, fetch_dataset


def ihdp_body(n=8, columns=30):
    g = np.random.default_rng(0)
    rows = g.normal(size=(n, columns))
    rows[:, 0] = np.arange(n) % 2
    return "\n".join(",".join(f"{v:.6f}" for v in row) for row in rows)


class Server:
    """Scripted responses per request; the last one repeats."""

    def __init__(self, *responses):
        self.responses = list(responses)
        self.calls = []

    def __call__(self, request: httpx.Request) -> httpx.Response:
        self.calls.append(str(request.url))
        status, body = self.responses[min(len(self.calls), len(self.responses)) - 1]
        return httpx.Response(status, content=body)


def run(server, action):
    async def go():
        client = httpx.AsyncClient(transport=httpx.MockTransport(server))
        async with DatasetFetcher(client=client, retry_delay=0) as fetcher:
            return await action(fetcher)

    return asyncio.run(go())


def test_fetch_ihdp_adds_header(tmp_path):
    server = Server((200, ihdp_body().encode()))
    paths = run(server, lambda f: f.fetch_ihdp(tmp_path, replications=2))
    assert [p.name for p in paths] == ["ihdp_npci_1.csv", "ihdp_npci_2.csv"]
    assert paths[0].read_text().startswith("treatment,y_factual,y_cfactual,mu0,mu1,x1,")
    assert load_ihdp(tmp_path, 1).covariates.shape == (8, 25)
    assert not list(tmp_path.glob("*.part"))


def test_fetch_ihdp_rejects_wrong_width(tmp_path):
    server = Server((200, ihdp_body(columns=12).encode()))
    with pytest.raises(FetchError, match="12 columns"):
        run(server, lambda f: f.fetch_ihdp(tmp_path, replications=1))


def test_transient_errors_are_retried(tmp_path):
    server = Server((500, b""), (429, b""), (200, b"payload"))
    body = run(server, lambda f: f.fetch_bytes("https://example.org/file"))
    assert body == b"payload"
    assert len(server.calls) == 3


def test_client_error_fails_fast():
    server = Server((404, b"missing"))
    with pytest.raises(FetchError, match="HTTP 404"):
        run(server, lambda f: f.fetch_bytes("https://example.org/file"))
    assert len(server.calls) == 1


def test_gives_up_after_max_retries():
    server = Server((503, b""))
    with pytest.raises(FetchError, match="after 3 attempts"):
        run(server, lambda f: f.fetch_bytes("https://example.org/file"))
    assert len(server.calls) == DatasetFetcher.MAX_RETRIES


def test_fetch_mnist_writes_gzip_files(tmp_path):
    payload = gzip.compress(b"\x00\x00\x08\x01\x00\x00\x00\x00")
    server = Server((200, payload))
    paths = run(server, lambda f: f.fetch_mnist(tmp_path))
    assert sorted(p.name for p in paths) == [
        "t10k-images-idx3-ubyte.gz",
        "t10k-labels-idx1-ubyte.gz",
        "train-images-idx3-ubyte.gz",
        "train-labels-idx1-ubyte.gz",
    ]
    assert all(p.read_bytes() == payload for p in paths)


def test_replication_count_is_checked(tmp_path):
    with pytest.raises(FetchError):
        run(Server((200, b"")), lambda f: f.fetch_ihdp(tmp_path, replications=11))


def test_unknown_dataset(tmp_path):
    with pytest.raises(FetchError, match="unknown dataset"):
        asyncio.run(fetch_dataset("cifar", tmp_path))
