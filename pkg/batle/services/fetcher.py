"""
Dataset fetcher: downloads the IHDP replication CSVs and the MNIST IDX archives.
Handles retries with linear backoff and writes files atomically.
"""
import asyncio
import logging
from pathlib import Path
from typing import List, Optional, Union

import httpx

from batle.config import IHDP_REPLICATIONS
from batle.errors import FetchError
from batle.services.datasets import IHDP_COLUMNS
from batle.services.idx import SPLIT_FILES

logger = logging.getLogger(__name__)

IHDP_N_COVARIATES = 25
RETRYABLE_CLIENT_ERRORS = (408, 429)


class DatasetFetcher:
    """Fetches benchmark files over HTTP with retry logic."""

    IHDP_URL = "https://raw.githubusercontent.com/AMLab-Amsterdam/CEVAE/master/datasets/IHDP/csv/ihdp_npci_{index}.csv"
    MNIST_URL = "https://storage.googleapis.com/cvdf-datasets/mnist/{name}.gz"
    MAX_RETRIES = 3
    RETRY_DELAY = 1  # seconds

    def __init__(self, client: Optional[httpx.AsyncClient] = None, retry_delay: Optional[float] = None):
        self.client = client or httpx.AsyncClient(timeout=60.0, follow_redirects=True)
        self.retry_delay = self.RETRY_DELAY if retry_delay is None else retry_delay

    async def __aenter__(self):
        return self

    async def __aexit__(self, exc_type, exc_val, exc_tb):
        await self.client.aclose()

    async def fetch_bytes(self, url: str) -> bytes:
        """
        GET ``url`` and return the body.

        Client errors other than 408/429 fail immediately; everything else is
        retried up to MAX_RETRIES times with a delay of RETRY_DELAY * attempt.
        """
        last_error = None
        for attempt in range(1, self.MAX_RETRIES + 1):
            try:
                response = await self.client.get(url)
                response.raise_for_status()
                return response.content
            except httpx.HTTPStatusError as e:
                status = e.response.status_code
                last_error = f"HTTP {status}"
                if 400 <= status < 500 and status not in RETRYABLE_CLIENT_ERRORS:
                    raise FetchError(f"{url}: {last_error}") from e
            except httpx.RequestError as e:
                last_error = str(e) or type(e).__name__
            if attempt < self.MAX_RETRIES:
                logger.warning("Fetching %s failed (%s), retry %d/%d", url, last_error, attempt, self.MAX_RETRIES - 1)
                await asyncio.sleep(self.retry_delay * attempt)
        raise FetchError(f"Failed to fetch {url} after {self.MAX_RETRIES} attempts: {last_error}")

    async def fetch_ihdp(self, out_dir: Union[str, Path], replications: int = IHDP_REPLICATIONS) -> List[Path]:
        """
        Download ``ihdp_npci_1..N.csv``. The upstream files have no header;
        the documented one (treatment, y_factual, y_cfactual, mu0, mu1, x1..x25)
        is prepended.
        """
        if not 1 <= replications <= IHDP_REPLICATIONS:
            raise FetchError(f"replications must lie in [1, {IHDP_REPLICATIONS}], got {replications}")
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        header = ",".join(IHDP_COLUMNS + [f"x{i}" for i in range(1, IHDP_N_COVARIATES + 1)])
        paths = []
        for index in range(1, replications + 1):
            body = (await self.fetch_bytes(self.IHDP_URL.format(index=index))).decode("utf-8").strip()
            first = body.splitlines()[0] if body else ""
            if not first or first.split(",")[0].strip() == "treatment":
                content = body
            else:
                n_columns = len(first.split(","))
                if n_columns != len(IHDP_COLUMNS) + IHDP_N_COVARIATES:
                    raise FetchError(f"ihdp_npci_{index}.csv has {n_columns} columns, expected {len(IHDP_COLUMNS) + IHDP_N_COVARIATES}")
                content = f"{header}\n{body}"
            paths.append(_write(out / f"ihdp_npci_{index}.csv", f"{content}\n".encode("utf-8")))
        logger.info("Fetched %d IHDP replications into %s", len(paths), out)
        return paths

    async def fetch_mnist(self, out_dir: Union[str, Path]) -> List[Path]:
        """Download the four gzip-compressed MNIST IDX files (read directly by ``load_mnist``)."""
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = []
        for names in SPLIT_FILES.values():
            for name in names:
                body = await self.fetch_bytes(self.MNIST_URL.format(name=name))
                paths.append(_write(out / f"{name}.gz", body))
        logger.info("Fetched MNIST into %s", out)
        return paths


def _write(path: Path, body: bytes) -> Path:
    partial = path.with_name(path.name + ".part")
    partial.write_bytes(body)
    partial.replace(path)
    return path


async def fetch_dataset(name: str, out_dir: Union[str, Path], replications: int = IHDP_REPLICATIONS) -> List[Path]:
    async with DatasetFetcher() as fetcher:
        if name == "ihdp":
            return await fetcher.fetch_ihdp(out_dir, replications)
        if name == "mnist":
            return await fetcher.fetch_mnist(out_dir)
    raise FetchError(f"unknown dataset {name!r}; choose ihdp or mnist")
