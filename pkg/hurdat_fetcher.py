"""
HURDAT2 Archive Fetcher.

Downloads the NOAA Atlantic best-track archive with async HTTP requests,
a configurable timeout and bounded retries.
"""

import asyncio
import logging
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Union

import aiohttp

from config import settings
from errors import FetchError
from utils import atomic_write

logger = logging.getLogger(__name__)


@dataclass
class FetchResult:
    """Outcome of one archive download."""

    url: str
    path: str
    bytes_written: int = 0
    attempts: int = 0
    duration_s: float = 0.0


class HurdatFetcher:
    """
    Asynchronous best-track archive downloader.

    Retries transient failures with a linear backoff before giving up.
    """

    def __init__(
        self,
        url: Optional[str] = None,
        timeout: Optional[int] = None,
        retries: Optional[int] = None,
        backoff_s: float = 1.0,
    ):
        self.url = url or settings.hurdat_url
        self.timeout = timeout or settings.fetch_timeout
        self.retries = retries if retries is not None else settings.fetch_retries
        self.backoff_s = backoff_s

    async def fetch_text(self, session: aiohttp.ClientSession) -> bytes:
        """Fetch the archive body once."""
        async with session.get(self.url) as response:
            if response.status != 200:
                raise FetchError(f"{self.url} returned HTTP {response.status}")
            return await response.read()

    async def download(self, dest: Union[str, Path]) -> FetchResult:
        """
        Download the archive to ``dest``.

        Raises:
            FetchError: If every attempt fails.
        """
        start_time = time.time()
        result = FetchResult(url=self.url, path=str(dest))
        timeout_config = aiohttp.ClientTimeout(total=self.timeout)

        last_error: Optional[Exception] = None
        async with aiohttp.ClientSession(timeout=timeout_config) as session:
            for attempt in range(1, self.retries + 2):
                result.attempts = attempt
                try:
                    body = await self.fetch_text(session)
                    atomic_write(dest, body)
                    result.bytes_written = len(body)
                    break
                except (aiohttp.ClientError, asyncio.TimeoutError, FetchError) as e:
                    last_error = e
                    logger.warning("Download attempt %d of %s failed: %s", attempt, self.url, e)
                    if attempt <= self.retries:
                        await asyncio.sleep(self.backoff_s * attempt)
            else:
                raise FetchError(
                    f"could not download {self.url} after {result.attempts} attempts: {last_error}"
                )

        result.duration_s = round(time.time() - start_time, 2)
        logger.info(
            "Downloaded %d bytes from %s in %.2fs", result.bytes_written, self.url, result.duration_s
        )
        return result
