"""JSON-over-HTTP with bounded concurrency and exponential backoff."""

from __future__ import annotations

import logging
import threading
import time
from typing import Any, Callable

import httpx

from .errors import APIError, TransportError

log = logging.getLogger(__name__)

RETRYABLE_STATUS = {408, 429, 500, 502, 503, 504}


class JSONClient:
    def __init__(
        self,
        url: str,
        api_key: str | None = None,
        timeout: float = 60.0,
        attempts: int = 3,
        backoff: float = 0.5,
        max_in_flight: int = 4,
        transport: httpx.BaseTransport | None = None,
        sleep: Callable[[float], None] = time.sleep,
    ) -> None:
        headers = {"Content-Type": "application/json"}
        if api_key:
            headers["Authorization"] = f"Bearer {api_key}"
        self.url = url
        self.attempts = attempts
        self.backoff = backoff
        self._sleep = sleep
        self._slots = threading.BoundedSemaphore(max_in_flight)
        self._client = httpx.Client(headers=headers, timeout=timeout, transport=transport)

    def post(self, payload: dict[str, Any]) -> Any:
        last: str = ""
        for attempt in range(1, self.attempts + 1):
            try:
                with self._slots:
                    response = self._client.post(self.url, json=payload)
            except httpx.TransportError as exc:
                last = f"{type(exc).__name__}: {exc}"
            else:
                if response.status_code < 400:
                    try:
                        return response.json()
                    except ValueError as exc:
                        raise APIError(response.status_code, f"invalid JSON body: {exc}") from exc
                if response.status_code not in RETRYABLE_STATUS:
                    raise APIError(response.status_code, response.text[:200])
                last = f"HTTP {response.status_code}: {response.text[:200]}"
            if attempt < self.attempts:
                delay = self.backoff * 2 ** (attempt - 1)
                log.warning("POST %s failed (%s); retry %d/%d in %.2fs", self.url, last, attempt, self.attempts - 1, delay)
                self._sleep(delay)
        raise TransportError(f"POST {self.url} failed after {self.attempts} attempts: {last}", attempts=self.attempts)

    def close(self) -> None:
        self._client.close()
