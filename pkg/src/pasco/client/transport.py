"""How the client reaches a synchronization service.

Both transports present the same tiny surface: a canonical ``url``, an
optional ``pinned_key`` for response authentication, and ``request`` taking
and returning raw HTTP triples.  Everything above this layer is transport
agnostic, which is also what lets tests run whole deployments in-process.
"""

from __future__ import annotations

import base64
import json

import httpx

from ..accounts import canonicalize_url
from ..errors import TransportError
from ..wire import HDR_NONCE


class LocalTransport:
    """In-process endpoint: requests go straight to a service instance."""

    def __init__(self, service, url: str = "http://sss.local"):
        self._service = service
        self.url = canonicalize_url(url)
        self.pinned_key = service.public_key

    def request(self, method, path, headers, body):
        return self._service.handle_api(method, path, headers, body)

    def close(self) -> None:
        pass


class HttpTransport:
    def __init__(self, url: str, pinned_key: bytes | None = None, timeout: float = 5.0):
        self.url = canonicalize_url(url)
        self.pinned_key = pinned_key
        self._client = httpx.Client(base_url=self.url, timeout=timeout)

    def request(self, method, path, headers, body):
        try:
            response = self._client.request(method, path, headers=headers, content=body)
        except httpx.HTTPError as exc:
            raise TransportError(f"{self.url}: {exc}") from exc
        return response.status_code, dict(response.headers), response.content

    def close(self) -> None:
        self._client.close()


def fetch_server_key(transport) -> bytes:
    """Ask an endpoint for its signing key (trust-on-first-use pinning)."""
    status, _headers, body = transport.request("GET", "/v1/server-key", {HDR_NONCE: ""}, b"")
    if status != 200:
        raise TransportError(f"{transport.url}: could not fetch server key (status {status})")
    try:
        key = base64.b64decode(json.loads(body)["public_key"], validate=True)
    except (ValueError, TypeError, KeyError) as exc:
        raise TransportError(f"{transport.url}: malformed server key response") from exc
    if len(key) != 32:
        raise TransportError(f"{transport.url}: server key has wrong length")
    return key
