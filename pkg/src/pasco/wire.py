"""Signed HTTP exchange format between clients and the storage service.

Every mutating or secret-bearing request carries a detached Ed25519
signature over a canonical string:

    "pasco-req-v1\\n" METHOD "\\n" PATH "\\n" sha256(body).hex() "\\n"
    NONCE_B64 "\\n" TIMESTAMP

conveyed in four headers: X-Key-Fingerprint, X-Nonce, X-Signature (each
base64) and X-Timestamp (integer seconds).  The server rejects timestamps
more than 60 seconds off its clock and refuses to accept the same nonce
twice within the replay window, so a captured request cannot be replayed.

Responses are signed back over

    "pasco-resp-v1\\n" STATUS "\\n" sha256(body).hex() "\\n" CLIENT_NONCE_B64

in X-Sss-Signature, binding the reply to the request's nonce.  A client that
pins the service key can therefore detect a spoofed or substituted reply.

Errors travel as JSON bodies {"code": ..., "message": ...} with a 4xx
status; the code round-trips to a typed exception on the client.
"""

from __future__ import annotations

import base64
import hashlib
import json
import time
from dataclasses import dataclass

from .crypto import SigningKeyPair, random_bytes, verify
from .errors import (
    AuthenticationFailure,
    PascoError,
    TransportError,
    Unauthorized,
    error_for_code,
)

HDR_FINGERPRINT = "X-Key-Fingerprint"
HDR_NONCE = "X-Nonce"
HDR_TIMESTAMP = "X-Timestamp"
HDR_SIGNATURE = "X-Signature"
HDR_RESPONSE_SIG = "X-Sss-Signature"

MAX_CLOCK_SKEW = 60
NONCE_TTL = 300

_REQ_TAG = b"pasco-req-v1"
_RESP_TAG = b"pasco-resp-v1"


def b64(data: bytes) -> str:
    return base64.b64encode(data).decode("ascii")


def unb64(text: str) -> bytes:
    try:
        return base64.b64decode(text, validate=True)
    except (ValueError, TypeError) as exc:
        raise Unauthorized("malformed base64 header") from exc


def canonical_request(method: str, path: str, body: bytes, nonce_b64: str, timestamp: int) -> bytes:
    return b"\n".join(
        [
            _REQ_TAG,
            method.upper().encode("ascii"),
            path.encode("utf-8"),
            hashlib.sha256(body).hexdigest().encode("ascii"),
            nonce_b64.encode("ascii"),
            str(timestamp).encode("ascii"),
        ]
    )


def canonical_response(status: int, body: bytes, nonce_b64: str) -> bytes:
    return b"\n".join(
        [
            _RESP_TAG,
            str(status).encode("ascii"),
            hashlib.sha256(body).hexdigest().encode("ascii"),
            nonce_b64.encode("ascii"),
        ]
    )


def sign_request(
    keypair: SigningKeyPair, method: str, path: str, body: bytes, now: float | None = None
) -> dict[str, str]:
    """Produce the four auth headers for a request."""
    nonce_b64 = b64(random_bytes(16))
    timestamp = int(now if now is not None else time.time())
    signature = keypair.sign(canonical_request(method, path, body, nonce_b64, timestamp))
    return {
        HDR_FINGERPRINT: b64(keypair.fingerprint),
        HDR_NONCE: nonce_b64,
        HDR_TIMESTAMP: str(timestamp),
        HDR_SIGNATURE: b64(signature),
    }


@dataclass
class ParsedAuth:
    fingerprint: bytes
    nonce_b64: str
    timestamp: int
    signature: bytes


def parse_auth_headers(headers) -> ParsedAuth:
    """Extract and decode the auth headers (case-insensitive lookup)."""
    lowered = {str(k).lower(): v for k, v in dict(headers).items()}

    def need(name: str) -> str:
        value = lowered.get(name.lower())
        if not value:
            raise Unauthorized(f"missing {name} header")
        return value

    try:
        timestamp = int(need(HDR_TIMESTAMP))
    except ValueError as exc:
        raise Unauthorized("malformed timestamp") from exc
    fingerprint = unb64(need(HDR_FINGERPRINT))
    if len(fingerprint) != 32:
        raise Unauthorized("malformed key fingerprint")
    return ParsedAuth(
        fingerprint=fingerprint,
        nonce_b64=need(HDR_NONCE),
        timestamp=timestamp,
        signature=unb64(need(HDR_SIGNATURE)),
    )


def verify_request(
    public: bytes,
    method: str,
    path: str,
    body: bytes,
    auth: ParsedAuth,
    now: float | None = None,
    max_skew: int = MAX_CLOCK_SKEW,
) -> None:
    """Check signature and freshness; nonce uniqueness is the caller's job."""
    current = now if now is not None else time.time()
    if abs(current - auth.timestamp) > max_skew:
        raise Unauthorized("request timestamp outside accepted window")
    message = canonical_request(method, path, body, auth.nonce_b64, auth.timestamp)
    if not verify(public, message, auth.signature):
        raise Unauthorized("bad request signature")


def sign_response(keypair: SigningKeyPair, status: int, body: bytes, nonce_b64: str) -> str:
    return b64(keypair.sign(canonical_response(status, body, nonce_b64)))


def verify_response(public: bytes, status: int, body: bytes, nonce_b64: str, sig_b64: str) -> None:
    try:
        signature = base64.b64decode(sig_b64, validate=True)
    except (ValueError, TypeError) as exc:
        raise AuthenticationFailure("malformed response signature") from exc
    if not verify(public, canonical_response(status, body, nonce_b64), signature):
        raise AuthenticationFailure("response signature does not verify")


class NonceCache:
    """Remembers recently seen nonces to refuse replays within the TTL."""

    def __init__(self, ttl: int = NONCE_TTL):
        self._ttl = ttl
        self._seen: dict[str, float] = {}

    def check_and_store(self, nonce_b64: str, now: float | None = None) -> None:
        current = now if now is not None else time.time()
        if len(self._seen) > 4096:
            self._prune(current)
        expiry = self._seen.get(nonce_b64)
        if expiry is not None and expiry > current:
            raise Unauthorized("nonce already used")
        self._seen[nonce_b64] = current + self._ttl

    def _prune(self, current: float) -> None:
        dead = [n for n, exp in self._seen.items() if exp <= current]
        for n in dead:
            del self._seen[n]


def signed_call(
    send,
    keypair: SigningKeyPair,
    method: str,
    path: str,
    doc: dict | None = None,
    pinned_key: bytes | None = None,
    now: float | None = None,
) -> dict:
    """Send one signed request and return the decoded JSON response.

    ``send(method, path, headers, body) -> (status, headers, body)`` supplies
    the actual transport.  With a pinned service key the response signature
    is checked before anything else is believed; wire errors re-raise as
    their typed exceptions.
    """
    body = b"" if doc is None else json.dumps(doc).encode("utf-8")
    headers = sign_request(keypair, method, path, body, now=now)
    status, resp_headers, resp_body = send(method, path, headers, body)
    if pinned_key is not None:
        lowered = {str(k).lower(): v for k, v in dict(resp_headers).items()}
        sig = lowered.get(HDR_RESPONSE_SIG.lower())
        if not sig:
            raise AuthenticationFailure("response carries no service signature")
        verify_response(pinned_key, status, resp_body, headers[HDR_NONCE], sig)
    raise_for_error(status, resp_body)
    try:
        return json.loads(resp_body)
    except (ValueError, TypeError) as exc:
        raise TransportError("response body is not valid JSON") from exc


def error_body(exc: PascoError) -> bytes:
    return json.dumps({"code": exc.code, "message": str(exc)}).encode("utf-8")


def raise_for_error(status: int, body: bytes) -> None:
    """Turn an error response back into the typed exception it came from."""
    if status < 400:
        return
    try:
        doc = json.loads(body)
        code, message = doc["code"], doc.get("message", "")
    except (ValueError, KeyError, TypeError):
        raise TransportError(f"http {status} with unreadable error body")
    raise error_for_code(code, message)
