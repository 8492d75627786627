"""Relay between a backup device's command port and the endpoints.

The client's only job here is to carry frames: every device request is
already signed and self-contained, so the relay neither inspects nor could
usefully alter it.  Transport failures are reported into the device as
status 0 so flows can fail over to another endpoint.
"""

from __future__ import annotations

import base64
import json

from ..device import (
    CMD_SSS_RESULT,
    ST_ERROR,
    ST_OK,
    ST_SSS_FORWARD,
    SssExchange,
    SssResult,
    decode_frame,
    encode_frame,
)
from ..errors import (
    AuthenticationFailure,
    BackupFailed,
    Conflict,
    DeviceBusy,
    DeviceStateError,
    DeviceWiped,
    EntropyExhausted,
    Forbidden,
    IntegrityError,
    InvalidArgument,
    InvalidKey,
    NotFound,
    PascoError,
    PinRejected,
    PolicyError,
    ProvisioningFailed,
    TransportError,
    Unauthorized,
    Unavailable,
)

_FRAME_ERRORS = {
    cls.code: cls
    for cls in (
        InvalidArgument,
        PolicyError,
        EntropyExhausted,
        AuthenticationFailure,
        IntegrityError,
        InvalidKey,
        Unauthorized,
        Forbidden,
        NotFound,
        Conflict,
        TransportError,
        Unavailable,
        DeviceWiped,
        DeviceBusy,
        DeviceStateError,
        ProvisioningFailed,
        BackupFailed,
    )
}


def make_performer(transports):
    """perform(SssExchange) -> SssResult over a fixed set of endpoints."""
    by_url = {t.url: t for t in transports}

    def perform(exchange) -> SssResult:
        transport = by_url.get(exchange.endpoint)
        if transport is None:
            return SssResult.unreachable(f"no transport for {exchange.endpoint}")
        try:
            status, headers, body = transport.request(
                exchange.method, exchange.path, exchange.headers, exchange.body
            )
        except TransportError as exc:
            return SssResult.unreachable(str(exc))
        return SssResult(status=status, headers=headers, body=body)

    return perform


def _result_doc(result: SssResult) -> dict:
    return {
        "status": result.status,
        "headers": dict(result.headers),
        "body": base64.b64encode(result.body).decode("ascii"),
    }


def command(port, transports, cmd: int, doc: dict | None = None) -> dict:
    """Run one device command to completion, relaying exchanges as needed."""
    perform = make_performer(transports)
    payload = bytes([cmd]) + (json.dumps(doc).encode("utf-8") if doc else b"")
    reply = port.handle(encode_frame(payload))
    while True:
        body = decode_frame(reply)
        status, text = body[0], body[1:]
        answer = json.loads(text) if text else {}
        if status == ST_OK:
            return answer
        if status == ST_ERROR:
            raise _error_from(answer)
        if status != ST_SSS_FORWARD:
            raise PascoError(f"unexpected device frame status 0x{status:02x}")
        result = perform(_exchange_from(answer))
        follow_up = bytes([CMD_SSS_RESULT]) + json.dumps(_result_doc(result)).encode("utf-8")
        reply = port.handle(encode_frame(follow_up))


def _exchange_from(doc: dict) -> SssExchange:
    return SssExchange(
        endpoint=doc["endpoint"],
        method=doc["method"],
        path=doc["path"],
        headers=doc["headers"],
        body=base64.b64decode(doc["body"]),
    )


def _error_from(doc: dict) -> PascoError:
    code = doc.get("code", "error")
    message = doc.get("message", "device reported an error")
    if code == PinRejected.code:
        return PinRejected(int(doc.get("remaining", 0)))
    cls = _FRAME_ERRORS.get(code)
    if cls is not None:
        return cls(message)
    exc = PascoError(message)
    exc.code = code
    return exc
