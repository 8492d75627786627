"""Exception hierarchy shared by every layer.

Service-facing errors carry a stable wire code so the HTTP layer and the
CLI can map them without string matching.
"""

from __future__ import annotations


class PascoError(Exception):
    """Base class for all errors raised by this package."""

    code = "error"


class InvalidArgument(PascoError):
    code = "invalid-argument"


class PolicyError(PascoError):
    """Password policy is invalid or unsatisfiable."""

    code = "policy-error"


class EntropyExhausted(PascoError):
    """The supplied random stream ran out before the password was complete.

    Callers retry with a larger stream.
    """

    code = "entropy-exhausted"


class AuthenticationFailure(PascoError):
    """AEAD tag mismatch: wrong key, tampered ciphertext, or wrong context."""

    code = "authentication-failure"


class IntegrityError(PascoError):
    """Decrypted content is inconsistent with its identifier or framing."""

    code = "integrity-error"


class InvalidKey(PascoError):
    code = "invalid-key"


class Unauthorized(PascoError):
    """Request signature, token, or credential was rejected."""

    code = "unauthorized"
    http_status = 401


class Forbidden(PascoError):
    """Caller is authenticated but not allowed to perform the operation."""

    code = "forbidden"
    http_status = 403


class NotFound(PascoError):
    code = "not-found"
    http_status = 404


class Conflict(PascoError):
    code = "conflict"
    http_status = 409


class TransportError(PascoError):
    """Endpoint unreachable or the connection failed mid-request."""

    code = "transport-error"


class Unavailable(PascoError):
    """Every configured endpoint failed."""

    code = "unavailable"


class PinRejected(PascoError):
    """Wrong PIN; carries the number of attempts left before the wipe."""

    code = "pin-rejected"

    def __init__(self, remaining: int):
        super().__init__(f"wrong PIN, {remaining} attempts remaining")
        self.remaining = remaining


class DeviceWiped(PascoError):
    code = "device-wiped"


class DeviceBusy(PascoError):
    code = "device-busy"


class DeviceStateError(PascoError):
    """Command not valid in the device's current lifecycle state."""

    code = "device-state"


class ProvisioningFailed(PascoError):
    code = "provisioning-failed"


class BackupFailed(PascoError):
    code = "backup-failed"


class EnrollmentFailed(PascoError):
    code = "enrollment-failed"


class SetupFailed(PascoError):
    code = "setup-failed"


# Errors that the HTTP layer maps to a 4xx status.  Everything else is a 500.
HTTP_STATUS_BY_CODE = {
    InvalidArgument.code: 400,
    PolicyError.code: 400,
    Unauthorized.code: 401,
    Forbidden.code: 403,
    NotFound.code: 404,
    Conflict.code: 409,
}

_WIRE_ERRORS = {
    cls.code: cls
    for cls in (InvalidArgument, PolicyError, Unauthorized, Forbidden, NotFound, Conflict)
}


def error_for_code(code: str, message: str) -> PascoError:
    """Rebuild the client-side exception for an error code from the wire."""
    cls = _WIRE_ERRORS.get(code, PascoError)
    exc = cls(message)
    exc.code = code
    return exc
