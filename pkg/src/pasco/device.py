"""Simulated tamper-resistant backup device.

The device owns exactly one secret-bearing value: ``s_bd``, the pad-masked
serialization of the master secret.  The pad itself lives at the
synchronization service, deposited per registered key, so neither party
alone can reconstruct the secret; deleting the service-side key and pad is
what revokes a lost device.  PIN slots (restore or emergency role) gate the
two read paths, with a single five-strike retry counter shared by all slots:
any match resets it, the fifth consecutive miss erases the device.

The device talks to services only through its caller.  Flow operations are
generators that yield fully signed, self-contained requests (``SssExchange``)
and receive raw responses (``SssResult``); the caller forwards them verbatim
and learns nothing it did not already know.  A hostile forwarder can deny
service but cannot extract the secret: a wrong pad fed into provisioning
fails the consistency check, and a wrong pad fed into restore or emergency
yields a value that decrypts nothing.

State persists as a versioned binary image (magic "PASCOBD1"), standing in
for secure device memory.  The image is what an adversary who physically
extracts the device sees, so tests inspect it directly.
"""

from __future__ import annotations

import base64
import hashlib
import json
import os
import time
from dataclasses import dataclass, field

from . import statefile
from .accounts import (
    EncryptedRecord,
    PalpasSecret,
    account_id,
    canonicalize_url,
    encode_account_id,
    open_record,
    pack_lv,
    split_data_key,
    unpack_lv,
)
from .crypto import SecretBytes, constant_time_eq, random_bytes, xor_mask
from .errors import (
    DeviceBusy,
    DeviceStateError,
    DeviceWiped,
    Forbidden,
    IntegrityError,
    InvalidArgument,
    PascoError,
    PinRejected,
    ProvisioningFailed,
    TransportError,
    Unauthorized,
    Unavailable,
)
from .mirror import mask_otp, sss_auth_key, sss_data_key
from .passwords import generate_random
from .sss.service import ROLE_EMERGENCY, ROLE_RESTORE, ROLE_USER_DEVICE
from .wire import raise_for_error, sign_request

MAGIC = b"PASCOBD1"
VERSION = 1

STATUS_BLANK = 0
STATUS_PROVISIONED = 1
STATUS_WIPED = 2
STATUS_NAMES = {STATUS_BLANK: "blank", STATUS_PROVISIONED: "provisioned", STATUS_WIPED: "wiped"}

SLOT_RESTORE = "restore"
SLOT_EMERGENCY = "emergency"
_SSS_ROLE = {SLOT_RESTORE: ROLE_RESTORE, SLOT_EMERGENCY: ROLE_EMERGENCY}

MAX_RETRIES = 5
MIN_PIN_LEN = 4
DEFAULT_PIN_ITERATIONS = 600_000

DEVICE_AAD = b"pasco/device-v1"

DEFAULT_STREAM = 4096


@dataclass
class PinSlot:
    role: str
    pin_salt: bytes
    verifier: bytes
    iterations: int
    auth_root: bytes

    def matches(self, pin: str) -> bool:
        return constant_time_eq(_pin_hash(pin, self.pin_salt, self.iterations), self.verifier)

    def to_doc(self) -> dict:
        return {
            "role": self.role,
            "pin_salt": base64.b64encode(self.pin_salt).decode("ascii"),
            "verifier": base64.b64encode(self.verifier).decode("ascii"),
            "iterations": self.iterations,
            "auth_root": base64.b64encode(self.auth_root).decode("ascii"),
        }

    @classmethod
    def from_doc(cls, doc: dict) -> "PinSlot":
        return cls(
            role=doc["role"],
            pin_salt=base64.b64decode(doc["pin_salt"]),
            verifier=base64.b64decode(doc["verifier"]),
            iterations=int(doc["iterations"]),
            auth_root=base64.b64decode(doc["auth_root"]),
        )


def _pin_hash(pin: str, salt: bytes, iterations: int) -> bytes:
    return hashlib.pbkdf2_hmac("sha256", pin.encode("utf-8"), salt, iterations, dklen=32)


@dataclass
class BdState:
    """The complete device memory; everything an extracting adversary gets."""

    status: int = STATUS_BLANK
    retries: int = MAX_RETRIES
    s_bd: bytes = b""
    mask_m: bytes = b""
    endpoints: list = field(default_factory=list)
    slots: list = field(default_factory=list)

    def encode(self) -> bytes:
        return (
            MAGIC
            + bytes([VERSION, self.status, self.retries, 1 if self.mask_m else 0])
            + pack_lv(
                self.s_bd,
                self.mask_m,
                json.dumps(self.endpoints).encode("utf-8"),
                json.dumps([s.to_doc() for s in self.slots]).encode("utf-8"),
            )
        )

    @classmethod
    def parse(cls, blob: bytes) -> "BdState":
        if len(blob) < len(MAGIC) + 4 or blob[: len(MAGIC)] != MAGIC:
            raise IntegrityError("not a device image")
        version, status, retries, _flags = blob[len(MAGIC) : len(MAGIC) + 4]
        if version != VERSION:
            raise IntegrityError(f"unsupported device image version {version}")
        if status not in STATUS_NAMES or not 0 <= retries <= MAX_RETRIES:
            raise IntegrityError("device image fields out of range")
        s_bd, mask_m, endpoints_json, slots_json = unpack_lv(blob[len(MAGIC) + 4 :], 4)
        return cls(
            status=status,
            retries=retries,
            s_bd=s_bd,
            mask_m=mask_m,
            endpoints=json.loads(endpoints_json),
            slots=[PinSlot.from_doc(d) for d in json.loads(slots_json)],
        )

    def erase(self) -> None:
        self.status = STATUS_WIPED
        self.retries = 0
        self.s_bd = b""
        self.mask_m = b""
        self.endpoints = []
        self.slots = []


@dataclass(frozen=True)
class SssExchange:
    """One signed request the device wants forwarded verbatim."""

    endpoint: str
    method: str
    path: str
    headers: dict
    body: bytes


@dataclass(frozen=True)
class SssResult:
    """What came back; status 0 means the endpoint was unreachable."""

    status: int
    headers: dict
    body: bytes

    @classmethod
    def unreachable(cls, message: str = "endpoint unreachable") -> "SssResult":
        return cls(0, {}, json.dumps({"code": "transport-error", "message": message}).encode())


@dataclass(frozen=True)
class SlotHandle:
    token: int
    slot: int
    role: str


def drive(gen, perform):
    """Pump a flow generator with perform(SssExchange) -> SssResult."""
    try:
        exchange = next(gen)
        while True:
            exchange = gen.send(perform(exchange))
    except StopIteration as stop:
        return stop.value


def _parse_result(res: SssResult) -> dict:
    if res.status == 0:
        try:
            message = json.loads(res.body).get("message", "")
        except (ValueError, TypeError):
            message = ""
        raise TransportError(message or "endpoint unreachable")
    raise_for_error(res.status, res.body)
    try:
        return json.loads(res.body)
    except (ValueError, TypeError) as exc:
        raise TransportError("unreadable response from endpoint") from exc


class BackupDevice:
    """The device state machine.  Single-threaded; one command in flight."""

    def __init__(self, state: BdState | None = None, path: str | None = None,
                 iterations: int = DEFAULT_PIN_ITERATIONS, clock=time.time):
        self._path = path
        self._iterations = iterations
        self._clock = clock
        self._busy = False
        self._handle_counter = 0
        self._active_handle: SlotHandle | None = None
        if state is not None:
            self._state = state
        elif path and os.path.exists(path):
            self._state = BdState.parse(statefile.load_sealed(path, DEVICE_AAD))
        else:
            self._state = BdState()

    @classmethod
    def from_bytes(cls, blob: bytes, **kwargs) -> "BackupDevice":
        return cls(state=BdState.parse(blob), **kwargs)

    def to_bytes(self) -> bytes:
        return self._state.encode()

    def _persist(self) -> None:
        if self._path:
            statefile.save_sealed(self._path, self._state.encode(), DEVICE_AAD)

    # -- immediate commands ---------------------------------------------------

    def status(self) -> dict:
        state = self._state
        return {
            "status": STATUS_NAMES[state.status],
            "retries_left": state.retries,
            "slots": [{"index": i, "role": s.role} for i, s in enumerate(state.slots)],
            "endpoints": list(state.endpoints),
        }

    def verify_pin(self, pin: str) -> SlotHandle:
        self._ensure_idle()
        self._ensure_usable()
        for index, slot in enumerate(self._state.slots):
            if slot.matches(pin):
                self._state.retries = MAX_RETRIES
                self._persist()
                self._handle_counter += 1
                handle = SlotHandle(self._handle_counter, index, slot.role)
                self._active_handle = handle
                return handle
        self._state.retries -= 1
        if self._state.retries <= 0:
            self._state.erase()
            self._persist()
            raise DeviceWiped("retry counter exhausted; device erased")
        self._persist()
        raise PinRejected(self._state.retries)

    def wipe(self) -> dict:
        self._ensure_idle()
        self._state.erase()
        self._active_handle = None
        self._persist()
        return {"status": STATUS_NAMES[self._state.status]}

    def resolve_handle(self, token: int) -> SlotHandle:
        handle = self._active_handle
        if handle is None or handle.token != token:
            raise Unauthorized("invalid or stale slot handle")
        return handle

    # -- flow commands (generators yielding SssExchange) -----------------------

    def provision_op(self, secret_blob: bytes, pin: str, role: str,
                     tokens: dict, endpoints: list | None = None):
        return self._guarded(self._provision(secret_blob, pin, role, tokens, endpoints))

    def restore_op(self, handle: SlotHandle):
        return self._guarded(self._restore(handle))

    def emergency_op(self, handle: SlotHandle, url: str, n: int = DEFAULT_STREAM):
        return self._guarded(self._emergency(handle, url, n))

    def _guarded(self, inner):
        if self._busy:
            inner.close()
            raise DeviceBusy("another command is in flight")
        self._busy = True
        try:
            result = yield from inner
            return result
        finally:
            self._busy = False

    def _provision(self, secret_blob, pin, role, tokens, endpoints):
        if self._state.status == STATUS_WIPED:
            raise DeviceWiped("device has been erased")
        if role not in _SSS_ROLE:
            raise InvalidArgument("slot role must be 'restore' or 'emergency'")
        if not isinstance(pin, str) or len(pin) < MIN_PIN_LEN:
            raise InvalidArgument(f"pin must be at least {MIN_PIN_LEN} characters")
        if not secret_blob:
            raise InvalidArgument("secret must be non-empty")
        for slot in self._state.slots:
            if slot.matches(pin):
                raise InvalidArgument("pin already assigned to an existing slot")

        if self._state.status == STATUS_BLANK:
            if not endpoints:
                raise InvalidArgument("first provisioning requires endpoint urls")
            eps = [canonicalize_url(u) for u in endpoints]
            if len(set(eps)) != len(eps):
                raise InvalidArgument("duplicate endpoint urls")
            otp = random_bytes(len(secret_blob))
            s_bd = xor_mask(secret_blob, otp)
            mask = random_bytes(32) if len(eps) > 1 else b""
        else:
            eps = list(self._state.endpoints)
            if endpoints and sorted(canonicalize_url(u) for u in endpoints) != sorted(eps):
                raise InvalidArgument("endpoints differ from the ones this device was set up with")
            if len(secret_blob) != len(self._state.s_bd):
                raise ProvisioningFailed("supplied secret does not match this device")
            otp = yield from self._fetch_existing_otp(eps)
            # The only way to check a re-supplied secret: it must recombine
            # with the service-held pad to the stored masked value.
            if not constant_time_eq(xor_mask(secret_blob, otp), self._state.s_bd):
                raise ProvisioningFailed("supplied secret does not match this device")
            s_bd = self._state.s_bd
            mask = self._state.mask_m

        auth_root = random_bytes(32)
        fingerprints = {}
        for url in eps:
            token = tokens.get(url)
            if token is None:
                raise ProvisioningFailed(f"no registration token for {url}")
            keypair = sss_auth_key(SecretBytes(auth_root), url)
            deposit = otp
            if mask:
                deposit = mask_otp(SecretBytes(otp), SecretBytes(mask), url).reveal()
            doc = {
                "token": base64.b64encode(token).decode("ascii"),
                "public_key": base64.b64encode(keypair.public_bytes).decode("ascii"),
                "otp": base64.b64encode(deposit).decode("ascii"),
            }
            body = json.dumps(doc).encode("utf-8")
            headers = sign_request(keypair, "POST", "/v1/keys", body, now=self._clock())
            result = yield SssExchange(url, "POST", "/v1/keys", headers, body)
            try:
                _parse_result(result)
            except PascoError as exc:
                raise ProvisioningFailed(f"{url} rejected the registration: {exc}") from exc
            fingerprints[url] = keypair.fingerprint

        # Nothing above mutated device state; commit is all-or-nothing.
        pin_salt = random_bytes(16)
        slot = PinSlot(
            role=role,
            pin_salt=pin_salt,
            verifier=_pin_hash(pin, pin_salt, self._iterations),
            iterations=self._iterations,
            auth_root=auth_root,
        )
        self._state.slots.append(slot)
        self._state.status = STATUS_PROVISIONED
        self._state.s_bd = s_bd
        self._state.mask_m = mask
        self._state.endpoints = eps
        self._state.retries = MAX_RETRIES
        self._persist()
        return {
            "fingerprints": {url: base64.b64encode(fp).decode("ascii") for url, fp in fingerprints.items()},
            "endpoints": eps,
            "slot": len(self._state.slots) - 1,
        }

    def _fetch_existing_otp(self, eps):
        """Retrieve the pad via any existing slot's key, unmasked."""
        for slot in self._state.slots:
            for url in eps:
                keypair = sss_auth_key(SecretBytes(slot.auth_root), url)
                headers = sign_request(keypair, "GET", "/v1/otp", b"", now=self._clock())
                result = yield SssExchange(url, "GET", "/v1/otp", headers, b"")
                try:
                    doc = _parse_result(result)
                    otp = base64.b64decode(doc["otp"], validate=True)
                except (PascoError, KeyError, ValueError, TypeError):
                    continue
                if self._state.mask_m:
                    otp = mask_otp(
                        SecretBytes(otp), SecretBytes(self._state.mask_m), url
                    ).reveal()
                if len(otp) == len(self._state.s_bd):
                    return otp
        raise ProvisioningFailed("no endpoint returned a usable pad for the existing slots")

    def _restore(self, handle: SlotHandle):
        self._check_handle(handle, SLOT_RESTORE)
        slot = self._state.slots[handle.slot]
        eps = list(self._state.endpoints)
        tokens = {}
        otp = None
        auth_error = None
        for url in eps:
            keypair = sss_auth_key(SecretBytes(slot.auth_root), url)
            doc = {"role": ROLE_USER_DEVICE, "acl": {"mode": "full", "allowed": []}}
            body = json.dumps(doc).encode("utf-8")
            headers = sign_request(keypair, "POST", "/v1/tokens", body, now=self._clock())
            result = yield SssExchange(url, "POST", "/v1/tokens", headers, body)
            try:
                tokens[url] = _parse_result(result)["token"]
            except (TransportError, Unavailable):
                continue
            except PascoError as exc:
                auth_error = exc
                continue
            if otp is None:
                headers = sign_request(keypair, "GET", "/v1/otp", b"", now=self._clock())
                result = yield SssExchange(url, "GET", "/v1/otp", headers, b"")
                try:
                    raw = base64.b64decode(_parse_result(result)["otp"], validate=True)
                except (TransportError, Unavailable):
                    continue
                except (KeyError, ValueError, TypeError) as exc:
                    raise IntegrityError("endpoint returned a malformed pad") from exc
                if self._state.mask_m:
                    raw = mask_otp(
                        SecretBytes(raw), SecretBytes(self._state.mask_m), url
                    ).reveal()
                if len(raw) != len(self._state.s_bd):
                    raise IntegrityError("endpoint returned a pad of the wrong length")
                otp = raw
        if otp is None or not tokens:
            if auth_error is not None:
                raise auth_error
            raise Unavailable("no endpoint completed the restore exchange")
        secret_blob = xor_mask(self._state.s_bd, otp)
        # s_bd stays: this device remains a valid backup after restore.
        return {
            "secret": base64.b64encode(secret_blob).decode("ascii"),
            "tokens": tokens,
            "endpoints": eps,
        }

    def _emergency(self, handle: SlotHandle, url: str, n: int):
        self._check_handle(handle, SLOT_EMERGENCY)
        slot = self._state.slots[handle.slot]
        eps = list(self._state.endpoints)
        site = canonicalize_url(url)
        mirrored = len(eps) > 1
        last_transport: PascoError | None = None
        for ep in eps:
            keypair = sss_auth_key(SecretBytes(slot.auth_root), ep)
            headers = sign_request(keypair, "GET", "/v1/otp", b"", now=self._clock())
            result = yield SssExchange(ep, "GET", "/v1/otp", headers, b"")
            try:
                raw = base64.b64decode(_parse_result(result)["otp"], validate=True)
            except (TransportError, Unavailable) as exc:
                last_transport = exc
                continue
            if self._state.mask_m:
                raw = mask_otp(SecretBytes(raw), SecretBytes(self._state.mask_m), ep).reveal()
            if len(raw) != len(self._state.s_bd):
                raise IntegrityError("endpoint returned a pad of the wrong length")
            secret = PalpasSecret.deserialize(xor_mask(self._state.s_bd, raw))
            try:
                k_eff = sss_data_key(secret.k_data, ep) if mirrored else secret.k_data
                _, mac_key = split_data_key(k_eff)
                record_id = account_id(mac_key, site)
                path = f"/v1/records/{encode_account_id(record_id)}"
                headers = sign_request(keypair, "GET", path, b"", now=self._clock())
                result = yield SssExchange(ep, "GET", path, headers, b"")
                try:
                    record = EncryptedRecord.from_wire(_parse_result(result))
                except (TransportError, Unavailable) as exc:
                    last_transport = exc
                    continue
                data = open_record(record, k_eff)
                stream = generate_random(secret.seed, data.salt, n)
                return {
                    "username": data.username,
                    "random": base64.b64encode(stream).decode("ascii"),
                    "policy": data.policy.to_json(),
                }
            finally:
                secret.wipe()
        raise last_transport or Unavailable("no endpoint reachable for emergency access")

    # -- shared guards ---------------------------------------------------------

    def _ensure_usable(self) -> None:
        if self._state.status == STATUS_WIPED:
            raise DeviceWiped("device has been erased")
        if self._state.status != STATUS_PROVISIONED:
            raise DeviceStateError("device is not provisioned")

    def _ensure_idle(self) -> None:
        if self._busy:
            raise DeviceBusy("another command is in flight")

    def _check_handle(self, handle: SlotHandle, want_role: str) -> None:
        self._ensure_usable()
        active = self._active_handle
        if active is None or handle.token != active.token or handle.slot >= len(self._state.slots):
            raise Unauthorized("invalid or stale slot handle")
        if handle.role != want_role:
            raise Forbidden(f"slot role does not permit {want_role}")


# -- command port -------------------------------------------------------------

CMD_STATUS = 0x01
CMD_PROVISION = 0x02
CMD_VERIFY_PIN = 0x03
CMD_RESTORE = 0x04
CMD_EMERGENCY = 0x05
CMD_WIPE = 0x06
CMD_SSS_RESULT = 0x11

ST_OK = 0x00
ST_SSS_FORWARD = 0x10
ST_ERROR = 0x7F

_MAX_FRAME = 1 << 20


def encode_frame(payload: bytes) -> bytes:
    if len(payload) > _MAX_FRAME:
        raise InvalidArgument("frame too large")
    return len(payload).to_bytes(4, "big") + payload


def decode_frame(frame: bytes) -> bytes:
    if len(frame) < 4:
        raise InvalidArgument("short frame")
    n = int.from_bytes(frame[:4], "big")
    if n > _MAX_FRAME or len(frame) != 4 + n:
        raise InvalidArgument("frame length mismatch")
    return frame[4:]


def _frame(status: int, doc: dict) -> bytes:
    return encode_frame(bytes([status]) + json.dumps(doc).encode("utf-8"))


class FramePort:
    """Drives a device with length-prefixed frames, like a card reader.

    Commands are one opcode octet plus JSON.  Flow commands answer with
    ST_SSS_FORWARD frames carrying a signed request to relay; the caller
    answers each with CMD_SSS_RESULT until ST_OK or ST_ERROR arrives.
    """

    def __init__(self, device: BackupDevice):
        self._device = device
        self._pending = None

    def handle(self, frame: bytes) -> bytes:
        try:
            payload = decode_frame(frame)
            if not payload:
                raise InvalidArgument("empty frame")
            cmd, doc = payload[0], {}
            if len(payload) > 1:
                doc = json.loads(payload[1:])
            return self._dispatch(cmd, doc)
        except PascoError as exc:
            # A stray command during a flow answers busy without killing the
            # flow; any other failure abandons it.
            if not isinstance(exc, DeviceBusy):
                self._abandon()
            body = {"code": exc.code, "message": str(exc)}
            if isinstance(exc, PinRejected):
                body["remaining"] = exc.remaining
            return _frame(ST_ERROR, body)
        except (ValueError, TypeError, KeyError) as exc:
            self._abandon()
            return _frame(ST_ERROR, {"code": "invalid-argument", "message": f"malformed frame: {exc}"})

    def reset(self) -> None:
        self._abandon()

    def _abandon(self) -> None:
        if self._pending is not None:
            pending, self._pending = self._pending, None
            pending.close()

    def _dispatch(self, cmd: int, doc: dict) -> bytes:
        if cmd == CMD_SSS_RESULT:
            if self._pending is None:
                raise DeviceStateError("no flow awaiting a result")
            result = SssResult(
                status=int(doc.get("status", 0)),
                headers=doc.get("headers", {}),
                body=base64.b64decode(doc.get("body", "")),
            )
            return self._advance(lambda: self._pending.send(result))
        if self._pending is not None:
            raise DeviceBusy("another command is in flight")

        if cmd == CMD_STATUS:
            return _frame(ST_OK, self._device.status())
        if cmd == CMD_VERIFY_PIN:
            handle = self._device.verify_pin(str(doc["pin"]))
            return _frame(ST_OK, {"handle": handle.token, "role": handle.role})
        if cmd == CMD_WIPE:
            return _frame(ST_OK, self._device.wipe())
        if cmd == CMD_PROVISION:
            tokens = {
                canonicalize_url(url): base64.b64decode(value)
                for url, value in dict(doc.get("tokens", {})).items()
            }
            gen = self._device.provision_op(
                secret_blob=base64.b64decode(doc["secret"]),
                pin=str(doc["pin"]),
                role=str(doc["role"]),
                tokens=tokens,
                endpoints=doc.get("endpoints"),
            )
        elif cmd == CMD_RESTORE:
            gen = self._device.restore_op(self._device.resolve_handle(int(doc["handle"])))
        elif cmd == CMD_EMERGENCY:
            gen = self._device.emergency_op(
                self._device.resolve_handle(int(doc["handle"])),
                url=str(doc["url"]),
                n=int(doc.get("n", DEFAULT_STREAM)),
            )
        else:
            raise InvalidArgument(f"unknown command 0x{cmd:02x}")
        self._pending = gen
        return self._advance(lambda: next(gen))

    def _advance(self, step) -> bytes:
        try:
            exchange = step()
        except StopIteration as stop:
            self._pending = None
            return _frame(ST_OK, stop.value or {})
        except PascoError:
            self._pending = None
            raise
        return _frame(
            ST_SSS_FORWARD,
            {
                "endpoint": exchange.endpoint,
                "method": exchange.method,
                "path": exchange.path,
                "headers": exchange.headers,
                "body": base64.b64encode(exchange.body).decode("ascii"),
            },
        )
