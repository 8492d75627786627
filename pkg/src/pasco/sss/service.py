"""The synchronization service: encrypted records, keys, ACLs, OTPs, tokens.

The service never sees a password, salt, policy, username, site URL, or
master secret.  It stores four kinds of state per user account:

* encrypted records, addressed by opaque 32-octet identifiers;
* registered public keys, each with a role and an access-control list;
* at most one one-time pad per registered key (deposited by backup devices);
* short-lived, single-use registration tokens.

Revoking a key deletes the key, its OTP, and its ACL in one step; every
later request signed by that key fails authentication.  That deletion is
what permanently disables a lost backup device.

All requests arrive through :meth:`SssService.handle_api`, which performs
signature verification, clock-skew and nonce checks, routing, and error
mapping.  The same method backs the real HTTP server and the in-process
transport used by tests, so both speak the identical protocol.
"""

from __future__ import annotations

import base64
import json
import os
import threading
import time
from dataclasses import dataclass, field

from ..crypto import SecretBytes, SigningKeyPair, public_key_fingerprint, random_bytes
from ..errors import (
    Conflict,
    Forbidden,
    HTTP_STATUS_BY_CODE,
    InvalidArgument,
    NotFound,
    PascoError,
    Unauthorized,
)
from ..wire import (
    HDR_NONCE,
    HDR_RESPONSE_SIG,
    NonceCache,
    error_body,
    parse_auth_headers,
    sign_response,
    verify_request,
)

ROLE_USER_DEVICE = "user-device"
ROLE_RESTORE = "backup-restore"
ROLE_EMERGENCY = "backup-emergency"
ROLES = (ROLE_USER_DEVICE, ROLE_RESTORE, ROLE_EMERGENCY)

TOKEN_TTL = 300
TOKEN_LEN = 32


def _b64u(data: bytes) -> str:
    return base64.urlsafe_b64encode(data).decode("ascii")


def _unb64u(text: str) -> bytes:
    try:
        return base64.urlsafe_b64decode(text)
    except (ValueError, TypeError) as exc:
        raise InvalidArgument("malformed base64 path segment") from exc


def _b64(data: bytes) -> str:
    return base64.b64encode(data).decode("ascii")


def _unb64_field(doc: dict, name: str, optional: bool = False) -> bytes | None:
    value = doc.get(name)
    if value is None:
        if optional:
            return None
        raise InvalidArgument(f"missing field {name!r}")
    if not isinstance(value, str):
        raise InvalidArgument(f"field {name!r} must be a base64 string")
    try:
        return base64.b64decode(value, validate=True)
    except (ValueError, TypeError) as exc:
        raise InvalidArgument(f"field {name!r} is not valid base64") from exc


@dataclass(frozen=True)
class AclPolicy:
    """Which record identifiers a key may read: everything, or a fixed list."""

    mode: str
    allowed: frozenset = frozenset()

    FULL = "full"
    LIST = "list"

    def permits(self, record_id: bytes) -> bool:
        return self.mode == self.FULL or record_id in self.allowed

    def to_wire(self) -> dict:
        return {"mode": self.mode, "allowed": sorted(_b64u(i) for i in self.allowed)}

    @classmethod
    def from_wire(cls, doc) -> "AclPolicy":
        if not isinstance(doc, dict) or doc.get("mode") not in (cls.FULL, cls.LIST):
            raise InvalidArgument("acl mode must be 'full' or 'list'")
        if doc["mode"] == cls.FULL:
            return cls(cls.FULL)
        allowed = doc.get("allowed", [])
        if not isinstance(allowed, list):
            raise InvalidArgument("acl allowed must be a list")
        ids = set()
        for item in allowed:
            raw = _unb64u(str(item))
            if len(raw) != 32:
                raise InvalidArgument("acl entries must be 32-octet ids")
            ids.add(raw)
        return cls(cls.LIST, frozenset(ids))

    @classmethod
    def full(cls) -> "AclPolicy":
        return cls(cls.FULL)

    @classmethod
    def nothing(cls) -> "AclPolicy":
        return cls(cls.LIST, frozenset())


@dataclass
class RegisteredKey:
    public_key: bytes
    role: str
    acl: AclPolicy
    otp: bytes | None = None

    @property
    def fingerprint(self) -> bytes:
        return public_key_fingerprint(self.public_key)


@dataclass
class PendingToken:
    value: bytes
    issued_at: float
    role: str
    acl: AclPolicy
    issuer: bytes

    def expired(self, now: float) -> bool:
        return now - self.issued_at > TOKEN_TTL


@dataclass
class SssAccount:
    account_id: bytes
    keys: dict = field(default_factory=dict)      # fingerprint -> RegisteredKey
    records: dict = field(default_factory=dict)   # record id -> blob
    tokens: dict = field(default_factory=dict)    # token value -> PendingToken


def _check_role_acl(role: str, acl: AclPolicy) -> AclPolicy:
    """Role invariants: user devices see everything, emergency keys never do."""
    if role not in ROLES:
        raise InvalidArgument(f"unknown role {role!r}")
    if role == ROLE_USER_DEVICE:
        if acl.mode != AclPolicy.FULL:
            raise InvalidArgument("user-device keys require a full ACL")
    elif role == ROLE_EMERGENCY:
        if acl.mode != AclPolicy.LIST:
            raise InvalidArgument("emergency keys must carry a list ACL")
    return acl


class SssService:
    """One service instance; thread-safe; optionally durable.

    ``clock`` is injectable so token-expiry behaviour is testable without
    real waiting.  With ``store_path`` set, every mutation is snapshotted to
    disk with an atomic replace, and the constructor reloads prior state
    (including the service signing key, so restarts keep their identity).
    """

    def __init__(self, store_path: str | None = None, clock=time.time,
                 signing_key: SigningKeyPair | None = None):
        self._clock = clock
        self._lock = threading.RLock()
        self._store_path = store_path
        self._accounts: dict[bytes, SssAccount] = {}
        self._by_fingerprint: dict[bytes, bytes] = {}
        self._nonces = NonceCache()
        self._signing_key = signing_key or SigningKeyPair.generate()
        if store_path and os.path.exists(store_path):
            self._load()

    @property
    def public_key(self) -> bytes:
        return self._signing_key.public_bytes

    # -- domain operations ------------------------------------------------

    def create_account(self, public_key: bytes) -> bytes:
        if len(public_key) != 32:
            raise InvalidArgument("public key must be 32 octets")
        fingerprint = public_key_fingerprint(public_key)
        with self._lock:
            if fingerprint in self._by_fingerprint:
                raise Conflict("key already registered")
            account = SssAccount(account_id=random_bytes(16))
            account.keys[fingerprint] = RegisteredKey(
                public_key=public_key, role=ROLE_USER_DEVICE, acl=AclPolicy.full()
            )
            self._accounts[account.account_id] = account
            self._by_fingerprint[fingerprint] = account.account_id
            self._save()
            return account.account_id

    def issue_token(self, caller: bytes, requested_role: str, requested_acl: AclPolicy) -> PendingToken:
        with self._lock:
            account, key = self._require_key(caller)
            if key.role == ROLE_EMERGENCY:
                raise Forbidden("emergency keys cannot issue tokens")
            if key.role == ROLE_RESTORE and requested_role != ROLE_USER_DEVICE:
                raise Forbidden("restore keys may only enroll replacement user devices")
            acl = _check_role_acl(requested_role, requested_acl)
            token = PendingToken(
                value=random_bytes(TOKEN_LEN),
                issued_at=self._clock(),
                role=requested_role,
                acl=acl,
                issuer=caller,
            )
            account.tokens[token.value] = token
            self._save()
            return token

    def register_key(self, token_value: bytes, public_key: bytes, otp: bytes | None) -> bytes:
        if len(public_key) != 32:
            raise InvalidArgument("public key must be 32 octets")
        fingerprint = public_key_fingerprint(public_key)
        with self._lock:
            account = self._account_for_token(token_value)
            token = account.tokens.get(token_value) if account else None
            if token is None or token.expired(self._clock()):
                if account and token is not None:
                    del account.tokens[token_value]
                    self._save()
                raise Unauthorized("token unknown, expired, or already used")
            if fingerprint in self._by_fingerprint:
                raise Conflict("key already registered")
            del account.tokens[token_value]
            account.keys[fingerprint] = RegisteredKey(
                public_key=public_key, role=token.role, acl=token.acl, otp=otp
            )
            self._by_fingerprint[fingerprint] = account.account_id
            self._save()
            return fingerprint

    def put_record(self, caller: bytes, record_id: bytes, blob: bytes) -> None:
        with self._lock:
            account, key = self._require_key(caller)
            if key.role != ROLE_USER_DEVICE:
                raise Forbidden("only user devices may write records")
            account.records[record_id] = blob
            self._save()

    def get_record(self, caller: bytes, record_id: bytes) -> bytes:
        with self._lock:
            account, key = self._require_key(caller)
            if not key.acl.permits(record_id):
                raise Forbidden("access list does not cover this record")
            blob = account.records.get(record_id)
            if blob is None:
                raise NotFound("no record with this id")
            return blob

    def delete_record(self, caller: bytes, record_id: bytes) -> None:
        with self._lock:
            account, key = self._require_key(caller)
            if key.role != ROLE_USER_DEVICE:
                raise Forbidden("only user devices may delete records")
            if record_id not in account.records:
                raise NotFound("no record with this id")
            del account.records[record_id]
            self._save()

    def fetch_otp(self, caller: bytes) -> bytes:
        with self._lock:
            _, key = self._require_key(caller)
            if key.otp is None:
                raise Forbidden("no one-time pad stored for this key")
            return key.otp

    def revoke_key(self, caller: bytes, target: bytes) -> None:
        with self._lock:
            account, key = self._require_key(caller)
            if key.role != ROLE_USER_DEVICE:
                raise Forbidden("only user devices may revoke keys")
            if target not in account.keys:
                raise NotFound("no such key in this account")
            # Key, OTP, and ACL all live on the RegisteredKey: one deletion
            # removes them atomically.  Outstanding tokens the key requested
            # die with it, so a stolen device cannot leave a live token behind.
            del account.keys[target]
            del self._by_fingerprint[target]
            for value in [v for v, t in account.tokens.items() if t.issuer == target]:
                del account.tokens[value]
            self._save()

    def update_acl(self, caller: bytes, target: bytes, acl: AclPolicy) -> None:
        with self._lock:
            account, key = self._require_key(caller)
            if key.role != ROLE_USER_DEVICE:
                raise Forbidden("only user devices may change ACLs")
            target_key = account.keys.get(target)
            if target_key is None:
                raise NotFound("no such key in this account")
            target_key.acl = _check_role_acl(target_key.role, acl)
            self._save()

    # -- lookup helpers ----------------------------------------------------

    def _require_key(self, fingerprint: bytes) -> tuple[SssAccount, RegisteredKey]:
        account_id = self._by_fingerprint.get(fingerprint)
        if account_id is None:
            raise Unauthorized("unknown or revoked key")
        account = self._accounts[account_id]
        return account, account.keys[fingerprint]

    def _account_for_token(self, token_value: bytes) -> SssAccount | None:
        for account in self._accounts.values():
            if token_value in account.tokens:
                return account
        return None

    def registered_public_key(self, fingerprint: bytes) -> bytes:
        with self._lock:
            return self._require_key(fingerprint)[1].public_key

    # -- request handling ---------------------------------------------------

    def handle_api(self, method: str, path: str, headers, body: bytes):
        """Full protocol handling: returns (status, headers, body octets)."""
        lowered = {str(k).lower(): v for k, v in dict(headers).items()}
        client_nonce = lowered.get(HDR_NONCE.lower(), "")
        try:
            status, doc = self._handle_checked(method, path, headers, body)
            out = json.dumps(doc).encode("utf-8")
        except PascoError as exc:
            status = HTTP_STATUS_BY_CODE.get(exc.code, 500)
            out = error_body(exc)
        headers_out = {
            "Content-Type": "application/json",
            HDR_RESPONSE_SIG: sign_response(self._signing_key, status, out, client_nonce),
        }
        return status, headers_out, out

    def _handle_checked(self, method: str, path: str, headers, body: bytes):
        now = self._clock()
        verb = method.upper()

        if verb == "GET" and path == "/v1/server-key":
            # Unauthenticated by design: how a fresh client learns which key
            # to pin (trust-on-first-use; deployments may pin out of band).
            return 200, {"public_key": _b64(self.public_key)}

        doc = self._parse_json(body) if body else {}
        auth = parse_auth_headers(headers)

        if (verb, path) in (("POST", "/v1/accounts"), ("POST", "/v1/keys")):
            # The signer is not registered yet: the request is verified
            # against the key in the body, proving possession of it.
            public_key = _unb64_field(doc, "public_key")
            if public_key_fingerprint(public_key) != auth.fingerprint:
                raise Unauthorized("fingerprint does not match the enclosed key")
        else:
            with self._lock:
                public_key = self._require_key(auth.fingerprint)[1].public_key

        verify_request(public_key, verb, path, body, auth, now=now)
        self._nonces.check_and_store(auth.nonce_b64, now=now)
        caller = auth.fingerprint

        if verb == "POST" and path == "/v1/accounts":
            return 200, {"account_id": _b64(self.create_account(public_key))}

        if verb == "POST" and path == "/v1/tokens":
            role = doc.get("role")
            if not isinstance(role, str):
                raise InvalidArgument("missing field 'role'")
            acl = AclPolicy.from_wire(doc["acl"]) if "acl" in doc else _default_acl(role)
            token = self.issue_token(caller, role, acl)
            return 200, {"token": _b64(token.value), "ttl": TOKEN_TTL, "role": token.role}

        if verb == "POST" and path == "/v1/keys":
            token_value = _unb64_field(doc, "token")
            otp = _unb64_field(doc, "otp", optional=True)
            fingerprint = self.register_key(token_value, public_key, otp)
            return 200, {"fingerprint": _b64(fingerprint)}

        if verb == "GET" and path == "/v1/otp":
            return 200, {"otp": _b64(self.fetch_otp(caller))}

        if path.startswith("/v1/records/"):
            record_id = _unb64u(path[len("/v1/records/"):])
            if len(record_id) != 32:
                raise InvalidArgument("record id must be 32 octets")
            if verb == "GET":
                blob = self.get_record(caller, record_id)
                return 200, {"id": _b64(record_id), "blob": _b64(blob)}
            if verb == "PUT":
                self.put_record(caller, record_id, _unb64_field(doc, "blob"))
                return 200, {}
            if verb == "DELETE":
                self.delete_record(caller, record_id)
                return 200, {}

        if path.startswith("/v1/keys/"):
            rest = path[len("/v1/keys/"):]
            if verb == "PUT" and rest.endswith("/acl"):
                target = _unb64u(rest[: -len("/acl")])
                if "acl" not in doc:
                    raise InvalidArgument("missing field 'acl'")
                self.update_acl(caller, target, AclPolicy.from_wire(doc["acl"]))
                return 200, {}
            if verb == "DELETE":
                target = _unb64u(rest)
                self.revoke_key(caller, target)
                return 200, {}

        raise NotFound("no such endpoint")

    @staticmethod
    def _parse_json(body: bytes) -> dict:
        try:
            doc = json.loads(body)
        except (ValueError, TypeError) as exc:
            raise InvalidArgument("request body is not valid JSON") from exc
        if not isinstance(doc, dict):
            raise InvalidArgument("request body must be a JSON object")
        return doc

    # -- durability ----------------------------------------------------------

    def _save(self) -> None:
        if not self._store_path:
            return
        state = {
            "v": 1,
            "signing_key": _b64(self._signing_key.private_seed().reveal()),
            "accounts": [
                {
                    "account_id": _b64(acct.account_id),
                    "keys": [
                        {
                            "public_key": _b64(k.public_key),
                            "role": k.role,
                            "acl": k.acl.to_wire(),
                            "otp": _b64(k.otp) if k.otp is not None else None,
                        }
                        for k in acct.keys.values()
                    ],
                    "records": {_b64u(i): _b64(blob) for i, blob in acct.records.items()},
                    "tokens": [
                        {
                            "value": _b64(t.value),
                            "issued_at": t.issued_at,
                            "role": t.role,
                            "acl": t.acl.to_wire(),
                            "issuer": _b64(t.issuer),
                        }
                        for t in acct.tokens.values()
                    ],
                }
                for acct in self._accounts.values()
            ],
        }
        tmp = f"{self._store_path}.tmp"
        with open(tmp, "w", encoding="utf-8") as fh:
            json.dump(state, fh)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, self._store_path)

    def _load(self) -> None:
        with open(self._store_path, encoding="utf-8") as fh:
            state = json.load(fh)
        self._signing_key = SigningKeyPair.from_seed(
            SecretBytes(base64.b64decode(state["signing_key"]))
        )
        for doc in state["accounts"]:
            account = SssAccount(account_id=base64.b64decode(doc["account_id"]))
            for kd in doc["keys"]:
                key = RegisteredKey(
                    public_key=base64.b64decode(kd["public_key"]),
                    role=kd["role"],
                    acl=AclPolicy.from_wire(kd["acl"]),
                    otp=base64.b64decode(kd["otp"]) if kd["otp"] else None,
                )
                account.keys[key.fingerprint] = key
                self._by_fingerprint[key.fingerprint] = account.account_id
            account.records = {
                base64.urlsafe_b64decode(i): base64.b64decode(blob)
                for i, blob in doc["records"].items()
            }
            for td in doc["tokens"]:
                token = PendingToken(
                    value=base64.b64decode(td["value"]),
                    issued_at=td["issued_at"],
                    role=td["role"],
                    acl=AclPolicy.from_wire(td["acl"]),
                    issuer=base64.b64decode(td["issuer"]),
                )
                account.tokens[token.value] = token
            self._accounts[account.account_id] = account

    # -- adversary/inspection surface -----------------------------------------

    def dump_state(self) -> dict:
        """Everything a compromised or subpoenaed server could hand over."""
        with self._lock:
            return {
                _b64(acct.account_id): {
                    "keys": [
                        {
                            "fingerprint": _b64(k.fingerprint),
                            "public_key": _b64(k.public_key),
                            "role": k.role,
                            "acl": k.acl.to_wire(),
                            "otp": _b64(k.otp) if k.otp is not None else None,
                        }
                        for k in acct.keys.values()
                    ],
                    "records": {_b64u(i): _b64(b) for i, b in acct.records.items()},
                }
                for acct in self._accounts.values()
            }


def _default_acl(role: str) -> AclPolicy:
    if role == ROLE_USER_DEVICE:
        return AclPolicy.full()
    return AclPolicy.nothing()
