"""Account records: identification, serialization, sealing.

A record is addressed by an opaque 32-octet identifier, a MAC over its
canonical URL, so the storage service learns nothing about which site a
record belongs to.  The body (salt, policy, username, URL) is serialized
with 32-bit big-endian length prefixes and sealed with AEAD under a key the
service never sees; the identifier rides along as associated data, binding
ciphertext to address.
"""

from __future__ import annotations

import base64
from dataclasses import dataclass
from urllib.parse import urlsplit

from .crypto import (
    SecretBytes,
    aead_decrypt,
    aead_encrypt,
    constant_time_eq,
    kdf,
    mac,
    random_bytes,
)
from .errors import IntegrityError, InvalidArgument
from .passwords import PasswordPolicy

_MAX_FIELD = 1 << 20

ACCOUNT_ID_LEN = 32


def pack_lv(*fields: bytes) -> bytes:
    """Concatenate fields, each prefixed with its 32-bit big-endian length."""
    out = bytearray()
    for f in fields:
        if len(f) > _MAX_FIELD:
            raise InvalidArgument("field too large")
        out += len(f).to_bytes(4, "big")
        out += f
    return bytes(out)


def unpack_lv(data: bytes, count: int) -> list[bytes]:
    """Inverse of pack_lv; rejects trailing octets and truncated input."""
    fields = []
    pos = 0
    for _ in range(count):
        if pos + 4 > len(data):
            raise InvalidArgument("truncated length prefix")
        n = int.from_bytes(data[pos : pos + 4], "big")
        pos += 4
        if n > _MAX_FIELD or pos + n > len(data):
            raise InvalidArgument("truncated field")
        fields.append(data[pos : pos + n])
        pos += n
    if pos != len(data):
        raise InvalidArgument("trailing octets after fields")
    return fields


def canonicalize_url(url: str) -> str:
    """Normalize a URL so equivalent spellings map to the same account.

    Lowercases scheme and host, strips userinfo and default ports, drops the
    fragment, trims trailing slashes from the path, keeps the query.
    """
    if not isinstance(url, str) or not url.strip():
        raise InvalidArgument("url must be a non-empty string")
    parts = urlsplit(url.strip())
    scheme = parts.scheme.lower()
    if scheme not in ("http", "https"):
        raise InvalidArgument("url scheme must be http or https")
    host = parts.hostname
    if not host:
        raise InvalidArgument("url must include a host")
    if ":" in host:
        host = f"[{host}]"
    try:
        port = parts.port
    except ValueError as exc:
        raise InvalidArgument("invalid port") from exc
    default = 80 if scheme == "http" else 443
    netloc = host if port in (None, default) else f"{host}:{port}"
    path = parts.path.rstrip("/")
    query = f"?{parts.query}" if parts.query else ""
    return f"{scheme}://{netloc}{path}{query}"


def split_data_key(k_data: SecretBytes) -> tuple[SecretBytes, SecretBytes]:
    """Derive the (encryption, identification) subkeys from a data key."""
    return kdf(k_data, "enc"), kdf(k_data, "mac")


def account_id(mac_key: SecretBytes, url: str) -> bytes:
    """Opaque 32-octet record identifier for a URL."""
    return mac(mac_key, canonicalize_url(url).encode("utf-8"))


def encode_account_id(id_: bytes) -> str:
    """URL-safe textual form used in routes and JSON."""
    if len(id_) != ACCOUNT_ID_LEN:
        raise InvalidArgument("account id must be 32 octets")
    return base64.urlsafe_b64encode(id_).decode("ascii")


def decode_account_id(text: str) -> bytes:
    try:
        id_ = base64.urlsafe_b64decode(text)
    except (ValueError, TypeError) as exc:
        raise InvalidArgument("malformed account id") from exc
    if len(id_) != ACCOUNT_ID_LEN:
        raise InvalidArgument("account id must be 32 octets")
    return id_


@dataclass
class AccountData:
    """Everything needed to regenerate one site's password."""

    salt: bytes
    policy: PasswordPolicy
    username: str
    url: str

    def serialize(self) -> bytes:
        if not self.salt:
            raise InvalidArgument("account salt must be non-empty")
        return pack_lv(
            self.salt,
            self.policy.to_json().encode("utf-8"),
            self.username.encode("utf-8"),
            canonicalize_url(self.url).encode("utf-8"),
        )

    @classmethod
    def deserialize(cls, data: bytes) -> "AccountData":
        salt, policy_json, username, url = unpack_lv(data, 4)
        if not salt:
            raise InvalidArgument("account salt must be non-empty")
        return cls(
            salt=salt,
            policy=PasswordPolicy.from_json(policy_json.decode("utf-8")),
            username=username.decode("utf-8"),
            url=url.decode("utf-8"),
        )


@dataclass
class EncryptedRecord:
    """What the service actually stores: an opaque id and an opaque blob."""

    id: bytes
    blob: bytes

    def to_wire(self) -> dict:
        return {
            "id": base64.b64encode(self.id).decode("ascii"),
            "blob": base64.b64encode(self.blob).decode("ascii"),
        }

    @classmethod
    def from_wire(cls, doc: dict) -> "EncryptedRecord":
        try:
            id_ = base64.b64decode(doc["id"], validate=True)
            blob = base64.b64decode(doc["blob"], validate=True)
        except (KeyError, TypeError, ValueError) as exc:
            raise InvalidArgument("malformed record document") from exc
        if len(id_) != ACCOUNT_ID_LEN:
            raise InvalidArgument("record id must be 32 octets")
        return cls(id=id_, blob=blob)


def seal_record(data: AccountData, k_data: SecretBytes) -> EncryptedRecord:
    """Encrypt an account record under (a derivative of) the data key."""
    enc_key, mac_key = split_data_key(k_data)
    id_ = account_id(mac_key, data.url)
    return EncryptedRecord(id=id_, blob=aead_encrypt(enc_key, data.serialize(), id_))


def open_record(record: EncryptedRecord, k_data: SecretBytes) -> AccountData:
    """Decrypt and check that the record sits at the address its URL implies."""
    enc_key, mac_key = split_data_key(k_data)
    data = AccountData.deserialize(aead_decrypt(enc_key, record.blob, record.id))
    if not constant_time_eq(account_id(mac_key, data.url), record.id):
        raise IntegrityError("record id does not match its url")
    return data


@dataclass
class PalpasSecret:
    """The pair that regenerates every password: PRG seed and data key.

    This is the value the backup device protects and revocation severs.
    """

    seed: SecretBytes
    k_data: SecretBytes

    @classmethod
    def generate(cls) -> "PalpasSecret":
        return cls(SecretBytes(random_bytes(32)), SecretBytes(random_bytes(32)))

    def serialize(self) -> bytes:
        return pack_lv(self.seed.reveal(), self.k_data.reveal())

    @classmethod
    def deserialize(cls, data: bytes) -> "PalpasSecret":
        seed, k_data = unpack_lv(data, 2)
        return cls(SecretBytes(seed), SecretBytes(k_data))

    def wipe(self) -> None:
        self.seed.wipe()
        self.k_data.wipe()

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, PalpasSecret):
            return NotImplemented
        return self.seed == other.seed and self.k_data == other.k_data
