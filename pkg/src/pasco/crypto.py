"""Deterministic cryptographic building blocks.

Everything keyed here is instantiated from a single primitive, HMAC-SHA256,
run in counter mode with a domain-separation label:

    block(i) = HMAC-SHA256(key, BE32(i) || label || 0x00 || context)
    stream   = block(1) || block(2) || ...   truncated to the requested length

with the labels ``palpas/prg``, ``palpas/kdf``, and ``palpas/mac``.  The
construction is deliberately boring: one audited primitive, bit-exact output
for the committed golden vectors, trivially reproducible in any language.

Authenticated encryption is AES-256-GCM with a random 12-octet nonce
prepended to the ciphertext.  Signatures are Ed25519; a key's fingerprint is
the SHA-256 digest of its 32-octet raw public key.
"""

from __future__ import annotations

import hashlib
import hmac
import os

from cryptography.exceptions import InvalidSignature, InvalidTag
from cryptography.hazmat.primitives.asymmetric.ed25519 import (
    Ed25519PrivateKey,
    Ed25519PublicKey,
)
from cryptography.hazmat.primitives.ciphers.aead import AESGCM

from .errors import AuthenticationFailure, InvalidArgument, InvalidKey

_LABEL_PRG = b"palpas/prg"
_LABEL_KDF = b"palpas/kdf"
_LABEL_MAC = b"palpas/mac"

PRG_MAX_OUT = 8192
RANDOM_MAX = 4096
AEAD_MAX_PLAINTEXT = 64 * 1024
AEAD_NONCE_LEN = 12
FINGERPRINT_LEN = 32


class SecretBytes:
    """An octet string that must not leak through repr/str/logging.

    The raw value is reachable only through :meth:`reveal`, which marks every
    call site where secret material deliberately crosses a boundary (wire
    transfer, sealed storage, key expansion).  Equality is constant-time.
    """

    __slots__ = ("_buf",)

    def __init__(self, value: bytes | bytearray):
        if not isinstance(value, (bytes, bytearray)):
            raise InvalidArgument("SecretBytes requires bytes")
        if not 1 <= len(value) <= 4096:
            raise InvalidArgument("SecretBytes length must be in [1, 4096]")
        self._buf = bytearray(value)

    def reveal(self) -> bytes:
        """Designated export: return the raw octets."""
        return bytes(self._buf)

    def wipe(self) -> None:
        """Best-effort zeroization of the backing buffer."""
        for i in range(len(self._buf)):
            self._buf[i] = 0

    def __len__(self) -> int:
        return len(self._buf)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, SecretBytes):
            return NotImplemented
        return hmac.compare_digest(bytes(self._buf), bytes(other._buf))

    def __hash__(self):
        raise TypeError("SecretBytes is not hashable")

    def __repr__(self) -> str:
        return f"SecretBytes(<{len(self._buf)} octets>)"

    __str__ = __repr__


def _stream(key: SecretBytes, label: bytes, context: bytes, out_len: int) -> bytes:
    raw = key.reveal()
    blocks = []
    info = label + b"\x00" + context
    for i in range(1, (out_len + 31) // 32 + 1):
        blocks.append(hmac.new(raw, i.to_bytes(4, "big") + info, hashlib.sha256).digest())
    return b"".join(blocks)[:out_len]


def prg(key: SecretBytes, context: bytes, out_len: int) -> bytes:
    """Deterministic pseudorandom stream for (key, context)."""
    if not isinstance(out_len, int) or not 1 <= out_len <= PRG_MAX_OUT:
        raise InvalidArgument(f"prg output length must be in [1, {PRG_MAX_OUT}]")
    return _stream(key, _LABEL_PRG, context, out_len)


def kdf(key: SecretBytes, label: str) -> SecretBytes:
    """Derive a 32-octet subkey for a purpose label (e.g. "enc", "mac", a URL)."""
    if not label:
        raise InvalidArgument("kdf label must be non-empty")
    return SecretBytes(_stream(key, _LABEL_KDF, label.encode("utf-8"), 32))


def mac(key: SecretBytes, message: bytes) -> bytes:
    """32-octet message authentication tag."""
    return _stream(key, _LABEL_MAC, message, 32)


def mac_verify(key: SecretBytes, message: bytes, tag: bytes) -> bool:
    """Constant-time tag check."""
    return hmac.compare_digest(mac(key, message), tag)


def constant_time_eq(a: bytes, b: bytes) -> bool:
    return hmac.compare_digest(a, b)


def xor_mask(a: bytes, b: bytes) -> bytes:
    """Byte-wise XOR; its own inverse, used for one-time-pad masking."""
    if len(a) != len(b):
        raise InvalidArgument("xor_mask requires equal-length inputs")
    return bytes(x ^ y for x, y in zip(a, b))


def random_bytes(n: int) -> bytes:
    """Cryptographically secure random octets."""
    if not isinstance(n, int) or not 1 <= n <= RANDOM_MAX:
        raise InvalidArgument(f"random_bytes length must be in [1, {RANDOM_MAX}]")
    return os.urandom(n)


def aead_encrypt(key: SecretBytes, plaintext: bytes, associated_data: bytes) -> bytes:
    """AES-256-GCM; returns nonce || ciphertext+tag.  Key must be 32 octets."""
    if len(key) != 32:
        raise InvalidArgument("aead key must be 32 octets")
    if len(plaintext) > AEAD_MAX_PLAINTEXT:
        raise InvalidArgument("plaintext exceeds 64 KiB")
    nonce = os.urandom(AEAD_NONCE_LEN)
    ct = AESGCM(key.reveal()).encrypt(nonce, plaintext, associated_data)
    return nonce + ct


def aead_decrypt(key: SecretBytes, blob: bytes, associated_data: bytes) -> bytes:
    if len(key) != 32:
        raise InvalidArgument("aead key must be 32 octets")
    if len(blob) < AEAD_NONCE_LEN + 16:
        raise AuthenticationFailure("ciphertext too short")
    nonce, ct = blob[:AEAD_NONCE_LEN], blob[AEAD_NONCE_LEN:]
    try:
        return AESGCM(key.reveal()).decrypt(nonce, ct, associated_data)
    except InvalidTag as exc:
        raise AuthenticationFailure("decryption failed") from exc


class SigningKeyPair:
    """Ed25519 signing key with a stable public-key fingerprint.

    The private half never appears in ``public_bytes``/``fingerprint`` and is
    exported only via :meth:`private_seed` (a SecretBytes).
    """

    __slots__ = ("_priv", "_pub_raw", "_fingerprint")

    def __init__(self, private: Ed25519PrivateKey):
        self._priv = private
        self._pub_raw = private.public_key().public_bytes_raw()
        self._fingerprint = hashlib.sha256(self._pub_raw).digest()

    @classmethod
    def generate(cls) -> "SigningKeyPair":
        return cls.from_seed(SecretBytes(random_bytes(32)))

    @classmethod
    def from_seed(cls, seed: "SecretBytes | bytes") -> "SigningKeyPair":
        raw = seed.reveal() if isinstance(seed, SecretBytes) else bytes(seed)
        if len(raw) != 32:
            raise InvalidKey("signing seed must be 32 octets")
        try:
            return cls(Ed25519PrivateKey.from_private_bytes(raw))
        except Exception as exc:
            raise InvalidKey("malformed signing key material") from exc

    @property
    def public_bytes(self) -> bytes:
        return self._pub_raw

    @property
    def fingerprint(self) -> bytes:
        return self._fingerprint

    def private_seed(self) -> SecretBytes:
        return SecretBytes(self._priv.private_bytes_raw())

    def sign(self, message: bytes) -> bytes:
        return self._priv.sign(message)

    def __repr__(self) -> str:
        return f"SigningKeyPair(fingerprint={self._fingerprint.hex()[:16]}...)"


def public_key_fingerprint(public: bytes) -> bytes:
    """Fingerprint of a raw 32-octet Ed25519 public key."""
    if len(public) != 32:
        raise InvalidKey("public key must be 32 octets")
    return hashlib.sha256(public).digest()


def verify(public: bytes, message: bytes, signature: bytes) -> bool:
    """True iff signature is valid; malformed keys raise, bad signatures do not."""
    if len(public) != 32:
        raise InvalidKey("public key must be 32 octets")
    try:
        key = Ed25519PublicKey.from_public_bytes(public)
    except Exception as exc:
        raise InvalidKey("malformed public key") from exc
    try:
        key.verify(signature, message)
        return True
    except InvalidSignature:
        return False
    except Exception:
        return False
