"""Encrypted-at-rest state files for the client profile and the device image.

Layout: the 8-octet magic "PASCOSE1" followed by an AEAD sealing of the
payload under a key kept in a sibling file (<path>.key, mode 0600).  The key
file stands in for an OS keystore; the point is that the state file alone is
useless, and that tests can model an adversary precisely: reading both files
is "device memory extracted", reading one is not.

Writes are atomic (tempfile + rename) so a crash never leaves a torn state
file.  ``locked`` provides the advisory lock that serializes profile
mutations across processes.
"""

from __future__ import annotations

import contextlib
import fcntl
import os

from .crypto import SecretBytes, aead_decrypt, aead_encrypt, random_bytes
from .errors import IntegrityError

MAGIC = b"PASCOSE1"


def _key_path(path: str) -> str:
    return path + ".key"


def _load_or_create_key(path: str) -> SecretBytes:
    key_path = _key_path(path)
    if os.path.exists(key_path):
        with open(key_path, "rb") as fh:
            raw = fh.read()
        if len(raw) != 32:
            raise IntegrityError("state key file is corrupt")
        return SecretBytes(raw)
    key = random_bytes(32)
    fd = os.open(key_path, os.O_WRONLY | os.O_CREAT | os.O_EXCL, 0o600)
    try:
        os.write(fd, key)
    finally:
        os.close(fd)
    return SecretBytes(key)


def save_sealed(path: str, plaintext: bytes, aad: bytes) -> None:
    key = _load_or_create_key(path)
    try:
        blob = MAGIC + aead_encrypt(key, plaintext, aad)
    finally:
        key.wipe()
    tmp = path + ".tmp"
    fd = os.open(tmp, os.O_WRONLY | os.O_CREAT | os.O_TRUNC, 0o600)
    try:
        os.write(fd, blob)
        os.fsync(fd)
    finally:
        os.close(fd)
    os.replace(tmp, path)


def load_sealed(path: str, aad: bytes) -> bytes:
    with open(path, "rb") as fh:
        blob = fh.read()
    if not blob.startswith(MAGIC):
        raise IntegrityError("not a sealed state file")
    key = _load_or_create_key(path)
    try:
        return aead_decrypt(key, blob[len(MAGIC):], aad)
    finally:
        key.wipe()


@contextlib.contextmanager
def locked(path: str):
    """Advisory exclusive lock scoped to a with-block."""
    lock_path = path + ".lock"
    fd = os.open(lock_path, os.O_WRONLY | os.O_CREAT, 0o600)
    try:
        fcntl.flock(fd, fcntl.LOCK_EX)
        yield
    finally:
        fcntl.flock(fd, fcntl.LOCK_UN)
        os.close(fd)
