"""Per-device client state, sealed at rest.

A user device keeps the master secret, one authentication root from which
all its per-endpoint signing keys derive, the endpoint list with pinned
server keys, and bookkeeping for backups it has provisioned.  The whole
document is encrypted on disk; the sibling .key file stands in for an
OS keystore entry.
"""

from __future__ import annotations

import base64
import json
import os
from dataclasses import dataclass, field

from .. import statefile
from ..accounts import PalpasSecret, canonicalize_url
from ..crypto import SecretBytes, SigningKeyPair, random_bytes
from ..errors import Conflict, IntegrityError, InvalidArgument, NotFound
from ..mirror import sss_auth_key, sss_data_key

PROFILE_AAD = b"pasco/profile-v1"
PROFILE_VERSION = 1


def _b64(data: bytes) -> str:
    return base64.b64encode(data).decode("ascii")


@dataclass(frozen=True)
class EndpointConfig:
    url: str
    pinned_key: bytes


@dataclass
class BackupRecord:
    """One provisioned backup-device slot: label plus its service identities."""

    label: str
    role: str
    fingerprints: dict  # canonical endpoint url -> fingerprint octets


@dataclass
class DeviceProfile:
    secret: PalpasSecret
    auth_root: SecretBytes
    endpoints: list
    mask_m: bytes = b""
    backups: list = field(default_factory=list)
    sites: list = field(default_factory=list)

    @classmethod
    def create(cls, secret: PalpasSecret, endpoints: list, mask_m: bytes = b"") -> "DeviceProfile":
        return cls(
            secret=secret,
            auth_root=SecretBytes(random_bytes(32)),
            endpoints=list(endpoints),
            mask_m=mask_m,
        )

    # -- derived material ------------------------------------------------------

    @property
    def mirrored(self) -> bool:
        return len(self.endpoints) > 1

    def keypair_for(self, url: str) -> SigningKeyPair:
        return sss_auth_key(self.auth_root, url)

    def data_key_for(self, url: str) -> SecretBytes:
        if self.mirrored:
            return sss_data_key(self.secret.k_data, url)
        return self.secret.k_data

    def endpoint(self, url: str) -> EndpointConfig:
        canonical = canonicalize_url(url)
        for ep in self.endpoints:
            if ep.url == canonical:
                return ep
        raise NotFound(f"no configured endpoint {canonical}")

    def backup(self, label: str) -> BackupRecord:
        for rec in self.backups:
            if rec.label == label:
                return rec
        raise NotFound(f"no backup named {label!r}")

    def add_backup(self, record: BackupRecord) -> None:
        for rec in self.backups:
            if rec.label == record.label:
                raise Conflict(f"backup {record.label!r} already exists")
        self.backups.append(record)

    def note_site(self, url: str) -> None:
        canonical = canonicalize_url(url)
        if canonical not in self.sites:
            self.sites.append(canonical)
            self.sites.sort()

    def forget_site(self, url: str) -> None:
        canonical = canonicalize_url(url)
        if canonical in self.sites:
            self.sites.remove(canonical)

    # -- persistence -----------------------------------------------------------

    def to_doc(self) -> dict:
        return {
            "v": PROFILE_VERSION,
            "seed": _b64(self.secret.seed.reveal()),
            "k_data": _b64(self.secret.k_data.reveal()),
            "auth_root": _b64(self.auth_root.reveal()),
            "mask_m": _b64(self.mask_m) if self.mask_m else "",
            "endpoints": [
                {"url": ep.url, "pinned_key": _b64(ep.pinned_key)} for ep in self.endpoints
            ],
            "backups": [
                {
                    "label": rec.label,
                    "role": rec.role,
                    "fingerprints": {url: _b64(fp) for url, fp in rec.fingerprints.items()},
                }
                for rec in self.backups
            ],
            "sites": list(self.sites),
        }

    @classmethod
    def from_doc(cls, doc: dict) -> "DeviceProfile":
        if doc.get("v") != PROFILE_VERSION:
            raise IntegrityError("unsupported profile version")
        try:
            secret = PalpasSecret(
                seed=SecretBytes(base64.b64decode(doc["seed"])),
                k_data=SecretBytes(base64.b64decode(doc["k_data"])),
            )
            return cls(
                secret=secret,
                auth_root=SecretBytes(base64.b64decode(doc["auth_root"])),
                endpoints=[
                    EndpointConfig(url=e["url"], pinned_key=base64.b64decode(e["pinned_key"]))
                    for e in doc["endpoints"]
                ],
                mask_m=base64.b64decode(doc["mask_m"]) if doc.get("mask_m") else b"",
                backups=[
                    BackupRecord(
                        label=b["label"],
                        role=b["role"],
                        fingerprints={
                            url: base64.b64decode(fp) for url, fp in b["fingerprints"].items()
                        },
                    )
                    for b in doc.get("backups", [])
                ],
                sites=list(doc.get("sites", [])),
            )
        except (KeyError, ValueError, TypeError) as exc:
            raise IntegrityError("profile document is malformed") from exc

    def save(self, path: str) -> None:
        payload = json.dumps(self.to_doc()).encode("utf-8")
        statefile.save_sealed(path, payload, PROFILE_AAD)

    @classmethod
    def load(cls, path: str) -> "DeviceProfile":
        if not os.path.exists(path):
            raise NotFound(f"no profile at {path}; run setup or enroll first")
        payload = statefile.load_sealed(path, PROFILE_AAD)
        try:
            doc = json.loads(payload)
        except (ValueError, TypeError) as exc:
            raise IntegrityError("profile payload is not valid JSON") from exc
        return cls.from_doc(doc)


def require_absent(path: str, what: str = "profile") -> None:
    """Guard for flows that must not run on an already-enrolled device."""
    if os.path.exists(path):
        raise Conflict(f"a {what} already exists at {path}")
    parent = os.path.dirname(os.path.abspath(path))
    if not os.path.isdir(parent):
        raise InvalidArgument(f"directory {parent} does not exist")
