"""Mirroring account data across several synchronization services.

Every endpoint gets its own world: records sealed under an endpoint-specific
data key, addressed by endpoint-specific identifiers, authenticated with an
endpoint-specific signing key, and (for backup devices) an endpoint-specific
masking of the one-time pad:

    data key   = kdf(k_data,   canonical endpoint URL)
    auth seed  = kdf(auth_root, canonical endpoint URL)
    pad mask   = prg(m, canonical endpoint URL, |otp|)

so two providers comparing their stores find no identifier, ciphertext,
public key, or pad in common.  A device needs to hold only the root values;
everything endpoint-specific is recomputed on demand.

Writes go to all endpoints; reads are served by the first endpoint that
answers.  Failed writes land in a durable outbox (keyed by endpoint and
record id, last writer wins) that an explicit reconcile pass drains once the
endpoint is reachable again.
"""

from __future__ import annotations

import base64
import json
import os
import time
from dataclasses import dataclass, field

from .accounts import (
    AccountData,
    EncryptedRecord,
    account_id,
    canonicalize_url,
    encode_account_id,
    open_record,
    seal_record,
    split_data_key,
)
from .crypto import SecretBytes, SigningKeyPair, kdf, prg, xor_mask
from .errors import NotFound, TransportError, Unavailable
from .wire import signed_call


def sss_data_key(k_data: SecretBytes, url_sss: str) -> SecretBytes:
    """Endpoint-specific data key; feeds split_data_key like the root does."""
    return kdf(k_data, canonicalize_url(url_sss))


def sss_auth_key(k_auth_root: SecretBytes, url_sss: str) -> SigningKeyPair:
    """Endpoint-specific signing keypair, reproducible from the root."""
    return SigningKeyPair.from_seed(kdf(k_auth_root, canonicalize_url(url_sss)))


def mask_otp(otp: SecretBytes, m: SecretBytes, url_sss: str) -> SecretBytes:
    """Mask (or unmask: it is an involution) a pad for one endpoint."""
    stream = prg(m, canonicalize_url(url_sss).encode("utf-8"), len(otp))
    return SecretBytes(xor_mask(otp.reveal(), stream))


class Outbox:
    """Durable queue of writes an endpoint missed.

    Holds only what the endpoint would have received anyway (opaque ids and
    sealed blobs), so the file needs no extra protection.  One slot per
    (endpoint, record id): a newer write to the same record replaces the
    queued one.
    """

    def __init__(self, path: str | None = None):
        self._path = path
        self._entries: dict[str, dict] = {}
        if path and os.path.exists(path):
            with open(path, encoding="utf-8") as fh:
                self._entries = json.load(fh)

    @staticmethod
    def _key(url: str, record_id: bytes) -> str:
        return f"{url} {base64.urlsafe_b64encode(record_id).decode('ascii')}"

    def record(self, url: str, record_id: bytes, op: str, blob: bytes | None = None) -> None:
        self._entries[self._key(url, record_id)] = {
            "url": url,
            "id": base64.urlsafe_b64encode(record_id).decode("ascii"),
            "op": op,
            "blob": base64.b64encode(blob).decode("ascii") if blob is not None else None,
        }
        self._save()

    def clear(self, url: str, record_id: bytes) -> None:
        if self._entries.pop(self._key(url, record_id), None) is not None:
            self._save()

    def pending(self, url: str) -> list[tuple[bytes, str, bytes | None]]:
        out = []
        for entry in self._entries.values():
            if entry["url"] != url:
                continue
            out.append(
                (
                    base64.urlsafe_b64decode(entry["id"]),
                    entry["op"],
                    base64.b64decode(entry["blob"]) if entry["blob"] else None,
                )
            )
        return out

    def __len__(self) -> int:
        return len(self._entries)

    def _save(self) -> None:
        if not self._path:
            return
        tmp = self._path + ".tmp"
        with open(tmp, "w", encoding="utf-8") as fh:
            json.dump(self._entries, fh)
        os.replace(tmp, self._path)


@dataclass
class MirrorWriteResult:
    """Outcome of a fan-out write: which endpoints took it, which will catch up."""

    written: list = field(default_factory=list)
    deferred: list = field(default_factory=list)

    @property
    def degraded(self) -> bool:
        return bool(self.deferred)


def _record_path(record_id: bytes) -> str:
    return f"/v1/records/{encode_account_id(record_id)}"


class MirrorClient:
    """Fan-out record CRUD over an ordered list of endpoints.

    ``transports`` is an ordered list of objects with ``url`` (canonical),
    ``pinned_key``, and ``request(method, path, headers, body)``.  With a
    single endpoint this degrades to the plain protocol: the root data key
    is used directly and nothing is masked or diversified.
    """

    def __init__(self, transports, keypair_for, k_data: SecretBytes,
                 outbox: Outbox | None = None, clock=time.time):
        if not transports:
            raise Unavailable("no endpoints configured")
        self._transports = list(transports)
        self._keypair_for = keypair_for
        self._k_data = k_data
        self._outbox = outbox if outbox is not None else Outbox()
        self._clock = clock

    @property
    def mirrored(self) -> bool:
        return len(self._transports) > 1

    @property
    def endpoints(self) -> list:
        return [t.url for t in self._transports]

    @property
    def outbox(self) -> Outbox:
        return self._outbox

    def data_key_for(self, url: str) -> SecretBytes:
        return sss_data_key(self._k_data, url) if self.mirrored else self._k_data

    def id_for(self, url: str, site_url: str) -> bytes:
        _, mac_key = split_data_key(self.data_key_for(url))
        return account_id(mac_key, site_url)

    def _call(self, transport, method: str, path: str, doc: dict | None = None) -> dict:
        return signed_call(
            transport.request,
            self._keypair_for(transport.url),
            method,
            path,
            doc,
            pinned_key=transport.pinned_key,
            now=self._clock(),
        )

    def put(self, data: AccountData) -> MirrorWriteResult:
        result = MirrorWriteResult()
        failures = []
        for transport in self._transports:
            record = seal_record(data, self.data_key_for(transport.url))
            blob_b64 = base64.b64encode(record.blob).decode("ascii")
            try:
                self._call(transport, "PUT", _record_path(record.id), {"blob": blob_b64})
            except (TransportError, Unavailable):
                failures.append((transport.url, record))
                continue
            self._outbox.clear(transport.url, record.id)
            result.written.append(transport.url)
        if not result.written:
            raise Unavailable("no endpoint accepted the write")
        for url, record in failures:
            self._outbox.record(url, record.id, "put", record.blob)
            result.deferred.append(url)
        return result

    def get(self, site_url: str) -> tuple[str, AccountData]:
        saw_not_found = False
        for transport in self._transports:
            key = self.data_key_for(transport.url)
            record_id = self.id_for(transport.url, site_url)
            try:
                doc = self._call(transport, "GET", _record_path(record_id))
            except (TransportError, Unavailable):
                continue
            except NotFound:
                saw_not_found = True
                continue
            record = EncryptedRecord.from_wire(doc)
            return transport.url, open_record(record, key)
        if saw_not_found:
            raise NotFound("no endpoint holds this account")
        raise Unavailable("every endpoint is unreachable")

    def delete(self, site_url: str) -> MirrorWriteResult:
        result = MirrorWriteResult()
        failures = []
        missing = 0
        for transport in self._transports:
            record_id = self.id_for(transport.url, site_url)
            try:
                self._call(transport, "DELETE", _record_path(record_id))
            except NotFound:
                missing += 1  # already gone there: converged
            except (TransportError, Unavailable):
                failures.append((transport.url, record_id))
                continue
            self._outbox.clear(transport.url, record_id)
            result.written.append(transport.url)
        if missing == len(self._transports):
            raise NotFound("no endpoint holds this account")
        if not result.written:
            raise Unavailable("no endpoint accepted the delete")
        for url, record_id in failures:
            self._outbox.record(url, record_id, "delete")
            result.deferred.append(url)
        return result

    def reconcile(self) -> dict:
        """Drain the outbox towards every endpoint that is reachable again."""
        pushed = {}
        for transport in self._transports:
            count = 0
            for record_id, op, blob in self._outbox.pending(transport.url):
                try:
                    if op == "put":
                        blob_b64 = base64.b64encode(blob).decode("ascii")
                        self._call(transport, "PUT", _record_path(record_id), {"blob": blob_b64})
                    else:
                        try:
                            self._call(transport, "DELETE", _record_path(record_id))
                        except NotFound:
                            pass  # deletion already effective
                except (TransportError, Unavailable):
                    break  # endpoint still down; keep its queue intact
                self._outbox.clear(transport.url, record_id)
                count += 1
            pushed[transport.url] = count
        return pushed
