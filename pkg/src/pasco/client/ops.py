"""User-device orchestration: the flows a person actually runs.

Passwords are never stored anywhere.  A user device holds the master secret
and regenerates any password from the sealed account record it fetches; a
new device gets the secret either from an existing device (enrollment) or
by recombining a backup device with the service-held pad (restore).  The
code here wires those parties together and owns the client-side policy
decisions: which endpoints must answer, what gets persisted when, and how
failures surface.
"""

from __future__ import annotations

import base64
import json
import time

from ..accounts import AccountData, PalpasSecret, canonicalize_url
from ..crypto import SecretBytes
from ..device import CMD_EMERGENCY, CMD_PROVISION, CMD_RESTORE, CMD_VERIFY_PIN, FramePort
from ..errors import (
    BackupFailed,
    EnrollmentFailed,
    EntropyExhausted,
    InvalidArgument,
    NotFound,
    PascoError,
    SetupFailed,
    TransportError,
    Unavailable,
)
from ..mirror import MirrorClient, Outbox
from ..passwords import PasswordPolicy, derive_password, new_salt, password_for
from ..sss.service import ROLE_EMERGENCY, ROLE_RESTORE, ROLE_USER_DEVICE
from ..wire import signed_call
from . import proxy
from .profile import BackupRecord, DeviceProfile, EndpointConfig, require_absent
from .transport import HttpTransport, fetch_server_key

ENROLLMENT_VERSION = 1
ENROLLMENT_MAX_CHARS = 2048

_SSS_ROLE_FOR_SLOT = {"restore": ROLE_RESTORE, "emergency": ROLE_EMERGENCY}

_FULL_ACL = {"mode": "full", "allowed": []}

EMERGENCY_STREAM = 4096
EMERGENCY_STREAM_RETRY = 8192


def default_transport_factory(url: str, pinned_key):
    return HttpTransport(url, pinned_key=pinned_key)


def _as_port(device) -> FramePort:
    return device if isinstance(device, FramePort) else FramePort(device)


class Client:
    """An enrolled user device: profile plus live transports."""

    def __init__(self, profile: DeviceProfile, transport_factory=None,
                 profile_path: str | None = None, outbox_path: str | None = None,
                 clock=time.time):
        factory = transport_factory or default_transport_factory
        self.profile = profile
        self._profile_path = profile_path
        self._clock = clock
        self.transports = [factory(ep.url, ep.pinned_key) for ep in profile.endpoints]
        self.mirror = MirrorClient(
            self.transports,
            keypair_for=profile.keypair_for,
            k_data=profile.secret.k_data,
            outbox=Outbox(outbox_path),
            clock=clock,
        )

    def close(self) -> None:
        for transport in self.transports:
            transport.close()

    def _save(self) -> None:
        if self._profile_path:
            self.profile.save(self._profile_path)

    def _call(self, transport, method, path, doc=None) -> dict:
        return signed_call(
            transport.request,
            self.profile.keypair_for(transport.url),
            method,
            path,
            doc,
            pinned_key=transport.pinned_key,
            now=self._clock(),
        )

    # -- account records -------------------------------------------------------

    def add_account(self, url: str, username: str, policy: PasswordPolicy | None = None):
        policy = policy or PasswordPolicy.default()
        data = AccountData(salt=new_salt(), policy=policy, username=username, url=url)
        result = self.mirror.put(data)
        self.profile.note_site(url)
        self._save()
        password = password_for(self.profile.secret.seed, data.salt, policy)
        return password, result

    def get_password(self, url: str) -> dict:
        endpoint, data = self.mirror.get(url)
        password = password_for(self.profile.secret.seed, data.salt, data.policy)
        return {
            "password": password,
            "username": data.username,
            "url": data.url,
            "endpoint": endpoint,
        }

    def change_password(self, url: str, policy: PasswordPolicy | None = None,
                        username: str | None = None):
        _, current = self.mirror.get(url)
        data = AccountData(
            salt=new_salt(),
            policy=policy or current.policy,
            username=username if username is not None else current.username,
            url=url,
        )
        result = self.mirror.put(data)
        password = password_for(self.profile.secret.seed, data.salt, data.policy)
        return password, result

    def remove_account(self, url: str):
        result = self.mirror.delete(url)
        self.profile.forget_site(url)
        self._save()
        return result

    def reconcile(self) -> dict:
        return self.mirror.reconcile()

    # -- backup devices ----------------------------------------------------------

    def _acl_for(self, role: str, acl_sites, endpoint_url: str) -> dict:
        if role == "restore":
            return dict(_FULL_ACL)
        allowed = [
            base64.urlsafe_b64encode(self.mirror.id_for(endpoint_url, site)).decode("ascii")
            for site in (acl_sites or [])
        ]
        return {"mode": "list", "allowed": allowed}

    def create_backup(self, device, pin: str, role: str, label: str,
                      acl_sites: list | None = None) -> dict:
        if role not in _SSS_ROLE_FOR_SLOT:
            raise InvalidArgument("backup role must be 'restore' or 'emergency'")
        if acl_sites and role != "emergency":
            raise InvalidArgument("only emergency backups take an account allow-list")
        for rec in self.profile.backups:
            if rec.label == label:
                raise BackupFailed(f"backup {label!r} already exists")
        tokens = {}
        for transport in self.transports:
            doc = {
                "role": _SSS_ROLE_FOR_SLOT[role],
                "acl": self._acl_for(role, acl_sites, transport.url),
            }
            try:
                answer = self._call(transport, "POST", "/v1/tokens", doc)
            except (TransportError, Unavailable) as exc:
                raise BackupFailed(
                    f"{transport.url} is unreachable; provisioning needs every endpoint"
                ) from exc
            tokens[transport.url] = answer["token"]
        port = _as_port(device)
        answer = proxy.command(
            port,
            self.transports,
            CMD_PROVISION,
            {
                "secret": base64.b64encode(self.profile.secret.serialize()).decode("ascii"),
                "pin": pin,
                "role": role,
                "tokens": tokens,
                "endpoints": [t.url for t in self.transports],
            },
        )
        record = BackupRecord(
            label=label,
            role=role,
            fingerprints={
                url: base64.b64decode(fp) for url, fp in answer["fingerprints"].items()
            },
        )
        self.profile.add_backup(record)
        self._save()
        return {"label": label, "role": role, "slot": answer.get("slot"),
                "endpoints": answer["endpoints"]}

    def revoke_backup(self, label: str) -> dict:
        record = self.profile.backup(label)
        outcomes = {}
        still_registered = False
        for transport in self.transports:
            fingerprint = record.fingerprints.get(transport.url)
            if fingerprint is None:
                outcomes[transport.url] = "not-registered"
                continue
            path = "/v1/keys/" + base64.urlsafe_b64encode(fingerprint).decode("ascii")
            try:
                self._call(transport, "DELETE", path)
                outcomes[transport.url] = "revoked"
            except NotFound:
                outcomes[transport.url] = "already-gone"
            except (TransportError, Unavailable) as exc:
                outcomes[transport.url] = f"unreachable: {exc}"
                still_registered = True
        if all(v.startswith("unreachable") for v in outcomes.values()):
            raise Unavailable("no endpoint reachable; backup is still registered everywhere")
        if not still_registered:
            self.profile.backups.remove(record)
        self._save()
        return outcomes

    def set_backup_acl(self, label: str, sites: list) -> dict:
        record = self.profile.backup(label)
        if record.role != "emergency":
            raise InvalidArgument("only emergency backups take an account allow-list")
        outcomes = {}
        failures = []
        for transport in self.transports:
            fingerprint = record.fingerprints.get(transport.url)
            if fingerprint is None:
                failures.append(transport.url)
                outcomes[transport.url] = "not-registered"
                continue
            path = ("/v1/keys/" + base64.urlsafe_b64encode(fingerprint).decode("ascii") + "/acl")
            doc = {"acl": self._acl_for("emergency", sites, transport.url)}
            try:
                self._call(transport, "PUT", path, doc)
                outcomes[transport.url] = "updated"
            except PascoError as exc:
                failures.append(transport.url)
                outcomes[transport.url] = f"failed: {exc}"
        if failures:
            raise BackupFailed(
                f"allow-list not updated everywhere ({', '.join(sorted(failures))}); "
                "re-run once all endpoints answer"
            )
        return outcomes

    def export_enrollment(self) -> str:
        tokens = []
        for transport in self.transports:
            doc = {"role": ROLE_USER_DEVICE, "acl": dict(_FULL_ACL)}
            answer = self._call(transport, "POST", "/v1/tokens", doc)
            tokens.append(answer["token"])
        payload = {
            "v": ENROLLMENT_VERSION,
            "seed": base64.b64encode(self.profile.secret.seed.reveal()).decode("ascii"),
            "k_data": base64.b64encode(self.profile.secret.k_data.reveal()).decode("ascii"),
            "token": tokens[0] if len(tokens) == 1 else tokens,
            "sss_urls": [t.url for t in self.transports],
        }
        if self.profile.mask_m:
            payload["m"] = base64.b64encode(self.profile.mask_m).decode("ascii")
        wrapped = base64.b64encode(json.dumps(payload).encode("utf-8")).decode("ascii")
        if len(wrapped) > ENROLLMENT_MAX_CHARS:
            raise InvalidArgument("enrollment payload exceeds the transfer size limit")
        return wrapped


# -- device lifecycle flows ------------------------------------------------------


def first_time_setup(transports, profile_path: str, clock=time.time) -> DeviceProfile:
    """Create the account at every endpoint and write a fresh profile."""
    require_absent(profile_path)
    if not transports:
        raise SetupFailed("at least one endpoint is required")
    endpoints = []
    for transport in transports:
        try:
            pinned = transport.pinned_key or fetch_server_key(transport)
        except PascoError as exc:
            raise SetupFailed(f"{transport.url}: {exc}") from exc
        transport.pinned_key = pinned
        endpoints.append(EndpointConfig(url=transport.url, pinned_key=pinned))
    if len({ep.url for ep in endpoints}) != len(endpoints):
        raise SetupFailed("duplicate endpoint urls")
    secret = PalpasSecret.generate()
    profile = DeviceProfile.create(secret, endpoints)
    for transport in transports:
        keypair = profile.keypair_for(transport.url)
        doc = {"public_key": base64.b64encode(keypair.public_bytes).decode("ascii")}
        try:
            signed_call(transport.request, keypair, "POST", "/v1/accounts", doc,
                        pinned_key=transport.pinned_key, now=clock())
        except PascoError as exc:
            raise SetupFailed(f"{transport.url}: {exc}") from exc
    profile.save(profile_path)
    return profile


def parse_enrollment(wrapped: str) -> dict:
    try:
        doc = json.loads(base64.b64decode(wrapped, validate=True))
    except (ValueError, TypeError) as exc:
        raise InvalidArgument("enrollment payload is not valid") from exc
    if not isinstance(doc, dict) or doc.get("v") != ENROLLMENT_VERSION:
        raise InvalidArgument("unsupported enrollment payload")
    urls = doc.get("sss_urls")
    if not isinstance(urls, list) or not urls:
        raise InvalidArgument("enrollment payload lists no endpoints")
    urls = [canonicalize_url(u) for u in urls]
    token = doc.get("token")
    tokens = [token] if isinstance(token, str) else list(token or [])
    if len(tokens) != len(urls):
        raise InvalidArgument("enrollment tokens do not line up with endpoints")
    try:
        return {
            "seed": base64.b64decode(doc["seed"], validate=True),
            "k_data": base64.b64decode(doc["k_data"], validate=True),
            "mask_m": base64.b64decode(doc["m"], validate=True) if "m" in doc else b"",
            "urls": urls,
            "tokens": tokens,
        }
    except (KeyError, ValueError, TypeError) as exc:
        raise InvalidArgument("enrollment payload is missing fields") from exc


def _register_user_key(transport, keypair, token_b64: str, clock) -> None:
    doc = {
        "token": token_b64,
        "public_key": base64.b64encode(keypair.public_bytes).decode("ascii"),
    }
    signed_call(transport.request, keypair, "POST", "/v1/keys", doc,
                pinned_key=transport.pinned_key, now=clock())


def enroll_new_device(wrapped: str, profile_path: str, transport_factory=None,
                      clock=time.time) -> DeviceProfile:
    """Join an existing account using a payload exported by an enrolled device."""
    require_absent(profile_path)
    payload = parse_enrollment(wrapped)
    factory = transport_factory or default_transport_factory
    transports = [factory(url, None) for url in payload["urls"]]
    try:
        endpoints = []
        for transport in transports:
            try:
                pinned = transport.pinned_key or fetch_server_key(transport)
            except PascoError as exc:
                raise EnrollmentFailed(
                    f"{transport.url}: {exc}; export a fresh enrollment and retry"
                ) from exc
            transport.pinned_key = pinned
            endpoints.append(EndpointConfig(url=transport.url, pinned_key=pinned))
        secret = PalpasSecret(
            seed=SecretBytes(payload["seed"]),
            k_data=SecretBytes(payload["k_data"]),
        )
        profile = DeviceProfile.create(secret, endpoints, mask_m=payload["mask_m"])
        for transport, token in zip(transports, payload["tokens"]):
            keypair = profile.keypair_for(transport.url)
            try:
                _register_user_key(transport, keypair, token, clock)
            except PascoError as exc:
                raise EnrollmentFailed(
                    f"{transport.url}: {exc}; export a fresh enrollment and retry"
                ) from exc
        profile.save(profile_path)
        return profile
    finally:
        for transport in transports:
            transport.close()


def restore_from_backup(device, pin: str, profile_path: str, transports,
                        clock=time.time) -> tuple[DeviceProfile, dict]:
    """Rebuild a user device from a backup device plus the service-held pads."""
    require_absent(profile_path)
    port = _as_port(device)
    answer = proxy.command(port, transports, CMD_VERIFY_PIN, {"pin": pin})
    restored = proxy.command(port, transports, CMD_RESTORE, {"handle": answer["handle"]})
    secret = PalpasSecret.deserialize(base64.b64decode(restored["secret"]))
    by_url = {t.url: t for t in transports}
    endpoints = []
    for url in restored["endpoints"]:
        transport = by_url.get(url)
        if transport is None:
            raise EnrollmentFailed(f"no transport configured for {url}")
        try:
            pinned = transport.pinned_key or fetch_server_key(transport)
        except PascoError as exc:
            raise EnrollmentFailed(f"{url}: cannot fetch server key: {exc}") from exc
        transport.pinned_key = pinned
        endpoints.append(EndpointConfig(url=url, pinned_key=pinned))
    profile = DeviceProfile.create(secret, endpoints)
    outcomes = {}
    registered = 0
    for url, token_b64 in restored["tokens"].items():
        transport = by_url[url]
        keypair = profile.keypair_for(url)
        try:
            _register_user_key(transport, keypair, token_b64, clock)
            outcomes[url] = "registered"
            registered += 1
        except PascoError as exc:
            outcomes[url] = f"failed: {exc}"
    for url in restored["endpoints"]:
        outcomes.setdefault(url, "no token issued")
    if registered == 0:
        raise EnrollmentFailed("no endpoint accepted the restored device's key")
    profile.save(profile_path)
    return profile, outcomes


def emergency_password(device, pin: str, site_url: str, transports,
                       n: int = EMERGENCY_STREAM) -> dict:
    """Fetch one allow-listed password through an emergency backup device."""
    port = _as_port(device)
    answer = proxy.command(port, transports, CMD_VERIFY_PIN, {"pin": pin})
    handle = answer["handle"]
    for attempt_n in (n, EMERGENCY_STREAM_RETRY):
        result = proxy.command(
            port, transports, CMD_EMERGENCY,
            {"handle": handle, "url": site_url, "n": attempt_n},
        )
        policy = PasswordPolicy.from_json(result["policy"])
        stream = base64.b64decode(result["random"])
        try:
            password = derive_password(stream, policy)
        except EntropyExhausted:
            if attempt_n >= EMERGENCY_STREAM_RETRY:
                raise
            continue
        return {"password": password, "username": result["username"], "url": site_url}
    raise EntropyExhausted("policy could not be satisfied from the requested stream")
