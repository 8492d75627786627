"""Command-line front end.

Exit codes are stable for scripting: 0 success, 2 authentication or
permission failure, 3 nothing found, 4 endpoint unreachable, 1 anything
else.  Stdout carries only the requested artifact (a password with --show,
an enrollment payload); everything informational goes to stderr.  Without
--show a fetched password lands in a mode-0600 drop file instead of the
terminal, so it never hits scrollback or shell history.
"""

from __future__ import annotations

import argparse
import base64
import getpass
import json
import os
import sys

from ..device import BackupDevice
from ..errors import (
    AuthenticationFailure,
    Forbidden,
    InvalidArgument,
    NotFound,
    PascoError,
    PinRejected,
    TransportError,
    Unauthorized,
    Unavailable,
)
from ..passwords import CLASS_ORDER, PasswordPolicy
from . import ops
from .profile import DeviceProfile
from .transport import HttpTransport

DEFAULT_CONFIG = os.path.expanduser("~/.config/pasco/config.json")
DEFAULT_PROFILE = os.path.expanduser("~/.local/state/pasco/profile")

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_AUTH = 2
EXIT_NOT_FOUND = 3
EXIT_TRANSPORT = 4


def _exit_code(exc: PascoError) -> int:
    if isinstance(exc, (Unauthorized, Forbidden, AuthenticationFailure, PinRejected)):
        return EXIT_AUTH
    if isinstance(exc, NotFound):
        return EXIT_NOT_FOUND
    if isinstance(exc, (TransportError, Unavailable)):
        return EXIT_TRANSPORT
    return EXIT_ERROR


def _say(text: str) -> None:
    print(text, file=sys.stderr)


class Settings:
    """Flags, then config file, then environment, then defaults."""

    def __init__(self, args):
        self.args = args
        path = args.config or os.environ.get("PASCO_CONFIG") or DEFAULT_CONFIG
        self.config = {}
        if os.path.exists(path):
            with open(path, "r", encoding="utf-8") as handle:
                self.config = json.load(handle)

    @property
    def profile_path(self) -> str:
        return (
            self.args.profile
            or self.config.get("profile_path")
            or os.environ.get("PASCO_PROFILE_PATH")
            or DEFAULT_PROFILE
        )

    @property
    def outbox_path(self) -> str:
        return self.config.get("outbox_path") or self.profile_path + ".outbox.json"

    def bootstrap_endpoints(self) -> list:
        """Endpoint list for flows that run before a profile exists."""
        if self.args.sss:
            return [{"url": u, "pinned_key": None} for u in self.args.sss]
        entries = self.config.get("sss")
        if entries:
            return [
                {
                    "url": e["url"],
                    "pinned_key": base64.b64decode(e["pinned_key"]) if e.get("pinned_key") else None,
                }
                for e in entries
            ]
        env_url = os.environ.get("PASCO_SSS_URL")
        if env_url:
            return [{"url": env_url, "pinned_key": None}]
        raise InvalidArgument("no endpoints configured; pass --sss, a config file, or PASCO_SSS_URL")

    def bootstrap_transports(self) -> list:
        return [HttpTransport(e["url"], pinned_key=e["pinned_key"]) for e in self.bootstrap_endpoints()]

    def client(self) -> ops.Client:
        profile = DeviceProfile.load(self.profile_path)
        return ops.Client(
            profile,
            profile_path=self.profile_path,
            outbox_path=self.outbox_path,
        )

    def clip_path(self) -> str:
        if self.args.clip:
            return self.args.clip
        return os.path.join(os.path.dirname(os.path.abspath(self.profile_path)), "clip")


def _emit_password(settings, password: str, context: str) -> None:
    if settings.args.show:
        print(password)
        return
    path = settings.clip_path()
    fd = os.open(path, os.O_WRONLY | os.O_CREAT | os.O_TRUNC, 0o600)
    try:
        os.write(fd, password.encode("utf-8"))
    finally:
        os.close(fd)
    _say(f"{context}: password written to {path}")


def _policy_from(args) -> PasswordPolicy | None:
    touched = any(
        getattr(args, name, None) is not None
        for name in ("min_length", "max_length", "classes", "symbols")
    ) or bool(getattr(args, "require", None))
    if getattr(args, "policy", None):
        return PasswordPolicy.from_json(args.policy)
    if not touched:
        return None
    base = PasswordPolicy.default()
    classes = tuple(args.classes.split(",")) if args.classes else base.allowed_classes
    minimums = {}
    for item in args.require or []:
        name, _, count = item.partition("=")
        if name not in CLASS_ORDER or not count.isdigit():
            raise InvalidArgument(f"--require takes class=N, got {item!r}")
        minimums[name] = int(count)
    if not minimums:
        minimums = {c: n for c, n in base.min_per_class.items() if c in classes}
    return PasswordPolicy(
        min_length=args.min_length if args.min_length is not None else base.min_length,
        max_length=args.max_length if args.max_length is not None else base.max_length,
        allowed_classes=classes,
        symbol_alphabet=args.symbols if args.symbols is not None else base.symbol_alphabet,
        min_per_class=minimums,
    )


def _pin_from(args) -> str:
    if args.pin is not None:
        return args.pin
    if sys.stdin.isatty():
        return getpass.getpass("device pin: ")
    raise InvalidArgument("--pin is required when stdin is not a terminal")


def _device_from(args) -> BackupDevice:
    return BackupDevice(path=args.device)


def _warn_if_degraded(result) -> None:
    if result.degraded:
        _say(
            "warning: not every endpoint accepted the write; "
            "queued for retry (run reconcile once they are back)"
        )


def _add_policy_flags(parser) -> None:
    parser.add_argument("--policy", help="full policy as JSON")
    parser.add_argument("--min-length", type=int, dest="min_length")
    parser.add_argument("--max-length", type=int, dest="max_length")
    parser.add_argument("--classes", help="comma list drawn from lower,upper,digit,symbol")
    parser.add_argument("--symbols", help="symbol alphabet to draw from")
    parser.add_argument(
        "--require", action="append", metavar="CLASS=N",
        help="minimum count for a class (repeatable)",
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pasco", description="deterministic password manager")
    parser.add_argument("--config", help="config file (JSON)")
    parser.add_argument("--profile", help="profile file for this device")
    parser.add_argument("--sss", action="append", metavar="URL",
                        help="endpoint url (repeatable; bootstrap flows only)")
    parser.add_argument("--clip", help="file to drop fetched passwords into")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("setup", help="create the account and this device's profile")

    enroll = sub.add_parser("enroll", help="join an account from an exported payload")
    enroll.add_argument("payload", nargs="?", help="payload text; omit to read stdin")

    sub.add_parser("export", help="print an enrollment payload for a new device")

    add = sub.add_parser("add", help="register an account and print its password")
    add.add_argument("url")
    add.add_argument("username")
    add.add_argument("--show", action="store_true")
    _add_policy_flags(add)

    get = sub.add_parser("get", help="regenerate the password for an account")
    get.add_argument("url")
    get.add_argument("--show", action="store_true")

    change = sub.add_parser("change", help="rotate an account's password")
    change.add_argument("url")
    change.add_argument("--username", help="also change the stored username")
    change.add_argument("--show", action="store_true")
    _add_policy_flags(change)

    remove = sub.add_parser("remove", help="delete an account everywhere")
    remove.add_argument("url")

    backup = sub.add_parser("backup", help="backup device lifecycle")
    bsub = backup.add_subparsers(dest="backup_command", required=True)

    create = bsub.add_parser("create", help="provision a backup device slot")
    create.add_argument("--device", required=True, help="device state file")
    create.add_argument("--label", required=True)
    create.add_argument("--role", required=True, choices=("restore", "emergency"))
    create.add_argument("--pin")
    create.add_argument("--allow", action="append", metavar="URL",
                        help="account an emergency device may read (repeatable)")

    restore = bsub.add_parser("restore", help="rebuild this device from a backup")
    restore.add_argument("--device", required=True)
    restore.add_argument("--pin")

    revoke = bsub.add_parser("revoke", help="cut a lost backup device off")
    revoke.add_argument("--label", required=True)

    acl = bsub.add_parser("acl", help="replace an emergency device's allow-list")
    acl.add_argument("--label", required=True)
    acl.add_argument("--allow", action="append", default=[], metavar="URL")

    emergency = sub.add_parser("emergency", help="read one password via an emergency device")
    emergency.add_argument("url")
    emergency.add_argument("--device", required=True)
    emergency.add_argument("--pin")
    emergency.add_argument("--show", action="store_true")

    sub.add_parser("reconcile", help="push queued writes to endpoints that were down")

    return parser


def _run(args, settings: Settings) -> int:
    command = args.command

    if command == "setup":
        transports = settings.bootstrap_transports()
        try:
            profile = ops.first_time_setup(transports, settings.profile_path)
        finally:
            for t in transports:
                t.close()
        _say(f"profile created at {settings.profile_path}")
        for ep in profile.endpoints:
            _say(f"  endpoint {ep.url}")
        return EXIT_OK

    if command == "enroll":
        payload = args.payload or sys.stdin.read().strip()
        profile = ops.enroll_new_device(payload, settings.profile_path)
        _say(f"enrolled; profile created at {settings.profile_path}")
        for ep in profile.endpoints:
            _say(f"  endpoint {ep.url}")
        return EXIT_OK

    if command == "export":
        client = settings.client()
        try:
            print(client.export_enrollment())
        finally:
            client.close()
        _say("payload printed; it grants full account access and expires quickly")
        return EXIT_OK

    if command == "backup" and args.backup_command == "restore":
        transports = settings.bootstrap_transports()
        try:
            _, outcomes = ops.restore_from_backup(
                _device_from(args), _pin_from(args), settings.profile_path, transports
            )
        finally:
            for t in transports:
                t.close()
        _say(f"profile restored to {settings.profile_path}")
        for url, status in sorted(outcomes.items()):
            _say(f"  {url}: {status}")
        return EXIT_OK

    if command == "emergency":
        transports = settings.bootstrap_transports()
        try:
            result = ops.emergency_password(
                _device_from(args), _pin_from(args), args.url, transports
            )
        finally:
            for t in transports:
                t.close()
        _say(f"account {result['url']} username: {result['username']}")
        _emit_password(settings, result["password"], result["url"])
        return EXIT_OK

    # Everything below needs an enrolled profile.
    client = settings.client()
    try:
        if command == "add":
            password, result = client.add_account(args.url, args.username, _policy_from(args))
            _warn_if_degraded(result)
            _emit_password(settings, password, args.url)
            return EXIT_OK

        if command == "get":
            view = client.get_password(args.url)
            _say(f"account {view['url']} username: {view['username']}")
            _emit_password(settings, view["password"], view["url"])
            return EXIT_OK

        if command == "change":
            password, result = client.change_password(
                args.url, _policy_from(args), username=args.username
            )
            _warn_if_degraded(result)
            _emit_password(settings, password, args.url)
            return EXIT_OK

        if command == "remove":
            result = client.remove_account(args.url)
            _warn_if_degraded(result)
            _say(f"removed {args.url}")
            return EXIT_OK

        if command == "reconcile":
            pushed = client.reconcile()
            if not any(pushed.values()):
                _say("nothing pending")
            for url, count in sorted(pushed.items()):
                if count:
                    _say(f"  {url}: pushed {count}")
            return EXIT_OK

        if command == "backup":
            if args.backup_command == "create":
                info = client.create_backup(
                    _device_from(args), _pin_from(args), args.role, args.label,
                    acl_sites=args.allow,
                )
                _say(f"backup {info['label']!r} provisioned (role {info['role']})")
                return EXIT_OK
            if args.backup_command == "revoke":
                outcomes = client.revoke_backup(args.label)
                for url, status in sorted(outcomes.items()):
                    _say(f"  {url}: {status}")
                return EXIT_OK
            if args.backup_command == "acl":
                outcomes = client.set_backup_acl(args.label, args.allow)
                for url, status in sorted(outcomes.items()):
                    _say(f"  {url}: {status}")
                return EXIT_OK

        raise InvalidArgument(f"unknown command {command!r}")
    finally:
        client.close()


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        settings = Settings(args)
        return _run(args, settings)
    except PinRejected as exc:
        _say(f"error: {exc} ({exc.remaining} attempts left)")
        return _exit_code(exc)
    except PascoError as exc:
        _say(f"error: {exc}")
        return _exit_code(exc)


if __name__ == "__main__":
    sys.exit(main())
