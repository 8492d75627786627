"""Policy-constrained password generation.

Generation is split in two stages so the stages can run on different
parties: ``generate_random`` stretches (seed, salt) into an octet stream,
and ``derive_password`` deterministically encodes that stream into a
password that satisfies a policy.  Same inputs, same password, always.

The encoder is fixed for all time by the committed golden vectors:

1.  Character classes in canonical order: lower, upper, digit, symbol.  The
    symbol class is the policy's ``symbol_alphabet`` with duplicates and any
    alphanumerics removed, original order kept.
2.  Target length: ``min(max_length, max(min_length, 16, sum(min_per_class
    values)))``.  The last term keeps the class minimums satisfiable when
    they exceed the usual floor.
3.  Each position is drawn from the union alphabet by rejection sampling on
    single octets (reject >= 256 - 256 % n, then reduce mod n).
4.  Class minimums are then enforced: positions already funding a minimum
    are locked leftmost-first, and each remaining deficit is filled by
    replacing a uniformly chosen unlocked position (two-octet big-endian
    rejection sampling for the index, one octet for the character), locking
    it afterwards.

Step 4 never breaks an already-funded minimum because replacements touch
only unlocked positions, and it cannot run out of room because the target
length is at least the sum of the minimums.

Rejection sampling can exhaust the stream; that surfaces as
``EntropyExhausted`` and the caller retries with a larger ``n``.  The PRG
is a counter-mode stream, so a longer request extends the shorter one and
the retry re-reads the exact same prefix: the result is unchanged by how
generously the stream was sized.  ``password_for`` packages that loop.
"""

from __future__ import annotations

import json
import string
from dataclasses import dataclass, field

from .crypto import PRG_MAX_OUT, SecretBytes, prg, random_bytes
from .errors import EntropyExhausted, InvalidArgument, PolicyError

CLASS_ORDER = ("lower", "upper", "digit", "symbol")

_FIXED_CLASS_CHARS = {
    "lower": string.ascii_lowercase,
    "upper": string.ascii_uppercase,
    "digit": string.digits,
}

DEFAULT_SYMBOLS = "!#$%&()*+,-./:;<=>?@[]^_{|}~"

SALT_LEN = 32
MAX_LENGTH_CAP = 1024
MIN_STREAM = 64

_INITIAL_STREAM = 256


@dataclass(frozen=True)
class PasswordPolicy:
    """What a site accepts: length bounds, character classes, minimums."""

    min_length: int
    max_length: int
    allowed_classes: tuple[str, ...]
    symbol_alphabet: str = ""
    min_per_class: dict[str, int] = field(default_factory=dict)

    @classmethod
    def default(cls) -> "PasswordPolicy":
        return cls(
            min_length=8,
            max_length=64,
            allowed_classes=CLASS_ORDER,
            symbol_alphabet=DEFAULT_SYMBOLS,
            min_per_class={"lower": 1, "upper": 1, "digit": 1, "symbol": 1},
        )

    def to_json(self) -> str:
        """Canonical JSON (sorted keys, no whitespace, classes in canonical
        order, every field present).  Byte-stable, safe to MAC or diff."""
        validate_policy(self)
        doc = {
            "min_length": self.min_length,
            "max_length": self.max_length,
            "classes": [c for c in CLASS_ORDER if c in self.allowed_classes],
            "symbols": self.symbol_alphabet,
            "min_per_class": {k: self.min_per_class[k] for k in sorted(self.min_per_class)},
        }
        return json.dumps(doc, sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_json(cls, text: str | bytes) -> "PasswordPolicy":
        try:
            doc = json.loads(text)
        except (ValueError, TypeError) as exc:
            raise PolicyError("policy is not valid JSON") from exc
        if not isinstance(doc, dict):
            raise PolicyError("policy must be a JSON object")
        unknown = set(doc) - {"min_length", "max_length", "classes", "symbols", "min_per_class"}
        if unknown:
            raise PolicyError(f"unknown policy fields: {sorted(unknown)}")
        try:
            policy = cls(
                min_length=doc["min_length"],
                max_length=doc["max_length"],
                allowed_classes=tuple(doc["classes"]),
                symbol_alphabet=doc.get("symbols", ""),
                min_per_class=dict(doc.get("min_per_class", {})),
            )
        except (KeyError, TypeError) as exc:
            raise PolicyError("policy fields missing or mistyped") from exc
        validate_policy(policy)
        return policy


def effective_symbols(policy: PasswordPolicy) -> str:
    """Symbol alphabet after removing alphanumerics and duplicates."""
    seen = set()
    out = []
    for ch in policy.symbol_alphabet:
        if ch in seen or ch.isalnum():
            continue
        seen.add(ch)
        out.append(ch)
    return "".join(out)


def validate_policy(policy: PasswordPolicy) -> None:
    if not isinstance(policy.min_length, int) or not isinstance(policy.max_length, int):
        raise PolicyError("length bounds must be integers")
    if policy.min_length < 1:
        raise PolicyError("min_length must be at least 1")
    if policy.max_length < policy.min_length:
        raise PolicyError("max_length must be >= min_length")
    if policy.max_length > MAX_LENGTH_CAP:
        raise PolicyError(f"max_length must be <= {MAX_LENGTH_CAP}")
    if not policy.allowed_classes:
        raise PolicyError("at least one character class is required")
    for name in policy.allowed_classes:
        if name not in CLASS_ORDER:
            raise PolicyError(f"unknown character class {name!r}")
    if len(set(policy.allowed_classes)) != len(policy.allowed_classes):
        raise PolicyError("duplicate character class")
    if not isinstance(policy.symbol_alphabet, str):
        raise PolicyError("symbol alphabet must be a string")
    for ch in policy.symbol_alphabet:
        if not (0x20 <= ord(ch) <= 0x7E):
            raise PolicyError("symbol alphabet must be printable ASCII")
    if "symbol" in policy.allowed_classes and not effective_symbols(policy):
        raise PolicyError("symbol class allowed but symbol alphabet is empty")
    for name, count in policy.min_per_class.items():
        if name not in policy.allowed_classes:
            raise PolicyError(f"minimum set for disallowed class {name!r}")
        if not isinstance(count, int) or count < 0:
            raise PolicyError("class minimums must be non-negative integers")
    if sum(policy.min_per_class.values()) > policy.max_length:
        raise PolicyError("class minimums exceed max_length")


def class_alphabets(policy: PasswordPolicy) -> dict[str, str]:
    """Per-class alphabets for the allowed classes, canonical order."""
    out: dict[str, str] = {}
    for name in CLASS_ORDER:
        if name not in policy.allowed_classes:
            continue
        out[name] = effective_symbols(policy) if name == "symbol" else _FIXED_CLASS_CHARS[name]
    return out


def target_length(policy: PasswordPolicy) -> int:
    return min(
        policy.max_length,
        max(policy.min_length, 16, sum(policy.min_per_class.values())),
    )


def _classify(ch: str, alphabets: dict[str, str]) -> str | None:
    # Classes are disjoint (symbols exclude alphanumerics), so at most one hits.
    for name, chars in alphabets.items():
        if ch in chars:
            return name
    return None


class _Stream:
    """Sequential reader over a fixed octet string; raises when exhausted."""

    def __init__(self, data: bytes):
        self._data = data
        self._pos = 0

    def byte(self) -> int:
        if self._pos >= len(self._data):
            raise EntropyExhausted("octet stream exhausted")
        b = self._data[self._pos]
        self._pos += 1
        return b

    def index(self, n: int) -> int:
        limit = 256 - 256 % n
        while True:
            b = self.byte()
            if b < limit:
                return b % n

    def index16(self, n: int) -> int:
        limit = 65536 - 65536 % n
        while True:
            v = (self.byte() << 8) | self.byte()
            if v < limit:
                return v % n


def new_salt() -> bytes:
    """Fresh per-account salt; resampling it rotates the account's password."""
    return random_bytes(SALT_LEN)


def generate_random(seed: SecretBytes, salt: bytes, n: int) -> bytes:
    """Stretch (seed, salt) into the octet stream the encoder consumes.

    This half can run on a minimal device that knows nothing about policies.
    """
    if not isinstance(salt, (bytes, bytearray)) or not salt:
        raise InvalidArgument("salt must be non-empty bytes")
    if not isinstance(n, int) or n < MIN_STREAM:
        raise InvalidArgument(f"stream length must be at least {MIN_STREAM}")
    return prg(seed, b"pw-random" + bytes(salt), n)


def derive_password(random: bytes, policy: PasswordPolicy) -> str:
    """Deterministically encode an octet stream as a policy-compliant password.

    Raises EntropyExhausted if the stream is too short for the sampling run;
    retry with a longer stream for the same (seed, salt).
    """
    if len(random) < MIN_STREAM:
        raise InvalidArgument(f"random stream must be at least {MIN_STREAM} octets")
    validate_policy(policy)
    alphabets = class_alphabets(policy)
    full = "".join(alphabets.values())
    stream = _Stream(random)
    length = target_length(policy)

    chars = [full[stream.index(len(full))] for _ in range(length)]

    need = {name: policy.min_per_class.get(name, 0) for name in alphabets}
    locked: set[int] = set()
    for name in alphabets:
        funded = 0
        for pos, ch in enumerate(chars):
            if funded >= need[name]:
                break
            if _classify(ch, alphabets) == name:
                locked.add(pos)
                funded += 1
        need[name] -= funded

    for name in alphabets:
        for _ in range(need[name]):
            open_positions = [p for p in range(length) if p not in locked]
            pos = open_positions[stream.index16(len(open_positions))]
            chars[pos] = alphabets[name][stream.index(len(alphabets[name]))]
            locked.add(pos)

    return "".join(chars)


def password_for(seed: SecretBytes, salt: bytes, policy: PasswordPolicy) -> str:
    """Both stages plus the retry-with-longer-stream loop."""
    n = _INITIAL_STREAM
    while True:
        try:
            return derive_password(generate_random(seed, salt, n), policy)
        except EntropyExhausted:
            if n >= PRG_MAX_OUT:
                raise
            n = min(n * 2, PRG_MAX_OUT)


def validate(password: str, policy: PasswordPolicy) -> bool:
    """True iff the password satisfies the policy."""
    try:
        check_password(password, policy)
        return True
    except PolicyError:
        return False


def check_password(password: str, policy: PasswordPolicy) -> None:
    """Like validate, but says what failed."""
    validate_policy(policy)
    if not policy.min_length <= len(password) <= policy.max_length:
        raise PolicyError("length outside policy bounds")
    alphabets = class_alphabets(policy)
    counts = dict.fromkeys(alphabets, 0)
    for ch in password:
        name = _classify(ch, alphabets)
        if name is None:
            raise PolicyError("character outside allowed classes")
        counts[name] += 1
    for name, minimum in policy.min_per_class.items():
        if counts.get(name, 0) < minimum:
            raise PolicyError(f"too few {name} characters")
