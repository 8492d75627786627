from .service import (
    AclPolicy,
    PendingToken,
    RegisteredKey,
    ROLE_EMERGENCY,
    ROLE_RESTORE,
    ROLE_USER_DEVICE,
    ROLES,
    SssAccount,
    SssService,
    TOKEN_TTL,
)

__all__ = [
    "AclPolicy",
    "PendingToken",
    "RegisteredKey",
    "ROLE_EMERGENCY",
    "ROLE_RESTORE",
    "ROLE_USER_DEVICE",
    "ROLES",
    "SssAccount",
    "SssService",
    "TOKEN_TTL",
]
