"""User-device side: transports, profile state, flows, and the CLI."""

from .ops import (
    Client,
    emergency_password,
    enroll_new_device,
    first_time_setup,
    parse_enrollment,
    restore_from_backup,
)
from .profile import BackupRecord, DeviceProfile, EndpointConfig
from .transport import HttpTransport, LocalTransport, fetch_server_key

__all__ = [
    "BackupRecord",
    "Client",
    "DeviceProfile",
    "EndpointConfig",
    "HttpTransport",
    "LocalTransport",
    "emergency_password",
    "enroll_new_device",
    "fetch_server_key",
    "first_time_setup",
    "parse_enrollment",
    "restore_from_backup",
]
