"""PASCO: deterministic passwords with update-tolerant, revocable backups."""

__version__ = "0.1.0"
