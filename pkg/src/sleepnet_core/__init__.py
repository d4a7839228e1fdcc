"""sleepnet core - protocol constants, identities, error base."""
from .errors import SleepnetError
from .ids import canonicalize, checkpoint_id, schema_hash, sha256_hex

__all__ = ["SleepnetError", "canonicalize", "checkpoint_id", "schema_hash", "sha256_hex"]
