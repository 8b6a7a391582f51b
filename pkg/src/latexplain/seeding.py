"""Named random streams derived from one global seed."""
import hashlib

_MASK = (1 << 63) - 1


def derive_seed(seed: int, name: str) -> int:
    """``seed XOR hash(name)``: adding a new stream never shifts the others."""
    digest = hashlib.blake2b(name.encode("utf-8"), digest_size=8).digest()
    return (int(seed) ^ int.from_bytes(digest, "little")) & _MASK
