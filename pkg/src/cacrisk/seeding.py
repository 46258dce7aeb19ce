"""Deterministic seed derivation.

All randomness in a run flows from a single master seed; sub-streams
(per subject, per fold, per training stage) get their own seeds derived
by stable hashing so results do not depend on scheduling or call order.
"""

import hashlib


def derive_seed(master_seed: int, *purpose) -> int:
    """Derive a child seed from a master seed and a purpose tag.

    Uses SHA-256 so the mapping is stable across platforms and Python
    versions (unlike the builtin hash()). Purpose components may be
    strings or integers, e.g. derive_seed(7, "fold", 3).
    """
    tag = ":".join(str(p) for p in purpose)
    digest = hashlib.sha256(f"{master_seed}|{tag}".encode()).digest()
    return int.from_bytes(digest[:8], "little")
