"""Deterministic numeric mode for reproducible CPU runs."""

import torch


def enable_deterministic_mode() -> None:
    """Pin torch to single-threaded deterministic CPU execution.

    Two runs with identical seeds and configs must produce bitwise
    identical parameters, logits, and metrics on the same machine.
    Multi-threaded reductions would keep this true only for a fixed
    thread count, so reproducibility-mode runs use one thread.
    """
    torch.set_num_threads(1)
    torch.use_deterministic_algorithms(True)


def derive_seed(seed: int, *salts: int) -> int:
    """Mix extra integers into a seed so sub-streams are independent.

    Per-step and per-epoch streams are derived rather than consumed from
    one running generator, which keeps interrupted runs resumable.
    """
    value = seed & 0xFFFFFFFF
    for salt in salts:
        value = (value * 1000003 + (salt & 0xFFFFFFFF) + 0x9E3779B9) & 0xFFFFFFFF
    return value
