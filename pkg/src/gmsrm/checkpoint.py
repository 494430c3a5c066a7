"""Versioned checkpoint container shared by pre-training and full training.

A checkpoint is a dict with a magic version string, a kind tag ("memory" or
"model"), the model config echo, named tensor state, optional optimizer and
discriminator state, RNG bookkeeping, and the step counter.
"""

from __future__ import annotations

from pathlib import Path

import torch

from .exceptions import ConfigurationError

MAGIC = "GMSRM1"


def save_checkpoint(
    path: str | Path,
    *,
    kind: str,
    config: dict,
    state: dict,
    step: int,
    seed: int,
    disc_state: dict | None = None,
    optim_state: dict | None = None,
    disc_optim_state: dict | None = None,
    torch_rng: torch.Tensor | None = None,
    numpy_rng: dict | None = None,
) -> None:
    payload = {
        "magic": MAGIC,
        "kind": kind,
        "config": config,
        "state": state,
        "step": step,
        "seed": seed,
        "disc_state": disc_state,
        "optim_state": optim_state,
        "disc_optim_state": disc_optim_state,
        "torch_rng": torch_rng,
        "numpy_rng": numpy_rng,
    }
    torch.save(payload, str(path))


def load_checkpoint(path: str | Path, expected_kind: str | None = None) -> dict:
    try:
        payload = torch.load(str(path), map_location="cpu", weights_only=False)
    except FileNotFoundError:
        raise
    except Exception as exc:  # corrupt/foreign file
        raise ConfigurationError(f"cannot read checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict) or payload.get("magic") != MAGIC:
        raise ConfigurationError(f"{path} is not a {MAGIC} checkpoint")
    if expected_kind is not None and payload.get("kind") != expected_kind:
        raise ConfigurationError(
            f"expected a {expected_kind!r} checkpoint, got {payload.get('kind')!r}"
        )
    return payload
