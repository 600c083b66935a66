"""Versioned checkpoint archive shared by the generator, discriminator and trainer."""
from __future__ import annotations

from pathlib import Path
from typing import Any, Dict, Optional, Union

import torch

from .bert import BertConfig, Discriminator
from .generator import Generator, GeneratorConfig

FORMAT = "ganbert-checkpoint"
VERSION = 1


class CheckpointError(RuntimeError):
    pass


def save_checkpoint(path: Union[str, Path], kind: str, payload: Dict[str, Any]) -> None:
    archive = {"format": FORMAT, "version": VERSION, "kind": kind}
    archive.update(payload)
    torch.save(archive, path)


def load_checkpoint(path: Union[str, Path], kind: Optional[str] = None) -> Dict[str, Any]:
    try:
        archive = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as exc:  # noqa: BLE001 - torch raises a zoo of types here
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if not isinstance(archive, dict) or archive.get("format") != FORMAT:
        raise CheckpointError(f"{path} is not a {FORMAT} archive")
    if archive.get("version") != VERSION:
        raise CheckpointError(f"{path}: checkpoint version {archive.get('version')} != supported {VERSION}")
    if kind is not None and archive.get("kind") != kind:
        raise CheckpointError(f"{path}: expected a {kind!r} checkpoint, found {archive.get('kind')!r}")
    return archive


def save_generator(path, model: Generator) -> None:
    save_checkpoint(path, "generator", {"config": model.config.to_dict(), "state_dict": model.state_dict()})


def load_generator(path) -> Generator:
    archive = load_checkpoint(path, "generator")
    model = Generator(GeneratorConfig(**archive["config"]))
    model.load_state_dict(archive["state_dict"])
    return model


def save_discriminator(path, model: Discriminator) -> None:
    save_checkpoint(path, "discriminator", {"config": model.config.to_dict(), "state_dict": model.state_dict()})


def load_discriminator(path) -> Discriminator:
    archive = load_checkpoint(path, "discriminator")
    model = Discriminator(BertConfig(**archive["config"]))
    model.load_state_dict(archive["state_dict"])
    return model
