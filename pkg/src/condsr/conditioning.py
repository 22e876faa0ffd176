"""Condition images: bicubic upscaling or externally super-resolved files."""

from __future__ import annotations

import hashlib
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path

from .image import (ImageTensor, bicubic_resize, encode_png, load_image, to_signed)

log = logging.getLogger(__name__)

BICUBIC = "bicubic"
EXTERNAL = "external"


class ConditionError(LookupError):
    pass


@dataclass(frozen=True)
class ConditionSource:
    """Where condition images come from.

    External sources look up ``<directory>/<id>.png``; ``mapping`` (id ->
    path) overrides that per id.
    """

    kind: str = BICUBIC
    directory: Path | None = None
    mapping: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in (BICUBIC, EXTERNAL):
            raise ValueError(f"unknown condition source {self.kind!r}")
        if self.kind == EXTERNAL and self.directory is None and not self.mapping:
            raise ValueError("external condition source needs a directory or a mapping")

    @classmethod
    def external(cls, directory=None, mapping_file=None) -> "ConditionSource":
        mapping = {}
        if mapping_file is not None:
            root = Path(mapping_file).parent
            for line in Path(mapping_file).read_text(encoding="utf-8").splitlines():
                if line.strip():
                    key, path = line.split("\t")
                    mapping[key] = root / path
        return cls(EXTERNAL, Path(directory) if directory is not None else None, mapping)

    def path_for(self, id: str) -> Path:
        if id in self.mapping:
            return Path(self.mapping[id])
        if self.directory is None:
            raise ConditionError(f"no condition mapped for id {id!r}")
        return self.directory / f"{id}.png"

    def describe(self) -> dict:
        out = {"kind": self.kind}
        if self.kind == EXTERNAL:
            out["directory"] = str(self.directory) if self.directory else None
            out["mapping_entries"] = len(self.mapping)
        return out


def condition_for(source: ConditionSource, lr: ImageTensor, scale: int, id: str) -> ImageTensor:
    """The signed condition image for ``lr`` at ``scale``x its size."""
    if scale < 2:
        raise ValueError("scale must be >= 2")
    h, w = scale * lr.height, scale * lr.width
    if source.kind == BICUBIC:
        return to_signed(bicubic_resize(lr, h, w))
    path = source.path_for(id)
    if not path.exists():
        raise ConditionError(f"missing condition image for id {id!r}: {path}")
    img = load_image(path)
    if (img.channels, img.height, img.width) != (lr.channels, h, w):
        raise ConditionError(
            f"condition for id {id!r} has shape {img.shape}, expected {(lr.channels, h, w)}")
    return to_signed(img)


def cache_conditions(source: ConditionSource, entries, out_dir) -> Path:
    """Write ``<id>.png`` per manifest entry plus ``conditions.tsv`` (id, path).

    Files whose content already matches are left untouched.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    lines, written = [], 0
    for entry in entries:
        cond = condition_for(source, load_image(entry.lr_path), entry.scale, entry.id)
        data = encode_png(cond)
        target = out_dir / f"{entry.id}.png"
        if not target.exists() or hashlib.sha256(target.read_bytes()).digest() != hashlib.sha256(data).digest():
            tmp = target.with_name(target.name + ".tmp")
            tmp.write_bytes(data)
            os.replace(tmp, target)
            written += 1
        lines.append(f"{entry.id}\t{target.name}\n")
    manifest = out_dir / "conditions.tsv"
    text = "".join(lines)
    if not manifest.exists() or manifest.read_text(encoding="utf-8") != text:
        manifest.write_text(text, encoding="utf-8")
    log.info("cached %d conditions (%d written) in %s", len(lines), written, out_dir)
    return manifest
