"""
tagtriplet Artifact Helpers
Format-version headers, exact float rendering, digests, run manifests and
cleanup of partial outputs.
"""

import hashlib
import logging
from pathlib import Path
from typing import Dict, Iterable, List, Optional, TextIO, Union

import numpy as np

from .errors import FormatVersionError

logger = logging.getLogger(__name__)

HEADER_PREFIX = "# tagtriplet-"

# kind -> supported versions
FORMAT_VERSIONS = {
    "corpus": (1,),
    "stats": (1,),
    "lsi": (1,),
    "topics": (1,),
    "features": (1,),
    "feature-manifest": (1,),
    "checkpoint": (1,),
    "loss-history": (1,),
    "embeddings": (1,),
    "split": (1,),
    "report": (1,),
    "triplets": (1,),
    "manifest": (1,),
}

PathLike = Union[str, Path]


def header_line(kind: str, version: int = 1) -> str:
    return f"{HEADER_PREFIX}{kind} {version}\n"


def parse_header(line: str) -> Optional[tuple]:
    """Return (kind, version) for a header line, None for any other line"""
    if not line.startswith(HEADER_PREFIX):
        return None
    parts = line[len(HEADER_PREFIX):].split()
    if len(parts) != 2:
        raise FormatVersionError(f"malformed format header: {line.strip()!r}")
    kind, version = parts
    try:
        return kind, int(version)
    except ValueError:
        raise FormatVersionError(f"malformed format version: {line.strip()!r}")


def check_header(line: str, kind: str, path: PathLike = "<stream>") -> int:
    """Validate the first line of an artifact, returning its version"""
    parsed = parse_header(line)
    if parsed is None:
        raise FormatVersionError(f"{path}: missing '{HEADER_PREFIX}{kind}' header line")
    found_kind, version = parsed
    if found_kind != kind:
        raise FormatVersionError(f"{path}: expected a {kind} file, found {found_kind}")
    if version not in FORMAT_VERSIONS.get(kind, ()):
        raise FormatVersionError(f"{path}: unsupported {kind} format version {version}")
    return version


def fmt_float(value: float) -> str:
    """17 significant digits: reading the text back yields the same double"""
    return "%.17g" % value


def fmt_row(values: Iterable[float]) -> str:
    return "\t".join(fmt_float(float(v)) for v in values)


def write_matrix(handle: TextIO, matrix: np.ndarray):
    for row in np.atleast_2d(matrix):
        handle.write(fmt_row(row) + "\n")


def parse_floats(line: str) -> np.ndarray:
    text = line.strip()
    if not text:
        return np.zeros(0)
    return np.array([float(x) for x in text.split("\t")], dtype=np.float64)


def sha256_file(path: PathLike) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def sha256_text(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def write_manifest(
    path: PathLike,
    command: str,
    seed: int,
    config_flat: Dict[str, str],
    inputs: Dict[str, PathLike],
):
    """
    Run manifest: header, `command`, `seed`, every config key and the sha256 of
    every input. The file is itself a valid config file.
    """
    lines = [header_line("manifest"), f"command = {command}\n", f"seed = {seed}\n"]
    for key, value in sorted(config_flat.items()):
        lines.append(f"{key} = {value}\n")
    for name, input_path in sorted(inputs.items()):
        lines.append(f"input.{name}.sha256 = {sha256_file(input_path)}\n")
    Path(path).write_text("".join(lines), encoding="utf-8")
    logger.info(f"Wrote run manifest {path}")


class RunOutputs:
    """Tracks files written by one subcommand so a failure can remove them"""

    def __init__(self, out_dir: PathLike):
        self.out_dir = Path(out_dir)
        self.created: List[Path] = []

    def path(self, target: PathLike) -> Path:
        """Register a target file, creating its parent directory"""
        target = Path(target)
        target.parent.mkdir(parents=True, exist_ok=True)
        # rewritten files count as partial outputs too
        self.created.append(target)
        return target

    def discard(self):
        for target in reversed(self.created):
            try:
                if target.exists():
                    target.unlink()
                    logger.info(f"Removed partial output {target}")
            except OSError as e:
                logger.warning(f"Could not remove partial output {target}: {e}")
        self.created = []
