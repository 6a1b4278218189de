"""Run manifests: what a command read, what it wrote, and how to replay it.

A manifest is written next to a command's outputs as ``manifest.json``. It
is excluded from the determinism contract (it holds wall-clock time); every
other output file is byte-identical on replay.
"""

from __future__ import annotations

import logging
import platform
import time
import warnings
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field
from pathlib import Path

from . import __version__
from ._io import canonical_json, read_json, sha256_file, sha256_text, write_json
from .errors import ValidationError

MANIFEST_NAME = "manifest.json"
SCHEMA = 1


class TamperedManifest(ValidationError):
    """A recorded digest no longer matches the file on disk."""


def component_versions() -> dict:
    import numpy
    import scipy

    from . import _kernels

    out = {
        "mixopt": __version__,
        "python": platform.python_version(),
        "numpy": numpy.__version__,
        "scipy": scipy.__version__,
        "backend": _kernels.backend(),
    }
    if _kernels.HAVE_NUMBA:
        import numba

        out["numba"] = numba.__version__
    return out


@dataclass
class RunManifest:
    command: str
    argv: list
    cwd: str
    config: dict
    config_hash: str
    seeds: dict
    versions: dict = field(default_factory=component_versions)
    inputs: dict = field(default_factory=dict)
    outputs: dict = field(default_factory=dict)
    wall_clock: float = 0.0
    warnings: list = field(default_factory=list)
    exit_code: int = 0
    schema: int = SCHEMA

    @classmethod
    def start(cls, command, argv, config: dict, seeds: dict):
        return cls(
            command=command,
            argv=list(argv),
            cwd=str(Path.cwd()),
            config=config,
            config_hash=sha256_text(canonical_json(config)),
            seeds=seeds,
        )

    def add_input(self, path):
        p = Path(path).resolve()
        self.inputs[str(p)] = sha256_file(p)

    def add_output(self, out_dir, path):
        p = Path(path)
        self.outputs[str(p.relative_to(out_dir))] = sha256_file(p)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, obj) -> "RunManifest":
        if obj.get("schema") != SCHEMA:
            raise ValidationError(f"unsupported manifest schema {obj.get('schema')!r}")
        fields = {k: obj[k] for k in cls.__dataclass_fields__ if k in obj}
        return cls(**fields)

    def write(self, out_dir) -> Path:
        return write_json(Path(out_dir) / MANIFEST_NAME, self.to_dict())


def load_manifest(path) -> RunManifest:
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST_NAME
    return RunManifest.from_dict(read_json(path))


def verify(path, check_inputs: bool = True) -> list:
    """Recompute every recorded digest; returns the mismatches (empty when intact).

    Raises TamperedManifest when anything differs or the config hash is stale.
    """
    path = Path(path)
    out_dir = path if path.is_dir() else path.parent
    man = load_manifest(path)
    bad = []
    if sha256_text(canonical_json(man.config)) != man.config_hash:
        bad.append("config")
    for rel, digest in sorted(man.outputs.items()):
        f = out_dir / rel
        if not f.exists() or sha256_file(f) != digest:
            bad.append(rel)
    if check_inputs:
        for p, digest in sorted(man.inputs.items()):
            if not Path(p).exists() or sha256_file(p) != digest:
                bad.append(p)
    if bad:
        raise TamperedManifest("digest mismatch: " + ", ".join(bad))
    return bad


class _ListHandler(logging.Handler):
    def __init__(self, sink):
        super().__init__(logging.WARNING)
        self.sink = sink

    def emit(self, record):
        self.sink.append(f"{record.name}: {record.getMessage()}")


@contextmanager
def recording(man: RunManifest):
    """Collect warnings and WARNING log records into ``man.warnings`` and time the block."""
    root = logging.getLogger("mixopt")
    handler = _ListHandler(man.warnings)
    root.addHandler(handler)
    t0 = time.perf_counter()
    try:
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            try:
                yield man
            finally:
                seen = set()
                for w in caught:
                    msg = f"{w.category.__name__}: {w.message}"
                    if msg not in seen:
                        seen.add(msg)
                        man.warnings.append(msg)
    finally:
        root.removeHandler(handler)
        man.wall_clock = round(time.perf_counter() - t0, 6)
