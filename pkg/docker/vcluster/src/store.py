"""Content-addressed package store.

A derivation is hashed over a canonical, length-prefixed serialization, so
two builds that differ in any input, source, configuration value or builder
script land under different digests and can coexist. Realization is
simulated: the store records the entry, nothing is compiled.

Entries are persisted in SQLite and never updated or removed.
"""

from __future__ import annotations

import hashlib
import json
import logging
import re
import sqlite3
from collections.abc import Callable, Iterable, Mapping
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Union

from .errors import MissingInput, NameCollision, UnknownImage


LOGGER = logging.getLogger("vcluster.store")

DIGEST_HEX_LENGTH = 64
_DIGEST_RE = re.compile(r"^[0-9a-f]{64}$")
_MPI_RE = re.compile(r"^\s*([A-Za-z][\w.+-]*?)[\s/-]+v?(\d+)(?:\.(\d+))?(?:\.(\d+))?\s*$")
# "Open MPI" is the vendor's own spelling.
_OPEN_MPI_RE = re.compile(r"^\s*open[\s_-]+mpi(?=[\s/-])", re.IGNORECASE)
_IMAGE_RE = re.compile(
    r"^(?:(?P<registry>[^/]+)/)?(?P<name>[^:@]+?)(?::(?P<tag>[^@]+))?(?:@(?:sha256:)?(?P<digest>[0-9a-f]{64}))?$"
)

ConfigValue = Union[str, int, float, bool]


def is_digest(value: str) -> bool:
    return bool(_DIGEST_RE.match(str(value)))


# ---------------------------------------------------------------------------
# Derivations
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Derivation:
    name: str
    inputs: frozenset[str] = frozenset()
    sources: frozenset[tuple[str, str]] = frozenset()
    config: tuple[tuple[str, ConfigValue], ...] = ()
    builder: str = ""

    def __post_init__(self) -> None:
        object.__setattr__(self, "inputs", frozenset(self.inputs))
        object.__setattr__(self, "sources", frozenset((str(u), str(d)) for u, d in self.sources))
        raw = self.config.items() if isinstance(self.config, Mapping) else self.config
        pairs = [(str(k), v) for k, v in raw]
        keys = [k for k, _ in pairs]
        if len(set(keys)) != len(keys):
            raise ValueError(f"derivation '{self.name}' has duplicate config keys")
        object.__setattr__(self, "config", tuple(sorted(pairs, key=lambda item: item[0])))
        for digest in self.inputs:
            if not is_digest(digest):
                raise ValueError(f"input '{digest}' is not a 64-character hex digest")


def _frame(text: str) -> bytes:
    raw = text.encode("utf-8")
    return f"{len(raw)}:".encode("ascii") + raw


def _typed(value: ConfigValue) -> str:
    # bool before int: bool is an int subclass
    if isinstance(value, bool):
        return f"b:{'true' if value else 'false'}"
    if isinstance(value, int):
        return f"i:{value}"
    if isinstance(value, float):
        return f"f:{value!r}"
    return f"s:{value}"


def canonical_bytes(d: Derivation) -> bytes:
    parts: list[bytes] = [_frame(d.name)]

    inputs = sorted(d.inputs)
    parts.append(_frame(str(len(inputs))))
    parts.extend(_frame(digest) for digest in inputs)

    sources = sorted(d.sources)
    parts.append(_frame(str(len(sources))))
    for uri, digest in sources:
        parts.append(_frame(uri))
        parts.append(_frame(digest))

    parts.append(_frame(str(len(d.config))))
    for key, value in d.config:
        parts.append(_frame(key))
        parts.append(_frame(_typed(value)))

    parts.append(_frame(d.builder))
    return b"".join(parts)


def hash_derivation(d: Derivation) -> str:
    return hashlib.sha256(canonical_bytes(d)).hexdigest()


# ---------------------------------------------------------------------------
# Store
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class StoreEntry:
    digest: str
    name: str
    realized_at: int
    refs: frozenset[str] = field(default_factory=frozenset)


class DerivationStore:
    """Append-only SQLite store keyed by derivation digest."""

    def __init__(self, db_path: str):
        self._db_path = str(db_path)
        Path(self._db_path).parent.mkdir(parents=True, exist_ok=True)
        with sqlite3.connect(self._db_path) as conn:
            conn.execute(
                """
                CREATE TABLE IF NOT EXISTS store_entries (
                    digest TEXT PRIMARY KEY,
                    name TEXT NOT NULL,
                    realized_at INTEGER NOT NULL,
                    refs_json TEXT NOT NULL
                )
                """
            )

    @property
    def db_path(self) -> str:
        return self._db_path

    def get(self, digest: str) -> StoreEntry | None:
        with sqlite3.connect(self._db_path) as conn:
            row = conn.execute(
                "SELECT digest, name, realized_at, refs_json FROM store_entries WHERE digest = ?",
                (digest,),
            ).fetchone()
        return _row_to_entry(row) if row else None

    def __contains__(self, digest: object) -> bool:
        return isinstance(digest, str) and self.get(digest) is not None

    def size(self) -> int:
        with sqlite3.connect(self._db_path) as conn:
            return int(conn.execute("SELECT COUNT(*) FROM store_entries").fetchone()[0])

    def list_entries(self) -> list[StoreEntry]:
        with sqlite3.connect(self._db_path) as conn:
            rows = conn.execute(
                "SELECT digest, name, realized_at, refs_json FROM store_entries ORDER BY name, digest"
            ).fetchall()
        return [_row_to_entry(row) for row in rows]

    def add(self, entry: StoreEntry) -> None:
        with sqlite3.connect(self._db_path) as conn:
            conn.execute(
                "INSERT INTO store_entries (digest, name, realized_at, refs_json) VALUES (?, ?, ?, ?)",
                (entry.digest, entry.name, int(entry.realized_at), json.dumps(sorted(entry.refs))),
            )


def _row_to_entry(row: tuple) -> StoreEntry:
    return StoreEntry(
        digest=str(row[0]),
        name=str(row[1]),
        realized_at=int(row[2]),
        refs=frozenset(json.loads(str(row[3]) or "[]")),
    )


def realize(d: Derivation, store: DerivationStore, *, now: int = 0) -> StoreEntry:
    digest = hash_derivation(d)
    existing = store.get(digest)
    if existing is not None:
        return existing

    for input_digest in sorted(d.inputs):
        if input_digest not in store:
            raise MissingInput(input_digest)

    entry = StoreEntry(digest=digest, name=d.name, realized_at=int(now), refs=frozenset(d.inputs))
    store.add(entry)
    LOGGER.info("[STORE]: realized %s -> %s", d.name, digest)
    return entry


def compose_env(entries: Iterable[StoreEntry], store: DerivationStore) -> dict[str, str]:
    """Return the name -> digest manifest for *entries* and their ref closure."""
    manifest: dict[str, str] = {}
    seen: set[str] = set()
    stack = list(entries)

    while stack:
        entry = stack.pop()
        if entry.digest in seen:
            continue
        seen.add(entry.digest)

        current = manifest.get(entry.name)
        if current is not None and current != entry.digest:
            a, b = sorted((current, entry.digest))
            raise NameCollision(entry.name, a, b)
        manifest[entry.name] = entry.digest

        for ref in sorted(entry.refs):
            dep = store.get(ref)
            if dep is None:
                raise MissingInput(ref)
            stack.append(dep)

    return dict(sorted(manifest.items()))


def render_manifest(manifest: Mapping[str, str]) -> str:
    return "".join(f"{name} = {digest}\n" for name, digest in sorted(manifest.items()))


# ---------------------------------------------------------------------------
# MPI runtimes
# ---------------------------------------------------------------------------


class MpiImplementation(str, Enum):
    OPENMPI = "OpenMPI"
    MPICH = "MPICH"


_KNOWN_MPI = {item.value.lower(): item.value for item in MpiImplementation}


@dataclass(frozen=True)
class MpiRuntime:
    implementation: str
    version: tuple[int, int, int]

    def __post_init__(self) -> None:
        canonical = _KNOWN_MPI.get(str(self.implementation).strip().lower(), str(self.implementation).strip())
        object.__setattr__(self, "implementation", canonical)
        version = tuple(int(part) for part in self.version)
        if len(version) != 3 or any(part < 0 for part in version):
            raise ValueError(f"MPI version must be three non-negative integers, got {self.version}")
        object.__setattr__(self, "version", version)

    @property
    def major(self) -> int:
        return self.version[0]

    @classmethod
    def parse(cls, text: str) -> "MpiRuntime":
        match = _MPI_RE.match(_OPEN_MPI_RE.sub("OpenMPI", str(text or ""), count=1))
        if not match:
            raise ValueError(f"Cannot parse MPI runtime '{text}' (expected e.g. 'OpenMPI 4.0.1')")
        major, minor, patch = (int(match.group(i) or 0) for i in (2, 3, 4))
        return cls(implementation=match.group(1), version=(major, minor, patch))

    def __str__(self) -> str:
        return f"{self.implementation} {'.'.join(str(part) for part in self.version)}"


@dataclass(frozen=True)
class MpiCompatibility:
    compatible: bool
    reason: str = ""

    def __bool__(self) -> bool:
        return self.compatible


COMPATIBLE = MpiCompatibility(compatible=True)


def check_mpi_compat(host: MpiRuntime, container: MpiRuntime, *, max_major_skew: int = 1) -> MpiCompatibility:
    if host.implementation.lower() != container.implementation.lower():
        return MpiCompatibility(
            compatible=False,
            reason=f"implementation mismatch: host {host.implementation}, container {container.implementation}",
        )
    skew = abs(host.major - container.major)
    if skew > max_major_skew:
        return MpiCompatibility(
            compatible=False,
            reason=f"major version skew {skew} exceeds {max_major_skew} (host {host}, container {container})",
        )
    return COMPATIBLE


# ---------------------------------------------------------------------------
# Image references
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ImageRef:
    registry: str
    name: str
    tag: str = "latest"
    digest: str | None = None
    pinned: bool = False

    def __post_init__(self) -> None:
        if self.pinned and not self.digest:
            raise ValueError(f"pinned image {self.reference} has no digest")
        if self.digest is not None and not is_digest(self.digest):
            raise ValueError(f"image digest '{self.digest}' is not a 64-character hex digest")

    @property
    def reference(self) -> str:
        return f"{self.registry}/{self.name}:{self.tag}"

    @property
    def local_file(self) -> str:
        return f"{self.name.rsplit('/', 1)[-1]}.sif"

    @classmethod
    def parse(cls, text: str, *, default_registry: str = "hub") -> "ImageRef":
        raw = str(text or "").strip()
        match = _IMAGE_RE.match(raw)
        if not raw or not match:
            raise ValueError(f"Cannot parse image reference '{text}'")
        digest = match.group("digest")
        return cls(
            registry=match.group("registry") or default_registry,
            name=match.group("name"),
            tag=match.group("tag") or "latest",
            digest=digest,
            pinned=digest is not None,
        )

    def __str__(self) -> str:
        if self.digest:
            return f"{self.reference}@sha256:{self.digest}"
        return self.reference


RegistryLookup = Union[Mapping[str, str], Callable[[ImageRef], Union[str, None]]]


def pin_image(ref: ImageRef, lookup: RegistryLookup) -> ImageRef:
    if ref.pinned:
        return ref
    digest = lookup(ref) if callable(lookup) else lookup.get(ref.reference)
    if not digest:
        raise UnknownImage(f"registry has no digest for {ref.reference}")
    return ImageRef(registry=ref.registry, name=ref.name, tag=ref.tag, digest=str(digest), pinned=True)
