"""Encrypted volume: per-file AEAD blobs plus an integrity manifest.

On-disk layout at the volume root:

    manifest.json    canonical-encoded VolumeManifest
    <hex64>          ciphertext blobs, named by SHA-256 of their bytes
    .lock            present only while a writer holds the volume

Every blob is sealed with AES-256-GCM; the associated data binds the
volume name and the logical path (NUL-separated), so a blob moved to a
different path or volume fails authentication. Empty files are sealed
too. Manifest verification needs no key material.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path

from .crypto import (
    AuthenticationFailure,
    Digest,
    SymmetricKey,
    aead_open,
    aead_seal,
    canonical_decode,
    canonical_encode,
    fresh_nonce,
    hash_bytes,
)

MANIFEST_NAME = "manifest.json"
LOCK_NAME = ".lock"


class VolumeError(Exception):
    pass


class VolumeLocked(VolumeError):
    pass


class KeyMismatch(VolumeError):
    pass


class NotFound(VolumeError):
    pass


def _aad(volume_name: str, logical_path: str) -> bytes:
    return volume_name.encode("utf-8") + b"\x00" + logical_path.encode("utf-8")


def _check_path(logical_path: str) -> None:
    parts = logical_path.split("/")
    if not logical_path or any(p in ("", ".", "..") for p in parts):
        raise VolumeError(f"bad logical path {logical_path!r}")
    if logical_path.startswith("/"):
        raise VolumeError("logical paths are relative")


@dataclass(frozen=True)
class ManifestEntry:
    logical_path: str
    nonce: bytes
    ciphertext_hash: Digest
    plaintext_length: int


@dataclass(frozen=True)
class Violation:
    kind: str  # missing_blob | hash_mismatch | duplicate_path | bad_path | orphan_blob
    path: str


class Volume:
    """A directory of sealed blobs opened or created at ``root``."""

    def __init__(self, root: Path, volume_name: str, key_id: Digest,
                 entries: dict[str, ManifestEntry]) -> None:
        self.root = root
        self.volume_name = volume_name
        self.key_id = key_id
        self._entries = entries

    # -- construction -------------------------------------------------------

    @classmethod
    def create(cls, root: Path | str, volume_name: str, key: SymmetricKey) -> "Volume":
        root = Path(root)
        root.mkdir(parents=True, exist_ok=True)
        if (root / MANIFEST_NAME).exists():
            vol = cls.open(root)
            if vol.key_id != key.key_id:
                raise KeyMismatch("existing volume was created under a different key")
            return vol
        vol = cls(root, volume_name, key.key_id, {})
        vol._write_manifest()
        return vol

    @classmethod
    def open(cls, root: Path | str) -> "Volume":
        root = Path(root)
        manifest_path = root / MANIFEST_NAME
        if not manifest_path.exists():
            raise NotFound(f"no manifest at {root}")
        doc = canonical_decode(manifest_path.read_bytes())
        entries: dict[str, ManifestEntry] = {}
        for item in doc["entries"]:
            entries[item["path"]] = ManifestEntry(
                logical_path=item["path"],
                nonce=bytes.fromhex(item["nonce"]),
                ciphertext_hash=Digest.from_hex(item["ciphertext_hash"]),
                plaintext_length=item["plaintext_length"],
            )
        return cls(root, doc["volume_name"], Digest.from_hex(doc["key_id"]), entries)

    # -- manifest -----------------------------------------------------------

    def manifest_doc(self) -> dict:
        return {
            "volume_name": self.volume_name,
            "key_id": self.key_id.hex,
            "entries": [
                {
                    "path": e.logical_path,
                    "nonce": e.nonce.hex(),
                    "ciphertext_hash": e.ciphertext_hash.hex,
                    "plaintext_length": e.plaintext_length,
                }
                for e in sorted(self._entries.values(), key=lambda e: e.logical_path)
            ],
        }

    def _write_manifest(self) -> None:
        data = canonical_encode(self.manifest_doc())
        tmp = self.root / (MANIFEST_NAME + ".tmp")
        tmp.write_bytes(data)
        os.replace(tmp, self.root / MANIFEST_NAME)

    def paths(self) -> list[str]:
        return sorted(self._entries)

    # -- locking ------------------------------------------------------------

    def _acquire_lock(self) -> int:
        try:
            return os.open(self.root / LOCK_NAME, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise VolumeLocked(f"another writer holds {self.root}") from None

    def _release_lock(self, fd: int) -> None:
        os.close(fd)
        (self.root / LOCK_NAME).unlink(missing_ok=True)

    # -- operations ---------------------------------------------------------

    def put(self, key: SymmetricKey, logical_path: str, plaintext: bytes) -> None:
        """Seal one file into the volume; the key must match the manifest."""
        _check_path(logical_path)
        if key.key_id != self.key_id:
            raise KeyMismatch("key commitment does not match the volume manifest")
        fd = self._acquire_lock()
        try:
            nonce = fresh_nonce()
            blob = aead_seal(key, nonce, _aad(self.volume_name, logical_path), plaintext)
            blob_hash = hash_bytes(blob)
            (self.root / blob_hash.hex).write_bytes(blob)
            old = self._entries.get(logical_path)
            self._entries[logical_path] = ManifestEntry(
                logical_path=logical_path,
                nonce=nonce,
                ciphertext_hash=blob_hash,
                plaintext_length=len(plaintext),
            )
            self._write_manifest()
            if old is not None and old.ciphertext_hash != blob_hash:
                (self.root / old.ciphertext_hash.hex).unlink(missing_ok=True)
        finally:
            self._release_lock(fd)

    def get(self, key: SymmetricKey, logical_path: str) -> bytes:
        """Return the exact original bytes, or fail authentication; never partial."""
        entry = self._entries.get(logical_path)
        if entry is None:
            raise NotFound(f"{logical_path!r} not in manifest")
        blob_path = self.root / entry.ciphertext_hash.hex
        if not blob_path.exists():
            raise NotFound(f"blob for {logical_path!r} missing")
        blob = blob_path.read_bytes()
        plaintext = aead_open(key, entry.nonce, _aad(self.volume_name, logical_path), blob)
        if len(plaintext) != entry.plaintext_length:
            raise AuthenticationFailure("plaintext length disagrees with manifest")
        return plaintext

    def verify(self) -> list[Violation]:
        """Integrity check using no secret material."""
        violations: list[Violation] = []
        referenced: set[str] = set()
        for path, entry in sorted(self._entries.items()):
            try:
                _check_path(path)
            except VolumeError:
                violations.append(Violation("bad_path", path))
                continue
            blob_path = self.root / entry.ciphertext_hash.hex
            referenced.add(entry.ciphertext_hash.hex)
            if not blob_path.exists():
                violations.append(Violation("missing_blob", path))
                continue
            if hash_bytes(blob_path.read_bytes()) != entry.ciphertext_hash:
                violations.append(Violation("hash_mismatch", path))
        for child in self.root.iterdir():
            name = child.name
            if name in (MANIFEST_NAME, LOCK_NAME) or name.endswith(".tmp"):
                continue
            if name not in referenced:
                violations.append(Violation("orphan_blob", name))
        return violations


# Functional aliases matching the operation vocabulary used elsewhere.

def volume_put(volume: Volume, key: SymmetricKey, logical_path: str, plaintext: bytes) -> None:
    volume.put(key, logical_path, plaintext)


def volume_get(volume: Volume, key: SymmetricKey, logical_path: str) -> bytes:
    return volume.get(key, logical_path)


def volume_verify(volume: Volume) -> list[Violation]:
    return volume.verify()


def seal_tree(volume: Volume, key: SymmetricKey, source: Path | str) -> int:
    """Seal every regular file under ``source`` by its relative path."""
    source = Path(source)
    count = 0
    for path in sorted(source.rglob("*")):
        if path.is_file():
            volume.put(key, path.relative_to(source).as_posix(), path.read_bytes())
            count += 1
    return count


def unseal_tree(volume: Volume, key: SymmetricKey, dest: Path | str) -> int:
    dest = Path(dest)
    count = 0
    for logical_path in volume.paths():
        target = dest.joinpath(*logical_path.split("/"))
        target.parent.mkdir(parents=True, exist_ok=True)
        target.write_bytes(volume.get(key, logical_path))
        count += 1
    return count
