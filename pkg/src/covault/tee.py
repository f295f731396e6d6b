"""Simulated trusted execution environment.

Measures workload code, launches it as an isolated process, and signs
attestation quotes binding a verifier nonce to the code measurement.
Isolation is process-level with a private working directory; memory
confidentiality against a root-privileged adversary is NOT simulated.

Workload artifact format (measured bit-exactly):

    magic   b"CVWL1\\0"
    count   u32 big-endian number of entries
    entry   u16 BE path length | path UTF-8 | u8 mode (0 regular, 1 executable)
            | u64 BE content length | content bytes

Entries are sorted by path bytes; paths are relative POSIX paths with no
empty or ".." segments. No timestamps, owners, or other metadata, so the
same tree always archives to the same bytes. ``__pycache__`` directories
and ``*.pyc`` files are skipped.
"""

from __future__ import annotations

import os
import secrets
import shlex
import stat
import struct
import subprocess
import sys
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

from .crypto import (
    CODE_MEASUREMENT_TAG,
    Digest,
    PublicKey,
    Signature,
    SigningKey,
    canonical_encode,
    hash_bytes,
    verify,
)

ARCHIVE_MAGIC = b"CVWL1\x00"
NONCE_SIZE = 32
MAX_REPORT_DATA = 64


class TeeError(Exception):
    pass


# ---------------------------------------------------------------------------
# Deterministic workload archive
# ---------------------------------------------------------------------------

def _skip(rel: str) -> bool:
    parts = rel.split("/")
    return "__pycache__" in parts or rel.endswith(".pyc")


def pack_tree(root: Path | str) -> bytes:
    """Archive a directory tree deterministically (sorted entries, no metadata)."""
    root = Path(root)
    if not root.is_dir():
        raise TeeError(f"not a directory: {root}")
    entries: list[tuple[str, int, bytes]] = []
    for path in sorted(root.rglob("*")):
        if not path.is_file():
            continue
        rel = path.relative_to(root).as_posix()
        if _skip(rel):
            continue
        mode = 1 if path.stat().st_mode & stat.S_IXUSR else 0
        entries.append((rel, mode, path.read_bytes()))
    entries.sort(key=lambda e: e[0].encode("utf-8"))
    out = [ARCHIVE_MAGIC, struct.pack(">I", len(entries))]
    for rel, mode, content in entries:
        encoded = rel.encode("utf-8")
        out.append(struct.pack(">H", len(encoded)))
        out.append(encoded)
        out.append(struct.pack(">B", mode))
        out.append(struct.pack(">Q", len(content)))
        out.append(content)
    return b"".join(out)


def unpack_tree(artifact: bytes, dest: Path | str) -> None:
    dest = Path(dest)
    if not artifact.startswith(ARCHIVE_MAGIC):
        raise TeeError("bad artifact magic")
    offset = len(ARCHIVE_MAGIC)
    (count,) = struct.unpack_from(">I", artifact, offset)
    offset += 4
    for _ in range(count):
        (plen,) = struct.unpack_from(">H", artifact, offset)
        offset += 2
        rel = artifact[offset : offset + plen].decode("utf-8")
        offset += plen
        (mode,) = struct.unpack_from(">B", artifact, offset)
        offset += 1
        (clen,) = struct.unpack_from(">Q", artifact, offset)
        offset += 8
        content = artifact[offset : offset + clen]
        offset += clen
        parts = rel.split("/")
        if any(p in ("", "..") for p in parts):
            raise TeeError(f"illegal path in artifact: {rel!r}")
        target = dest.joinpath(*parts)
        target.parent.mkdir(parents=True, exist_ok=True)
        target.write_bytes(content)
        if mode == 1:
            target.chmod(0o700)
    if offset != len(artifact):
        raise TeeError("trailing bytes after last artifact entry")


# ---------------------------------------------------------------------------
# Measurement and quotes
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Measurement:
    digest: Digest

    @property
    def hex(self) -> str:
        return self.digest.hex


def measure_code(artifact: bytes) -> Measurement:
    """Code identity: hash of a fixed domain tag followed by the artifact bytes."""
    if not artifact:
        raise TeeError("artifact must be nonempty")
    return Measurement(hash_bytes(CODE_MEASUREMENT_TAG + artifact))


@dataclass(frozen=True)
class TeeQuote:
    measurement: Measurement
    nonce: bytes
    report_data: bytes
    signature: Signature

    def signed_body(self) -> bytes:
        return canonical_encode(
            {
                "measurement": self.measurement.hex,
                "nonce": self.nonce.hex(),
                "report_data": self.report_data.hex(),
            }
        )

    def to_doc(self) -> dict:
        return {
            "measurement": self.measurement.hex,
            "nonce": self.nonce.hex(),
            "report_data": self.report_data.hex(),
            "signature": self.signature.hex,
        }

    @classmethod
    def from_doc(cls, doc: dict) -> "TeeQuote":
        return cls(
            measurement=Measurement(Digest.from_hex(doc["measurement"])),
            nonce=bytes.fromhex(doc["nonce"]),
            report_data=bytes.fromhex(doc["report_data"]),
            signature=Signature.from_hex(doc["signature"]),
        )


@dataclass(frozen=True)
class TeeQuoteVerification:
    ok: bool
    reason: Optional[str] = None  # bad_signature | nonce_mismatch
    measurement: Optional[Measurement] = None


def verify_tee_quote(
    quote: TeeQuote, expected_nonce: bytes, attestation_root_pk: PublicKey
) -> TeeQuoteVerification:
    """Return the attested measurement only if signature and nonce check out."""
    if not verify(attestation_root_pk, quote.signed_body(), quote.signature):
        return TeeQuoteVerification(False, "bad_signature")
    if quote.nonce != expected_nonce:
        return TeeQuoteVerification(False, "nonce_mismatch")
    return TeeQuoteVerification(True, measurement=quote.measurement)


# ---------------------------------------------------------------------------
# Enclave launch
# ---------------------------------------------------------------------------

class EnclaveHandle:
    """A launched workload: private working directory plus a stdin channel.

    Keys reach the process only through ``inject`` (one canonical document
    written to stdin), never via environment variables or world-readable
    files.
    """

    def __init__(
        self,
        measurement: Measurement,
        process: subprocess.Popen,
        workdir: Path,
        enclave_id: str,
    ) -> None:
        self.measurement = measurement
        self.process = process
        self.workdir = workdir
        self.enclave_id = enclave_id
        self.injected_keys: list[str] = []
        self._stdout: Optional[bytes] = None
        self._stderr: Optional[bytes] = None

    @property
    def alive(self) -> bool:
        return self.process.poll() is None

    def inject(self, document: dict) -> None:
        if not self.alive:
            raise TeeError("enclave process is not running")
        payload = canonical_encode(document) + b"\n"
        assert self.process.stdin is not None
        self.process.stdin.write(payload)
        self.process.stdin.close()
        # keep communicate() from flushing the closed pipe
        self.process.stdin = None
        self.injected_keys.extend(sorted(document.get("keys", {})))

    def close_stdin(self) -> None:
        if self.process.stdin and not self.process.stdin.closed:
            self.process.stdin.close()
            self.process.stdin = None

    def wait(self, timeout: float = 120.0) -> int:
        try:
            out, err = self.process.communicate(timeout=timeout)
        except subprocess.TimeoutExpired:
            self.process.kill()
            out, err = self.process.communicate()
            raise TeeError(f"enclave {self.enclave_id} timed out")
        self._stdout, self._stderr = out, err
        return self.process.returncode

    def diagnostics(self) -> str:
        parts = []
        if self._stdout:
            parts.append("stdout:\n" + self._stdout.decode("utf-8", "replace"))
        if self._stderr:
            parts.append("stderr:\n" + self._stderr.decode("utf-8", "replace"))
        return "\n".join(parts)


def _resolve_exec(exec_command: str) -> list[str]:
    argv = shlex.split(exec_command)
    if not argv:
        raise TeeError("empty exec command")
    if argv[0] in ("python", "python3"):
        argv[0] = sys.executable
    return argv


class TeeSimulator:
    """Stands in for the TEE engine plus its vendor attestation service.

    Holds one attestation keypair generated at construction; the public key
    is the verifier's root of trust for enclave quotes.
    """

    def __init__(
        self,
        base_dir: Optional[Path | str] = None,
        attestation_key: Optional[SigningKey] = None,
    ) -> None:
        self._attestation_key = attestation_key or SigningKey.generate()
        self._base_dir = Path(base_dir) if base_dir else Path(tempfile.mkdtemp(prefix="covault-tee-"))
        self._base_dir.mkdir(parents=True, exist_ok=True)

    @classmethod
    def with_state(cls, state_dir: Path | str) -> "TeeSimulator":
        """Persist the attestation key so separate invocations share one root."""
        state_dir = Path(state_dir)
        state_dir.mkdir(parents=True, exist_ok=True)
        key_path = state_dir / "attestation.key"
        if key_path.exists():
            key = SigningKey.from_hex(key_path.read_text().strip())
        else:
            key = SigningKey.generate()
            key_path.touch(mode=0o600)
            key_path.write_text(key.private_hex() + "\n")
        return cls(base_dir=state_dir / "enclaves", attestation_key=key)

    @property
    def attestation_public_key(self) -> PublicKey:
        return self._attestation_key.public_key

    def launch(self, artifact: bytes, exec_command: str) -> EnclaveHandle:
        """Measure the artifact, extract it into a private directory, start exec."""
        measurement = measure_code(artifact)
        enclave_id = secrets.token_hex(8)
        workdir = self._base_dir / f"enclave-{enclave_id}"
        workdir.mkdir(mode=0o700)
        unpack_tree(artifact, workdir)
        argv = _resolve_exec(exec_command)
        env = {
            "PATH": os.environ.get("PATH", "/usr/bin:/bin"),
            # the package itself plays the role of the in-enclave runtime
            "PYTHONPATH": str(Path(__file__).resolve().parent.parent),
        }
        try:
            process = subprocess.Popen(
                argv,
                cwd=workdir,
                env=env,
                stdin=subprocess.PIPE,
                stdout=subprocess.PIPE,
                stderr=subprocess.PIPE,
            )
        except OSError as e:
            raise TeeError(f"launch failed for {argv!r}: {e}") from e
        return EnclaveHandle(measurement, process, workdir, enclave_id)

    def quote(self, handle: EnclaveHandle, nonce: bytes, report_data: bytes) -> TeeQuote:
        """Sign (measurement, nonce, report_data) with the attestation key."""
        if not handle.alive:
            raise TeeError("cannot quote a dead enclave")
        if len(nonce) != NONCE_SIZE:
            raise TeeError(f"nonce must be {NONCE_SIZE} bytes")
        if len(report_data) > MAX_REPORT_DATA:
            raise TeeError(f"report_data exceeds {MAX_REPORT_DATA} bytes")
        body = canonical_encode(
            {
                "measurement": handle.measurement.hex,
                "nonce": nonce.hex(),
                "report_data": report_data.hex(),
            }
        )
        return TeeQuote(
            measurement=handle.measurement,
            nonce=nonce,
            report_data=report_data,
            signature=self._attestation_key.sign(body),
        )
