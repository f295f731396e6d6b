"""Trusted-boot gating stage: verify platform integrity, then re-encrypt.

The gate stands between two encrypted volumes. It fetches a fresh TPM
quote (with a nonce it generates itself), verifies the certificate chain,
the quoted PCR values, and the measurement-log replay, and only then
copies data: each source file is decrypted with the source key and sealed
under the destination key. The destination is published atomically by
renaming a staging directory, so an interrupted run leaves it absent,
never partial.
"""

from __future__ import annotations

import os
import secrets
import shutil
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Optional

from .crypto import (
    AuthenticationFailure,
    Certificate,
    Digest,
    SymmetricKey,
    canonical_decode,
    canonical_encode,
    hash_bytes,
)
from .tpm import (
    IMA_PCR,
    MeasurementLog,
    QUOTE_NONCE_SIZE,
    TpmDevice,
    replay_log,
    verify_tpm_quote,
)
from .volume import Volume

# exit codes for the CLI surface; 0 accept, 1 internal error
REASON_EXIT_CODES = {
    "untrusted_chain": 2,
    "bad_signature": 3,
    "nonce_mismatch": 4,
    "incomplete_selection": 5,
    "pcr_mismatch": 6,
    "log_replay_mismatch": 7,
    "volume_auth_failure": 8,
}


class GateError(Exception):
    pass


@dataclass(frozen=True)
class GateConfig:
    source_path: Path
    source_policy: str
    source_volume: str
    dest_path: Path
    dest_policy: str
    dest_volume: str
    gate_policy: str
    tpm_root_certs: tuple[Certificate, ...]
    expected_pcrs: Mapping[int, Digest]
    ima_pcr_index: int = IMA_PCR

    def __post_init__(self) -> None:
        if Path(self.source_path) == Path(self.dest_path):
            raise GateError("source and destination must differ")
        if not self.expected_pcrs:
            raise GateError("expected_pcrs must be nonempty")

    def to_doc(self) -> dict:
        return {
            "source": {
                "path": str(self.source_path),
                "policy": self.source_policy,
                "volume": self.source_volume,
            },
            "destination": {
                "path": str(self.dest_path),
                "policy": self.dest_policy,
                "volume": self.dest_volume,
            },
            "gate_policy": self.gate_policy,
            "tpm_root_certs": [c.to_doc() for c in self.tpm_root_certs],
            "expected_pcrs": {
                str(i): d.hex for i, d in sorted(self.expected_pcrs.items())
            },
            "ima_pcr_index": self.ima_pcr_index,
        }

    @classmethod
    def from_doc(cls, doc: dict) -> "GateConfig":
        return cls(
            source_path=Path(doc["source"]["path"]),
            source_policy=doc["source"]["policy"],
            source_volume=doc["source"]["volume"],
            dest_path=Path(doc["destination"]["path"]),
            dest_policy=doc["destination"]["policy"],
            dest_volume=doc["destination"]["volume"],
            gate_policy=doc["gate_policy"],
            tpm_root_certs=tuple(
                Certificate.from_doc(c) for c in doc["tpm_root_certs"]
            ),
            expected_pcrs={
                int(i): Digest.from_hex(h) for i, h in doc["expected_pcrs"].items()
            },
            ima_pcr_index=doc.get("ima_pcr_index", IMA_PCR),
        )

    @classmethod
    def load(cls, path: Path | str) -> "GateConfig":
        return cls.from_doc(canonical_decode(Path(path).read_bytes()))


@dataclass(frozen=True)
class CopyReport:
    source_volume: str
    dest_volume: str
    files: tuple[tuple[str, str, int], ...]  # (path, plaintext sha256, length)

    def to_doc(self) -> dict:
        return {
            "source_volume": self.source_volume,
            "destination_volume": self.dest_volume,
            "files": [
                {"path": p, "plaintext_sha256": h, "length": n}
                for p, h, n in self.files
            ],
        }


@dataclass(frozen=True)
class GateResult:
    accepted: bool
    reason: Optional[str] = None
    report: Optional[CopyReport] = None

    @property
    def exit_code(self) -> int:
        if self.accepted:
            return 0
        return REASON_EXIT_CODES.get(self.reason or "", 1)


def gate_run(
    config: GateConfig,
    tpm_device: TpmDevice,
    measurement_log: MeasurementLog,
    source_key: SymmetricKey,
    dest_key: SymmetricKey,
) -> GateResult:
    """Verify platform integrity, then copy source files under the destination key.

    Integrity is verified once per run, before any copy. On any reject the
    destination is untouched.
    """
    # integrity first: fresh quote over exactly the expected registers
    nonce = secrets.token_bytes(QUOTE_NONCE_SIZE)
    quote = tpm_device.quote(sorted(config.expected_pcrs), nonce)
    check = verify_tpm_quote(quote, nonce, config.tpm_root_certs, config.expected_pcrs)
    if not check.ok:
        return GateResult(False, check.reason)
    expected_ima = config.expected_pcrs.get(config.ima_pcr_index)
    if expected_ima is None or replay_log(measurement_log, config.ima_pcr_index) != expected_ima:
        return GateResult(False, "log_replay_mismatch")

    dest_path = Path(config.dest_path)
    if dest_path.exists():
        raise GateError(f"destination {dest_path} already exists")
    dest_path.parent.mkdir(parents=True, exist_ok=True)
    lock_path = dest_path.with_name(dest_path.name + ".gate-lock")
    try:
        lock_fd = os.open(lock_path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise GateError(f"another gate is publishing {dest_path}") from None

    staging = dest_path.with_name(dest_path.name + f".staging-{os.getpid()}")
    try:
        source = Volume.open(config.source_path)
        dest = Volume.create(staging, config.dest_volume, dest_key)
        files: list[tuple[str, str, int]] = []
        try:
            for logical_path in source.paths():
                plaintext = source.get(source_key, logical_path)
                dest.put(dest_key, logical_path, plaintext)
                files.append((logical_path, hash_bytes(plaintext).hex, len(plaintext)))
        except AuthenticationFailure:
            return GateResult(False, "volume_auth_failure")
        if dest.verify():
            raise GateError("staging volume failed self-verification")
        os.rename(staging, dest_path)
        report = CopyReport(
            source_volume=config.source_volume,
            dest_volume=config.dest_volume,
            files=tuple(files),
        )
        return GateResult(True, report=report)
    finally:
        # after a successful rename the staging path is gone; anything left
        # is an aborted copy
        if staging.exists():
            shutil.rmtree(staging, ignore_errors=True)
        os.close(lock_fd)
        lock_path.unlink(missing_ok=True)


def write_gate_config(config: GateConfig, path: Path | str) -> None:
    Path(path).write_bytes(canonical_encode(config.to_doc()))


def write_copy_report(report: CopyReport, path: Path | str) -> None:
    Path(path).write_bytes(canonical_encode(report.to_doc()))
