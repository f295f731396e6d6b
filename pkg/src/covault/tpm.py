"""Software TPM: PCR bank, measured boot, IMA appraisal, quotes.

PCR semantics follow the hardware rule: a register is never assigned, only
extended, new = SHA-256(old_value || data). PCR 17 holds the trusted-boot
kernel measurements (TXT convention), PCR 10 the IMA file measurements
(Linux convention).

The measurement log serializes as line-oriented ASCII records, one event
per line, mirroring the kernel's measurement-list style:

    <pcr_index> <event_digest_hex> <file_hash_hex> <path>

Columns are space-separated; the path is the final column and may contain
spaces but not newlines.
"""

from __future__ import annotations

import secrets
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence

from .crypto import (
    Certificate,
    Digest,
    PublicKey,
    Signature,
    SigningKey,
    ZERO_DIGEST,
    canonical_encode,
    hash_bytes,
    issue_certificate,
    self_signed_certificate,
    verify,
    verify_certificate_chain,
)

PCR_COUNT = 24
BOOT_PCR = 17
IMA_PCR = 10
QUOTE_NONCE_SIZE = 32


class TpmError(Exception):
    pass


# ---------------------------------------------------------------------------
# PCR bank and measurement log
# ---------------------------------------------------------------------------

class PcrBank:
    """24 registers, all starting at 32 zero bytes, mutable only via extend."""

    __slots__ = ("_values",)

    def __init__(self) -> None:
        self._values: list[Digest] = [ZERO_DIGEST] * PCR_COUNT

    def read(self, index: int) -> Digest:
        self._check_index(index)
        return self._values[index]

    def extend(self, index: int, data: Digest) -> Digest:
        """register[index] := hash(old_value_bytes || data_bytes); returns the new value."""
        self._check_index(index)
        new = hash_bytes(self._values[index].value + data.value)
        self._values[index] = new
        return new

    def snapshot(self) -> tuple[Digest, ...]:
        return tuple(self._values)

    @staticmethod
    def _check_index(index: int) -> None:
        if not isinstance(index, int) or not (0 <= index < PCR_COUNT):
            raise TpmError(f"PCR index must be in 0..{PCR_COUNT - 1}")


def pcr_extend(bank: PcrBank, index: int, data: Digest) -> Digest:
    return bank.extend(index, data)


@dataclass(frozen=True)
class LogEntry:
    pcr_index: int
    event_digest: Digest
    file_path: str
    file_hash: Digest


class MeasurementLog:
    """Append-only ordered event list whose replay reproduces the PCRs."""

    def __init__(self, entries: Iterable[LogEntry] = ()) -> None:
        self._entries: list[LogEntry] = list(entries)

    def append(self, entry: LogEntry) -> None:
        if "\n" in entry.file_path:
            raise TpmError("log paths must not contain newlines")
        self._entries.append(entry)

    def entries(self) -> tuple[LogEntry, ...]:
        return tuple(self._entries)

    def __len__(self) -> int:
        return len(self._entries)

    def serialize(self) -> str:
        lines = [
            f"{e.pcr_index} {e.event_digest.hex} {e.file_hash.hex} {e.file_path}"
            for e in self._entries
        ]
        return "".join(line + "\n" for line in lines)

    @classmethod
    def parse(cls, text: str) -> "MeasurementLog":
        log = cls()
        for lineno, line in enumerate(text.splitlines(), 1):
            if not line.strip():
                continue
            parts = line.split(" ", 3)
            if len(parts) != 4:
                raise TpmError(f"malformed log line {lineno}")
            index, event_hex, file_hex, path = parts
            log.append(
                LogEntry(
                    pcr_index=int(index),
                    event_digest=Digest.from_hex(event_hex),
                    file_path=path,
                    file_hash=Digest.from_hex(file_hex),
                )
            )
        return log


def replay_log(log: MeasurementLog, index: int) -> Digest:
    """Fold the entries for one register over extend, starting from zero."""
    value = ZERO_DIGEST
    for entry in log.entries():
        if entry.pcr_index == index:
            value = hash_bytes(value.value + entry.event_digest.value)
    return value


def ima_event_digest(file_hash: Digest, file_path: str) -> Digest:
    # binding the path prevents file-swap ambiguity between equal contents
    return hash_bytes(file_hash.value + file_path.encode("utf-8"))


# ---------------------------------------------------------------------------
# IMA keyring
# ---------------------------------------------------------------------------

class ImaKeyring:
    """Public keys trusted to sign files; immutable once the platform boots."""

    def __init__(self, keys: Iterable[PublicKey] = ()) -> None:
        self._keys: list[PublicKey] = list(keys)
        self._frozen = False

    def add(self, key: PublicKey) -> None:
        if self._frozen:
            raise TpmError("keyring is frozen after boot")
        self._keys.append(key)

    def freeze(self) -> None:
        self._frozen = True

    @property
    def frozen(self) -> bool:
        return self._frozen

    def keys(self) -> tuple[PublicKey, ...]:
        return tuple(self._keys)

    def verifies(self, file_hash: Digest, signature: Signature) -> bool:
        return any(verify(pk, file_hash.value, signature) for pk in self._keys)


def sign_file(sk: SigningKey, content: bytes) -> Signature:
    """File signature convention: Ed25519 over the SHA-256 of the content."""
    return sk.sign(hash_bytes(content).value)


# ---------------------------------------------------------------------------
# TPM identity (EK-style certificate chain)
# ---------------------------------------------------------------------------

@dataclass
class TpmIdentity:
    """Quote-signing key plus its manufacturer certificate chain (root first)."""

    quote_key: SigningKey
    chain: tuple[Certificate, ...]


class TpmManufacturer:
    """Issues quote-key certificates under a self-signed root."""

    def __init__(self, name: str = "covault-tpm-vendor",
                 root_key: Optional[SigningKey] = None) -> None:
        self.name = name
        self._root_key = root_key or SigningKey.generate()
        self.root_certificate = self_signed_certificate(name, self._root_key)

    @classmethod
    def with_state(cls, state_dir: Path | str,
                   name: str = "covault-tpm-vendor") -> "TpmManufacturer":
        """Persist the vendor root key so reboots keep the same trust anchor."""
        state_dir = Path(state_dir)
        state_dir.mkdir(parents=True, exist_ok=True)
        key_path = state_dir / "vendor-root.key"
        if key_path.exists():
            key = SigningKey.from_hex(key_path.read_text().strip())
        else:
            key = SigningKey.generate()
            key_path.touch(mode=0o600)
            key_path.write_text(key.private_hex() + "\n")
        return cls(name=name, root_key=key)

    def endorse(self, serial: Optional[str] = None) -> TpmIdentity:
        quote_key = SigningKey.generate()
        subject = serial or f"tpm-{secrets.token_hex(6)}"
        leaf = issue_certificate(subject, quote_key.public_key, self.name, self._root_key)
        return TpmIdentity(quote_key=quote_key, chain=(self.root_certificate, leaf))


# ---------------------------------------------------------------------------
# The device
# ---------------------------------------------------------------------------

class TpmDevice:
    """One simulated TPM: serialized operations, one boot per instance.

    A "reboot" is a fresh instance with a zeroed bank; that mirrors the
    hardware reset semantics.
    """

    def __init__(self, identity: TpmIdentity) -> None:
        self.identity = identity
        self.bank = PcrBank()
        self.log = MeasurementLog()
        self._lock = threading.Lock()
        self._booted = False

    def boot_measure(self, kernel_image: bytes, kernel_cmdline: str) -> None:
        """The single trusted-boot event: kernel image then cmdline into PCR 17."""
        with self._lock:
            if self._booted:
                raise TpmError("boot_measure may be called once per boot")
            self._booted = True
            for path, content in (
                ("boot/kernel-image", kernel_image),
                ("boot/kernel-cmdline", kernel_cmdline.encode("utf-8")),
            ):
                digest = hash_bytes(content)
                self.bank.extend(BOOT_PCR, digest)
                self.log.append(
                    LogEntry(
                        pcr_index=BOOT_PCR,
                        event_digest=digest,
                        file_path=path,
                        file_hash=digest,
                    )
                )

    @property
    def booted(self) -> bool:
        return self._booted

    def ima_appraise(
        self,
        keyring: ImaKeyring,
        file_path: str,
        content: bytes,
        file_signature: Optional[Signature],
    ) -> bool:
        """Appraise one file load: allow iff its signature verifies.

        On allow the event is extended into PCR 10 and logged; on deny
        nothing changes and the load is refused.
        """
        file_hash = hash_bytes(content)
        if file_signature is None or not keyring.verifies(file_hash, file_signature):
            return False
        with self._lock:
            event = ima_event_digest(file_hash, file_path)
            self.bank.extend(IMA_PCR, event)
            self.log.append(
                LogEntry(
                    pcr_index=IMA_PCR,
                    event_digest=event,
                    file_path=file_path,
                    file_hash=file_hash,
                )
            )
        return True

    def quote(self, selection: Sequence[int], nonce: bytes) -> "TpmQuote":
        with self._lock:
            return tpm_quote(self.identity, self.bank, selection, nonce)


# ---------------------------------------------------------------------------
# Quotes
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TpmQuote:
    pcr_selection: tuple[int, ...]
    pcr_composite: Digest
    nonce: bytes
    signature: Signature
    chain: tuple[Certificate, ...]

    def signed_body(self) -> bytes:
        return canonical_encode(
            {
                "nonce": self.nonce.hex(),
                "pcr_composite": self.pcr_composite.hex,
                "pcr_selection": list(self.pcr_selection),
            }
        )

    def to_doc(self) -> dict:
        return {
            "pcr_selection": list(self.pcr_selection),
            "pcr_composite": self.pcr_composite.hex,
            "nonce": self.nonce.hex(),
            "signature": self.signature.hex,
            "certificate_chain": [c.to_doc() for c in self.chain],
        }

    @classmethod
    def from_doc(cls, doc: dict) -> "TpmQuote":
        return cls(
            pcr_selection=tuple(int(i) for i in doc["pcr_selection"]),
            pcr_composite=Digest.from_hex(doc["pcr_composite"]),
            nonce=bytes.fromhex(doc["nonce"]),
            signature=Signature.from_hex(doc["signature"]),
            chain=tuple(Certificate.from_doc(c) for c in doc["certificate_chain"]),
        )


def composite_digest(pairs: Sequence[tuple[int, Digest]]) -> Digest:
    ordered = sorted(pairs, key=lambda p: p[0])
    return hash_bytes(canonical_encode([[i, d.hex] for i, d in ordered]))


def tpm_quote(
    identity: TpmIdentity, bank: PcrBank, selection: Sequence[int], nonce: bytes
) -> TpmQuote:
    if not selection:
        raise TpmError("selection must be nonempty")
    if len(nonce) != QUOTE_NONCE_SIZE:
        raise TpmError(f"nonce must be {QUOTE_NONCE_SIZE} bytes")
    indices = tuple(sorted(set(selection)))
    composite = composite_digest([(i, bank.read(i)) for i in indices])
    body = canonical_encode(
        {
            "nonce": nonce.hex(),
            "pcr_composite": composite.hex,
            "pcr_selection": list(indices),
        }
    )
    return TpmQuote(
        pcr_selection=indices,
        pcr_composite=composite,
        nonce=nonce,
        signature=identity.quote_key.sign(body),
        chain=identity.chain,
    )


@dataclass(frozen=True)
class TpmQuoteVerification:
    ok: bool
    # untrusted_chain | bad_signature | nonce_mismatch | incomplete_selection
    # | pcr_mismatch
    reason: Optional[str] = None


def verify_tpm_quote(
    quote: TpmQuote,
    nonce: bytes,
    trusted_roots: Sequence[Certificate],
    expected_pcrs: Mapping[int, Digest],
) -> TpmQuoteVerification:
    """Check chain, signature, nonce, selection coverage, and PCR values."""
    if not expected_pcrs:
        raise TpmError("expected_pcrs must be nonempty")
    leaf_key = verify_certificate_chain(quote.chain, trusted_roots)
    if leaf_key is None:
        return TpmQuoteVerification(False, "untrusted_chain")
    if not verify(leaf_key, quote.signed_body(), quote.signature):
        return TpmQuoteVerification(False, "bad_signature")
    if quote.nonce != nonce:
        return TpmQuoteVerification(False, "nonce_mismatch")
    selected = set(quote.pcr_selection)
    if not selected.issuperset(expected_pcrs.keys()):
        return TpmQuoteVerification(False, "incomplete_selection")
    # the composite can only be recomputed when every quoted register has a
    # known expected value
    if not selected.issubset(expected_pcrs.keys()):
        return TpmQuoteVerification(False, "pcr_mismatch")
    recomputed = composite_digest(
        [(i, expected_pcrs[i]) for i in quote.pcr_selection]
    )
    if recomputed != quote.pcr_composite:
        return TpmQuoteVerification(False, "pcr_mismatch")
    return TpmQuoteVerification(True)
