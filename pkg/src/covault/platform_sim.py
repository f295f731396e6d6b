"""A simulated integrity-enforced host: TPM, measured boot, IMA appraisal.

Ties the pieces together the way a booted machine would: the manufacturer
endorses the TPM's quote key, the bootloader measures the kernel into
PCR 17, the keyring freezes, and every OS file load is appraised into
PCR 10. PCR values depend only on the kernel bytes, the command line, and
the (path, content) of each allowed file, so a platform rebuilt from the
same description reproduces the same registers.

Platform description files (YAML):

    kernel_image_file: path        # or kernel_image_text: inline string
    kernel_cmdline: "quiet ima_policy=signed"
    os_files:
      - path: usr/sbin/service     # logical path recorded in the log
        content_file: path         # or content_text: inline string
        signed: true               # unsigned files are denied, not measured
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import yaml

from .crypto import Digest, SigningKey
from .tpm import (
    BOOT_PCR,
    IMA_PCR,
    ImaKeyring,
    TpmDevice,
    TpmManufacturer,
    sign_file,
)


class PlatformError(Exception):
    pass


@dataclass
class OsFile:
    path: str
    content: bytes
    signed: bool = True


@dataclass
class PlatformSpec:
    kernel_image: bytes
    kernel_cmdline: str
    os_files: list[OsFile] = field(default_factory=list)

    @classmethod
    def load(cls, path: Path | str) -> "PlatformSpec":
        path = Path(path)
        raw = yaml.safe_load(path.read_text())
        if not isinstance(raw, dict):
            raise PlatformError("platform spec must be a map")
        base = path.parent

        def content_of(entry: dict, file_key: str, text_key: str) -> bytes:
            if file_key in entry:
                return (base / entry[file_key]).read_bytes()
            if text_key in entry:
                return str(entry[text_key]).encode("utf-8")
            raise PlatformError(f"need {file_key} or {text_key}")

        files = [
            OsFile(
                path=str(item["path"]),
                content=content_of(item, "content_file", "content_text"),
                signed=bool(item.get("signed", True)),
            )
            for item in raw.get("os_files", [])
        ]
        return cls(
            kernel_image=content_of(raw, "kernel_image_file", "kernel_image_text"),
            kernel_cmdline=str(raw.get("kernel_cmdline", "")),
            os_files=files,
        )


class SimulatedPlatform:
    """One booted host. A "reboot" is a new instance (fresh zeroed TPM)."""

    def __init__(self, manufacturer: Optional[TpmManufacturer] = None) -> None:
        self.manufacturer = manufacturer or TpmManufacturer()
        self.device = TpmDevice(self.manufacturer.endorse())
        self.keyring = ImaKeyring()
        self.os_signer = SigningKey.generate()
        self.keyring.add(self.os_signer.public_key)
        self.denied_loads: list[str] = []

    def boot(self, kernel_image: bytes, kernel_cmdline: str) -> None:
        self.device.boot_measure(kernel_image, kernel_cmdline)
        self.keyring.freeze()

    def load_file(self, path: str, content: bytes, signed: bool = True) -> bool:
        """Attempt one appraised file load; returns the allow decision."""
        signature = sign_file(self.os_signer, content) if signed else None
        allowed = self.device.ima_appraise(self.keyring, path, content, signature)
        if not allowed:
            self.denied_loads.append(path)
        return allowed

    def expected_pcrs(self) -> dict[int, Digest]:
        """The golden values a policy should pin for this platform state."""
        return {
            IMA_PCR: self.device.bank.read(IMA_PCR),
            BOOT_PCR: self.device.bank.read(BOOT_PCR),
        }

    @property
    def root_certificate(self):
        return self.manufacturer.root_certificate

    @classmethod
    def from_spec(cls, spec: PlatformSpec,
                  manufacturer: Optional[TpmManufacturer] = None) -> "SimulatedPlatform":
        platform = cls(manufacturer)
        platform.boot(spec.kernel_image, spec.kernel_cmdline)
        for os_file in spec.os_files:
            platform.load_file(os_file.path, os_file.content, os_file.signed)
        return platform
