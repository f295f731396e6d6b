"""Stakeholder security policies: parse, validate, sign, verify, update rule.

A policy binds a workload code measurement to encrypted volumes, key-access
grants, and optional platform-integrity requirements. The human-authored
file format is YAML-compatible plain text; the signed form is the canonical
encoding of every field except ``signature``.

Update authorization: a replacement policy is accepted only when it is
signed with the private key matching the public key embedded in the
currently stored policy, and its version is exactly the stored version
plus one. Key rotation is permitted: the new policy may carry a new
creator key, but must still be signed with the old one.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from typing import Any, Mapping, Optional

import yaml

from .crypto import (
    Certificate,
    DecodeError,
    Digest,
    PublicKey,
    Signature,
    SigningKey,
    canonical_encode,
    verify,
)

PCR_MIN = 0
PCR_MAX = 23

VOLUME_DIRECTIONS = ("input", "output")

_POLICY_FIELDS = {
    "name",
    "exec",
    "code_measurement",
    "volumes",
    "key_grants",
    "platform_requirement",
    "creator_public_key",
    "version",
    "signature",
}


class PolicyError(Exception):
    pass


class PolicyParseError(PolicyError):
    """Carries every violated invariant, not only the first."""

    def __init__(self, violations: list[str]) -> None:
        self.violations = violations
        super().__init__("; ".join(violations))


@dataclass(frozen=True)
class VolumeDecl:
    name: str
    direction: str


@dataclass(frozen=True)
class KeyGrant:
    volume: str
    grantee: str


@dataclass(frozen=True)
class PlatformRequirement:
    tpm_root_certs: tuple[Certificate, ...]
    expected_pcrs: Mapping[int, Digest]


@dataclass(frozen=True)
class SecurityPolicy:
    name: str
    exec: str
    code_measurement: Digest
    volumes: tuple[VolumeDecl, ...]
    key_grants: tuple[KeyGrant, ...]
    platform_requirement: Optional[PlatformRequirement]
    creator_public_key: PublicKey
    version: int
    signature: Optional[Signature] = None

    def unsigned_doc(self) -> dict:
        doc: dict[str, Any] = {
            "name": self.name,
            "exec": self.exec,
            "code_measurement": self.code_measurement.hex,
            "volumes": [
                {"name": v.name, "direction": v.direction} for v in self.volumes
            ],
            "key_grants": [
                {"volume": g.volume, "grantee": g.grantee} for g in self.key_grants
            ],
            "platform_requirement": None,
            "creator_public_key": self.creator_public_key.hex,
            "version": self.version,
        }
        if self.platform_requirement is not None:
            pr = self.platform_requirement
            doc["platform_requirement"] = {
                "tpm_root_certs": [c.to_doc() for c in pr.tpm_root_certs],
                "expected_pcrs": {
                    str(i): d.hex for i, d in sorted(pr.expected_pcrs.items())
                },
            }
        return doc

    def to_doc(self) -> dict:
        doc = self.unsigned_doc()
        doc["signature"] = self.signature.hex if self.signature else None
        return doc

    def signing_bytes(self) -> bytes:
        return canonical_encode(self.unsigned_doc())


def sign_policy(policy: SecurityPolicy, sk: SigningKey) -> SecurityPolicy:
    if sk.public_key != policy.creator_public_key:
        raise PolicyError("signing key does not match the embedded creator key")
    return replace(policy, signature=sk.sign(policy.signing_bytes()))


def verify_policy(policy: SecurityPolicy) -> bool:
    """Check the signature over the canonical bytes (excluding the signature).

    Unsigned policies are never accepted.
    """
    if policy.signature is None:
        return False
    return verify(policy.creator_public_key, policy.signing_bytes(), policy.signature)


@dataclass(frozen=True)
class UpdateDecision:
    accepted: bool
    reason: Optional[str] = None  # stale_version | bad_signature | name_mismatch


def authorize_update(
    existing: SecurityPolicy, proposed: SecurityPolicy
) -> UpdateDecision:
    """Gate a policy replacement with the stored policy's own key.

    Accept iff the proposed signature verifies under the *existing* creator
    key and the version advances by exactly one. The decision depends only
    on the two policies, never on any service-held keys.
    """
    if existing.name != proposed.name:
        return UpdateDecision(False, "name_mismatch")
    if proposed.signature is None or not verify(
        existing.creator_public_key, proposed.signing_bytes(), proposed.signature
    ):
        return UpdateDecision(False, "bad_signature")
    if proposed.version != existing.version + 1:
        return UpdateDecision(False, "stale_version")
    return UpdateDecision(True)


# ---------------------------------------------------------------------------
# Parsing and emission
# ---------------------------------------------------------------------------

def _parse_platform_requirement(raw: Any, violations: list[str]) -> Optional[PlatformRequirement]:
    if raw is None:
        return None
    if not isinstance(raw, dict):
        violations.append("platform_requirement must be a map or null")
        return None
    unknown = set(raw) - {"tpm_root_certs", "expected_pcrs"}
    if unknown:
        violations.append(f"platform_requirement has unknown fields {sorted(unknown)}")

    certs: list[Certificate] = []
    raw_certs = raw.get("tpm_root_certs")
    if not isinstance(raw_certs, list) or not raw_certs:
        violations.append("platform_requirement.tpm_root_certs must be a nonempty list")
    else:
        for i, cdoc in enumerate(raw_certs):
            try:
                certs.append(Certificate.from_doc(cdoc))
            except DecodeError as e:
                violations.append(f"platform_requirement.tpm_root_certs[{i}]: {e}")

    pcrs: dict[int, Digest] = {}
    raw_pcrs = raw.get("expected_pcrs")
    if not isinstance(raw_pcrs, dict) or not raw_pcrs:
        violations.append("platform_requirement.expected_pcrs must be a nonempty map")
    else:
        for key, hexval in raw_pcrs.items():
            try:
                index = int(key)
            except (TypeError, ValueError):
                violations.append(f"expected_pcrs key {key!r} is not an integer")
                continue
            if not (PCR_MIN <= index <= PCR_MAX):
                violations.append(f"PCR index {index} outside {PCR_MIN}..{PCR_MAX}")
                continue
            if index in pcrs:
                violations.append(f"duplicate PCR index {index}")
                continue
            try:
                pcrs[index] = Digest.from_hex(hexval)
            except (DecodeError, TypeError) as e:
                violations.append(f"expected_pcrs[{index}]: {e}")

    if violations:
        return None
    return PlatformRequirement(tpm_root_certs=tuple(certs), expected_pcrs=pcrs)


def parse_policy(text: bytes) -> SecurityPolicy:
    """Parse and structurally validate a policy document (YAML or JSON).

    Raises PolicyParseError listing every violated invariant.
    """
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as e:
        raise PolicyParseError([f"unparseable document: {e}"]) from e
    if not isinstance(raw, dict):
        raise PolicyParseError(["policy document must be a map"])

    violations: list[str] = []
    unknown = set(map(str, raw)) - _POLICY_FIELDS
    if unknown:
        violations.append(f"unknown fields {sorted(unknown)}")
    missing = (_POLICY_FIELDS - {"signature", "platform_requirement"}) - set(raw)
    if missing:
        violations.append(f"missing fields {sorted(missing)}")
        raise PolicyParseError(violations)

    name = raw.get("name")
    if not isinstance(name, str) or not name:
        violations.append("name must be a nonempty string")
    exec_cmd = raw.get("exec")
    if not isinstance(exec_cmd, str) or not exec_cmd:
        violations.append("exec must be a nonempty string")

    measurement = None
    try:
        measurement = Digest.from_hex(raw.get("code_measurement"))
    except (DecodeError, TypeError) as e:
        violations.append(f"code_measurement: {e}")

    volumes: list[VolumeDecl] = []
    raw_volumes = raw.get("volumes")
    if not isinstance(raw_volumes, list):
        violations.append("volumes must be a list")
    else:
        seen: set[str] = set()
        for i, v in enumerate(raw_volumes):
            if not isinstance(v, dict) or set(v) != {"name", "direction"}:
                violations.append(f"volumes[{i}] must have exactly name and direction")
                continue
            vname, direction = v["name"], v["direction"]
            if not isinstance(vname, str) or not vname:
                violations.append(f"volumes[{i}].name must be a nonempty string")
                continue
            if "/" in vname or "\\" in vname:
                violations.append(f"volume name {vname!r} contains a path separator")
            if direction not in VOLUME_DIRECTIONS:
                violations.append(f"volumes[{i}].direction must be input or output")
            if vname in seen:
                violations.append(f"duplicate volume name {vname!r}")
            seen.add(vname)
            volumes.append(VolumeDecl(name=vname, direction=direction))

    grants: list[KeyGrant] = []
    raw_grants = raw.get("key_grants")
    declared = {v.name for v in volumes}
    if not isinstance(raw_grants, list):
        violations.append("key_grants must be a list")
    else:
        for i, g in enumerate(raw_grants):
            if not isinstance(g, dict) or set(g) != {"volume", "grantee"}:
                violations.append(f"key_grants[{i}] must have exactly volume and grantee")
                continue
            gvol, grantee = g["volume"], g["grantee"]
            if not isinstance(gvol, str) or gvol not in declared:
                violations.append(f"key_grants[{i}] references undeclared volume {gvol!r}")
            if not isinstance(grantee, str) or not grantee:
                violations.append(f"key_grants[{i}].grantee must be a nonempty string")
                continue
            grants.append(KeyGrant(volume=str(gvol), grantee=grantee))

    platform = _parse_platform_requirement(raw.get("platform_requirement"), violations)

    creator = None
    try:
        creator = PublicKey.from_hex(raw.get("creator_public_key"))
    except (DecodeError, TypeError) as e:
        violations.append(f"creator_public_key: {e}")

    version = raw.get("version")
    if not isinstance(version, int) or isinstance(version, bool) or version < 1:
        violations.append("version must be an integer >= 1")

    signature = None
    raw_sig = raw.get("signature")
    if raw_sig is not None:
        try:
            signature = Signature.from_hex(raw_sig)
        except (DecodeError, TypeError) as e:
            violations.append(f"signature: {e}")

    if violations:
        raise PolicyParseError(violations)

    assert measurement is not None and creator is not None
    return SecurityPolicy(
        name=name,
        exec=exec_cmd,
        code_measurement=measurement,
        volumes=tuple(volumes),
        key_grants=tuple(grants),
        platform_requirement=platform,
        creator_public_key=creator,
        version=version,
        signature=signature,
    )


def emit_policy(policy: SecurityPolicy) -> bytes:
    """Deterministic text form: sorted-key JSON, which is valid YAML.

    emit(parse(emit(p))) is byte-identical to emit(p).
    """
    text = json.dumps(policy.to_doc(), sort_keys=True, indent=2, ensure_ascii=False)
    return (text + "\n").encode("utf-8")
