"""The security policy manager: policy store, key vault, key-release protocol.

This is the root of trust every stakeholder relies on. It stores signed
policies, generates volume keys on first authorized reference, and releases
them only after verifying attestation evidence:

1. the workload's enclave quote must carry the exact code measurement named
   in the session's policy, under a fresh session nonce;
2. if any applicable policy (the session's own, or any policy granting a
   key into the bundle) names a platform requirement, a TPM quote over the
   expected PCRs must verify against that requirement's trust roots, and
   the supplied measurement log must replay to the expected IMA register;
3. the released bundle is the policy's own volume keys plus every key
   granted to it, sealed to an ephemeral channel key whose hash rode in
   the enclave quote's report_data.

Audit records capture every decision; key material never appears in them.
"""

from __future__ import annotations

import os
import secrets
import threading
import time
import urllib.parse
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Optional

from cryptography.hazmat.primitives import hashes, serialization
from cryptography.hazmat.primitives.asymmetric.x25519 import (
    X25519PrivateKey,
    X25519PublicKey,
)
from cryptography.hazmat.primitives.kdf.hkdf import HKDF

from .crypto import (
    PublicKey,
    SymmetricKey,
    aead_open,
    aead_seal,
    canonical_decode,
    canonical_encode,
    fresh_nonce,
    hash_bytes,
    verify,
)
from .policy import (
    PlatformRequirement,
    SecurityPolicy,
    authorize_update,
    emit_policy,
    parse_policy,
    verify_policy,
)
from .tee import TeeQuote, verify_tee_quote
from .tpm import IMA_PCR, MeasurementLog, TpmQuote, replay_log, verify_tpm_quote

SESSION_NONCE_SIZE = 32
BUNDLE_HKDF_INFO = b"covault.session-bundle.v1"
OWNER_EXPORT_CONTEXT = "covault.owner-export.v1"


class ManagerError(Exception):
    pass


class UnknownPolicy(ManagerError):
    pass


class UnknownSession(ManagerError):
    pass


@dataclass(frozen=True)
class Decision:
    accepted: bool
    reason: Optional[str] = None


@dataclass(frozen=True)
class KeyRelease:
    owner: str
    volume: str
    key: SymmetricKey


@dataclass(frozen=True)
class ProvisionResult:
    accepted: bool
    reason: Optional[str] = None
    sealed_bundle: Optional[dict] = None


@dataclass
class Session:
    session_id: str
    policy_name: str
    nonce: bytes
    state: str = "issued"  # issued -> attested -> platform_checked -> released | denied


# ---------------------------------------------------------------------------
# Durable stores
# ---------------------------------------------------------------------------

def _atomic_write(path: Path, data: bytes, mode: Optional[int] = None) -> None:
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(data)
        fh.flush()
        os.fsync(fh.fileno())
    if mode is not None:
        os.chmod(tmp, mode)
    os.replace(tmp, path)


def _policy_filename(name: str) -> str:
    return urllib.parse.quote(name, safe="") + ".json"


class PolicyStore:
    """Signed policies on disk, one file per name, replaced atomically."""

    def __init__(self, root: Path | str) -> None:
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self._policies: dict[str, SecurityPolicy] = {}
        for path in sorted(self.root.glob("*.json")):
            policy = parse_policy(path.read_bytes())
            if not verify_policy(policy):
                raise ManagerError(f"stored policy {path.name} fails verification")
            self._policies[policy.name] = policy

    def get(self, name: str) -> Optional[SecurityPolicy]:
        return self._policies.get(name)

    def names(self) -> list[str]:
        return sorted(self._policies)

    def all_policies(self) -> list[SecurityPolicy]:
        return [self._policies[n] for n in self.names()]

    def put(self, policy: SecurityPolicy) -> None:
        _atomic_write(self.root / _policy_filename(policy.name), emit_policy(policy))
        self._policies[policy.name] = policy

    def stored_bytes(self, name: str) -> bytes:
        path = self.root / _policy_filename(name)
        if not path.exists():
            raise UnknownPolicy(name)
        return path.read_bytes()


class KeyVault:
    """Volume keys by (policy, volume), generated lazily, never logged."""

    def __init__(self, path: Path | str) -> None:
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._keys: dict[tuple[str, str], SymmetricKey] = {}
        self._lock = threading.Lock()
        if self.path.exists():
            doc = canonical_decode(self.path.read_bytes())
            for owner, volumes in doc.items():
                for volume, hexkey in volumes.items():
                    self._keys[(owner, volume)] = SymmetricKey.from_hex(hexkey)

    def _persist(self) -> None:
        doc: dict[str, dict[str, str]] = {}
        for (owner, volume), key in self._keys.items():
            doc.setdefault(owner, {})[volume] = key.reveal_hex()
        _atomic_write(self.path, canonical_encode(doc), mode=0o600)

    def get_or_create(self, owner: str, volume: str) -> SymmetricKey:
        with self._lock:
            key = self._keys.get((owner, volume))
            if key is None:
                key = SymmetricKey.generate()
                self._keys[(owner, volume)] = key
                self._persist()
            return key


# ---------------------------------------------------------------------------
# Channel sealing
# ---------------------------------------------------------------------------

def _derive_channel_key(shared: bytes, session_nonce: bytes) -> SymmetricKey:
    material = HKDF(
        algorithm=hashes.SHA256(), length=32, salt=session_nonce,
        info=BUNDLE_HKDF_INFO,
    ).derive(shared)
    return SymmetricKey(material)


def seal_to_channel(
    bundle_doc: dict, channel_public: bytes, session_id: str, session_nonce: bytes
) -> dict:
    eph = X25519PrivateKey.generate()
    shared = eph.exchange(X25519PublicKey.from_public_bytes(channel_public))
    key = _derive_channel_key(shared, session_nonce)
    nonce = fresh_nonce()
    ciphertext = aead_seal(key, nonce, session_id.encode(), canonical_encode(bundle_doc))
    manager_public = eph.public_key().public_bytes(
        serialization.Encoding.Raw, serialization.PublicFormat.Raw
    )
    return {
        "manager_public": manager_public.hex(),
        "nonce": nonce.hex(),
        "ciphertext": ciphertext.hex(),
    }


def open_sealed_bundle(
    sealed: dict, channel_sk: X25519PrivateKey, session_id: str, session_nonce: bytes
) -> dict:
    shared = channel_sk.exchange(
        X25519PublicKey.from_public_bytes(bytes.fromhex(sealed["manager_public"]))
    )
    key = _derive_channel_key(shared, session_nonce)
    plaintext = aead_open(
        key, bytes.fromhex(sealed["nonce"]), session_id.encode(),
        bytes.fromhex(sealed["ciphertext"]),
    )
    return canonical_decode(plaintext)


def new_channel_keypair() -> tuple[X25519PrivateKey, bytes]:
    sk = X25519PrivateKey.generate()
    pub = sk.public_key().public_bytes(
        serialization.Encoding.Raw, serialization.PublicFormat.Raw
    )
    return sk, pub


# ---------------------------------------------------------------------------
# The manager
# ---------------------------------------------------------------------------

class PolicyManager:
    def __init__(
        self,
        root: Path | str,
        attestation_root: PublicKey,
        clock: Callable[[], int] = time.time_ns,
    ) -> None:
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self.store = PolicyStore(self.root / "policies")
        self.vault = KeyVault(self.root / "vault" / "keys.json")
        self.attestation_root = attestation_root
        self.clock = clock
        self._sessions: dict[str, Session] = {}
        self._upsert_lock = threading.Lock()
        self._audit_path = self.root / "audit.log"

    # -- audit --------------------------------------------------------------

    def _audit(self, session_id: Optional[str], policy: str, decision: str,
               reason: Optional[str] = None) -> None:
        record = {
            "timestamp": self.clock(),
            "session": session_id,
            "policy": policy,
            "decision": decision,
            "reason": reason,
        }
        with open(self._audit_path, "ab") as fh:
            fh.write(canonical_encode(record) + b"\n")

    def audit_records(self) -> list[dict]:
        if not self._audit_path.exists():
            return []
        return [
            canonical_decode(line)
            for line in self._audit_path.read_bytes().splitlines()
            if line.strip()
        ]

    # -- policy deployment ----------------------------------------------------

    def upsert_policy(self, submitted: SecurityPolicy) -> Decision:
        """Create or replace a policy; replacement is gated by the stored key."""
        if not verify_policy(submitted):
            self._audit(None, submitted.name, "upsert-reject", "invalid_signature")
            return Decision(False, "invalid_signature")
        with self._upsert_lock:
            existing = self.store.get(submitted.name)
            if existing is not None:
                update = authorize_update(existing, submitted)
                if not update.accepted:
                    reason = (
                        "stale_version"
                        if update.reason == "stale_version"
                        else "unauthorized_update"
                    )
                    self._audit(None, submitted.name, "upsert-reject", reason)
                    return Decision(False, reason)
            self.store.put(submitted)
        self._audit(None, submitted.name, "upsert-accept")
        return Decision(True)

    def get_policy_public(self, name: str) -> bytes:
        """The stored policy document, verbatim; policies hold no secrets."""
        return self.store.stored_bytes(name)

    # -- sessions -------------------------------------------------------------

    def begin_session(self, policy_name: str) -> tuple[str, bytes]:
        if self.store.get(policy_name) is None:
            raise UnknownPolicy(policy_name)
        session_id = secrets.token_hex(16)
        nonce = secrets.token_bytes(SESSION_NONCE_SIZE)
        self._sessions[session_id] = Session(session_id, policy_name, nonce)
        return session_id, nonce

    def _consume(self, session: Session, state: str, reason: Optional[str] = None) -> None:
        session.state = state
        self._audit(session.session_id, session.policy_name,
                    "provision-" + ("accept" if state == "released" else "reject"),
                    reason)

    # -- key release ------------------------------------------------------------

    def _grants_for(self, grantee: str) -> list[tuple[SecurityPolicy, str]]:
        out = []
        for policy in self.store.all_policies():
            for grant in policy.key_grants:
                if grant.grantee == grantee:
                    out.append((policy, grant.volume))
        return out

    def _platform_requirements(
        self, own: SecurityPolicy, granting: Iterable[SecurityPolicy]
    ) -> list[PlatformRequirement]:
        requirements = []
        seen: set[str] = set()
        for policy in [own, *granting]:
            if policy.platform_requirement is not None and policy.name not in seen:
                requirements.append(policy.platform_requirement)
                seen.add(policy.name)
        return requirements

    def provision_keys(
        self,
        session_id: str,
        tee_quote: TeeQuote,
        channel_public: bytes,
        tpm_quote: Optional[TpmQuote] = None,
        measurement_log: Optional[MeasurementLog] = None,
    ) -> ProvisionResult:
        session = self._sessions.get(session_id)
        if session is None:
            raise UnknownSession(session_id)
        if session.state != "issued":
            self._audit(session_id, session.policy_name, "provision-reject",
                        "session_consumed")
            return ProvisionResult(False, "session_consumed")
        policy = self.store.get(session.policy_name)
        if policy is None:
            raise UnknownPolicy(session.policy_name)

        # (a) enclave identity
        tee_check = verify_tee_quote(tee_quote, session.nonce, self.attestation_root)
        if not tee_check.ok:
            self._consume(session, "denied", "bad_quote")
            return ProvisionResult(False, "bad_quote")
        if tee_quote.report_data != hash_bytes(channel_public).value:
            # report_data must commit to the channel key, or a relay could
            # redirect the sealed bundle
            self._consume(session, "denied", "bad_quote")
            return ProvisionResult(False, "bad_quote")
        assert tee_check.measurement is not None
        if tee_check.measurement.digest != policy.code_measurement:
            self._consume(session, "denied", "measurement_mismatch")
            return ProvisionResult(False, "measurement_mismatch")
        session.state = "attested"

        # (b) platform integrity, conjunction over every stakeholder's requirement
        grants = self._grants_for(policy.name)
        requirements = self._platform_requirements(policy, (p for p, _ in grants))
        if requirements:
            if tpm_quote is None or measurement_log is None:
                self._consume(session, "denied", "platform_required_but_absent")
                return ProvisionResult(False, "platform_required_but_absent")
            for requirement in requirements:
                check = verify_tpm_quote(
                    tpm_quote, session.nonce,
                    requirement.tpm_root_certs, requirement.expected_pcrs,
                )
                if not check.ok:
                    reason = (
                        "platform_mismatch"
                        if check.reason in ("pcr_mismatch", "incomplete_selection")
                        else "bad_quote"
                    )
                    self._consume(session, "denied", reason)
                    return ProvisionResult(False, reason)
                expected_ima = requirement.expected_pcrs.get(IMA_PCR)
                if expected_ima is not None:
                    if replay_log(measurement_log, IMA_PCR) != expected_ima:
                        self._consume(session, "denied", "log_replay_mismatch")
                        return ProvisionResult(False, "log_replay_mismatch")
        session.state = "platform_checked"

        # (c) assemble and seal the bundle
        releases = [
            KeyRelease(policy.name, v.name, self.vault.get_or_create(policy.name, v.name))
            for v in policy.volumes
        ]
        releases += [
            KeyRelease(owner.name, volume, self.vault.get_or_create(owner.name, volume))
            for owner, volume in grants
        ]
        bundle_doc = {
            "policy": policy.name,
            "keys": [
                {"owner": r.owner, "volume": r.volume, "key": r.key.reveal_hex()}
                for r in sorted(releases, key=lambda r: (r.owner, r.volume))
            ],
        }
        sealed = seal_to_channel(bundle_doc, channel_public, session_id, session.nonce)
        self._consume(session, "released")
        return ProvisionResult(True, sealed_bundle=sealed)

    # -- owner bootstrap ----------------------------------------------------

    def owner_export_keys(
        self,
        policy_name: str,
        session_id: str,
        channel_public: bytes,
        request_signature,
    ) -> ProvisionResult:
        """Release a policy's *own* volume keys to its stakeholder.

        The request must be signed with the policy's creator key over the
        canonical (context, channel hash, policy name, session id) document.
        Granted keys are never included: those flow only to attested
        workloads through provision_keys.
        """
        session = self._sessions.get(session_id)
        if session is None:
            raise UnknownSession(session_id)
        if session.state != "issued" or session.policy_name != policy_name:
            self._audit(session_id, policy_name, "owner-export-reject", "session_consumed")
            return ProvisionResult(False, "session_consumed")
        policy = self.store.get(policy_name)
        if policy is None:
            raise UnknownPolicy(policy_name)
        body = owner_export_signing_bytes(policy_name, session_id, channel_public)
        if request_signature is None or not verify(
            policy.creator_public_key, body, request_signature
        ):
            self._consume(session, "denied", "bad_owner_signature")
            return ProvisionResult(False, "bad_owner_signature")
        releases = [
            KeyRelease(policy.name, v.name, self.vault.get_or_create(policy.name, v.name))
            for v in policy.volumes
        ]
        bundle_doc = {
            "policy": policy.name,
            "keys": [
                {"owner": r.owner, "volume": r.volume, "key": r.key.reveal_hex()}
                for r in sorted(releases, key=lambda r: (r.owner, r.volume))
            ],
        }
        sealed = seal_to_channel(bundle_doc, channel_public, session_id, session.nonce)
        session.state = "released"
        self._audit(session_id, policy_name, "owner-export-accept")
        return ProvisionResult(True, sealed_bundle=sealed)


def owner_export_signing_bytes(
    policy_name: str, session_id: str, channel_public: bytes
) -> bytes:
    return canonical_encode(
        {
            "channel_public": channel_public.hex(),
            "context": OWNER_EXPORT_CONTEXT,
            "policy_name": policy_name,
            "session_id": session_id,
        }
    )
