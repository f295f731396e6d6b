"""Harness glue for running attested workloads end to end.

The provisioning handshake, as the workload side sees it:

1. launch the measured artifact in an isolated process;
2. open a session with the policy manager and receive a fresh nonce;
3. generate an ephemeral X25519 channel keypair and obtain an enclave
   quote whose report_data is the SHA-256 of the channel public key;
4. send quote (plus TPM evidence when the policy demands platform
   integrity) to the manager; unseal the returned key bundle with the
   channel secret;
5. inject the keys into the enclave as a single canonical document on
   stdin and let the workload run.

The injected document::

    {"session": ..., "policy": ...,
     "keys":    {"<owner-policy>/<volume>": hex-key, ...},
     "volumes": {"<owner-policy>/<volume>": absolute-path, ...},
     "roles":   {"<role>": "<owner-policy>/<volume>", ...}}
"""

from __future__ import annotations

import json
import sys
from dataclasses import dataclass
from typing import Mapping, Optional, Sequence

from .crypto import SigningKey, SymmetricKey, hash_bytes
from .manager import (
    PolicyManager,
    new_channel_keypair,
    open_sealed_bundle,
    owner_export_signing_bytes,
)
from .tee import EnclaveHandle, TeeSimulator
from .tpm import BOOT_PCR, IMA_PCR, MeasurementLog, TpmDevice

DEFAULT_QUOTE_SELECTION = (IMA_PCR, BOOT_PCR)


class HarnessError(Exception):
    pass


def volume_ref(owner_policy: str, volume: str) -> str:
    return f"{owner_policy}/{volume}"


def split_volume_ref(ref: str) -> tuple[str, str]:
    owner, _, volume = ref.rpartition("/")
    if not owner or not volume:
        raise HarnessError(f"bad volume reference {ref!r}")
    return owner, volume


@dataclass
class WorkloadRun:
    provisioned: bool
    reject_reason: Optional[str] = None
    exit_code: Optional[int] = None
    handle: Optional[EnclaveHandle] = None
    released_refs: tuple[str, ...] = ()


def attested_workload_run(
    manager: PolicyManager,
    tee: TeeSimulator,
    policy_name: str,
    artifact: bytes,
    volume_paths: Mapping[str, str],
    roles: Optional[Mapping[str, str]] = None,
    tpm_device: Optional[TpmDevice] = None,
    measurement_log: Optional[MeasurementLog] = None,
    pcr_selection: Sequence[int] = DEFAULT_QUOTE_SELECTION,
    exec_command: Optional[str] = None,
    wait: bool = True,
    timeout: float = 120.0,
) -> WorkloadRun:
    """Launch, attest, provision, inject, and (optionally) wait for exit."""
    policy = manager.store.get(policy_name)
    if policy is None:
        raise HarnessError(f"unknown policy {policy_name!r}")
    exec_cmd = exec_command if exec_command is not None else policy.exec
    handle = tee.launch(artifact, exec_cmd)
    try:
        if exec_cmd != policy.exec:
            return WorkloadRun(False, "exec_mismatch", handle=handle)

        session_id, nonce = manager.begin_session(policy_name)
        channel_sk, channel_pub = new_channel_keypair()
        quote = tee.quote(handle, nonce, hash_bytes(channel_pub).value)

        tpm_quote = None
        if tpm_device is not None:
            tpm_quote = tpm_device.quote(pcr_selection, nonce)

        result = manager.provision_keys(
            session_id, quote, channel_pub,
            tpm_quote=tpm_quote, measurement_log=measurement_log,
        )
        if not result.accepted:
            return WorkloadRun(False, result.reason, handle=handle)

        assert result.sealed_bundle is not None
        bundle = open_sealed_bundle(result.sealed_bundle, channel_sk, session_id, nonce)
        keys = {
            volume_ref(item["owner"], item["volume"]): item["key"]
            for item in bundle["keys"]
        }
        document = {
            "session": session_id,
            "policy": policy_name,
            "keys": keys,
            "volumes": {ref: str(path) for ref, path in volume_paths.items()},
            "roles": dict(roles or {}),
        }
        handle.inject(document)
        if not wait:
            return WorkloadRun(True, handle=handle, released_refs=tuple(sorted(keys)))
        rc = handle.wait(timeout=timeout)
        return WorkloadRun(
            True, exit_code=rc, handle=handle, released_refs=tuple(sorted(keys))
        )
    finally:
        if handle.alive and (wait or not handle.injected_keys):
            handle.process.kill()
            handle.process.wait()


def read_enclave_input() -> dict:
    """Workload side: read the injected key document from stdin."""
    line = sys.stdin.readline()
    if not line.strip():
        raise HarnessError("no key document on stdin")
    return json.loads(line)


def attested_provision(
    manager: PolicyManager,
    tee: TeeSimulator,
    policy_name: str,
    artifact: bytes,
    tpm_device: Optional[TpmDevice] = None,
    measurement_log: Optional[MeasurementLog] = None,
    pcr_selection: Sequence[int] = DEFAULT_QUOTE_SELECTION,
) -> tuple[WorkloadRun, dict[str, SymmetricKey]]:
    """Run the handshake for a component that executes in the harness itself.

    A short-lived enclave is launched purely to attest the component's code
    identity (the trusted-boot gate works this way); the unsealed keys are
    returned to the caller and the enclave is reaped.
    """
    policy = manager.store.get(policy_name)
    if policy is None:
        raise HarnessError(f"unknown policy {policy_name!r}")
    handle = tee.launch(artifact, policy.exec)
    try:
        session_id, nonce = manager.begin_session(policy_name)
        channel_sk, channel_pub = new_channel_keypair()
        quote = tee.quote(handle, nonce, hash_bytes(channel_pub).value)
        tpm_quote = tpm_device.quote(pcr_selection, nonce) if tpm_device else None
        result = manager.provision_keys(
            session_id, quote, channel_pub,
            tpm_quote=tpm_quote, measurement_log=measurement_log,
        )
        if not result.accepted:
            return WorkloadRun(False, result.reason, handle=handle), {}
        assert result.sealed_bundle is not None
        bundle = open_sealed_bundle(result.sealed_bundle, channel_sk, session_id, nonce)
        keys = {
            volume_ref(item["owner"], item["volume"]): SymmetricKey.from_hex(item["key"])
            for item in bundle["keys"]
        }
        run = WorkloadRun(True, handle=handle, released_refs=tuple(sorted(keys)))
        return run, keys
    finally:
        if handle.alive:
            handle.process.kill()
            handle.process.wait()


def owner_fetch_keys(
    manager: PolicyManager, policy_name: str, owner_sk: SigningKey
) -> tuple[Optional[str], dict[str, SymmetricKey]]:
    """Stakeholder bootstrap: fetch a policy's own volume keys.

    Returns (reject_reason, keys); reason is None on success.
    """
    session_id, nonce = manager.begin_session(policy_name)
    channel_sk, channel_pub = new_channel_keypair()
    signature = owner_sk.sign(
        owner_export_signing_bytes(policy_name, session_id, channel_pub)
    )
    result = manager.owner_export_keys(policy_name, session_id, channel_pub, signature)
    if not result.accepted:
        return result.reason, {}
    assert result.sealed_bundle is not None
    bundle = open_sealed_bundle(result.sealed_bundle, channel_sk, session_id, nonce)
    keys = {
        volume_ref(item["owner"], item["volume"]): SymmetricKey.from_hex(item["key"])
        for item in bundle["keys"]
    }
    return None, keys
