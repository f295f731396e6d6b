"""Declarative multi-stakeholder scenario runner.

A scenario script is a YAML document listing ordered steps: platform
boots, stakeholder keygens, policy submissions, volume preparations,
workload launches, gate runs, and assertions about who can read which
plaintext. Steps may only reference names (principals, platforms,
policies, volume refs) defined by earlier steps.

Run-directory layout:

    stakeholders/<principal>/staging/   that party's plaintext and keys
    volumes/<quoted-policy>/<volume>/   sealed volumes
    store/                              policy-manager state
    work/                               enclave working directories

The isolation sweep checks that every file a stakeholder sealed appears,
bytewise, nowhere outside that stakeholder's own staging area and the
attested working directories.
"""

from __future__ import annotations

import urllib.parse
from dataclasses import dataclass, field
from pathlib import Path
from shutil import copytree
from typing import Optional

import yaml

from .crypto import AuthenticationFailure, SigningKey, hash_bytes
from .gate import GateConfig, GateResult, gate_run
from .manager import PolicyManager
from .platform_sim import OsFile, PlatformSpec, SimulatedPlatform
from .policy import (
    KeyGrant,
    PlatformRequirement,
    SecurityPolicy,
    VolumeDecl,
    sign_policy,
)
from .runtime import (
    attested_provision,
    attested_workload_run,
    owner_fetch_keys,
    split_volume_ref,
    volume_ref,
)
from .tee import TeeSimulator, measure_code, pack_tree
from .volume import Volume, seal_tree

EMPTY_TREE_MEASUREMENT_INPUT = b"\x00"  # placeholder artifact for workload-less policies


class ScenarioError(Exception):
    pass


@dataclass
class AssertionResult:
    name: str
    ok: bool
    detail: str = ""


@dataclass
class ScenarioOutcome:
    assertions: list[AssertionResult] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return all(a.ok for a in self.assertions)

    def add(self, name: str, ok: bool, detail: str = "") -> None:
        self.assertions.append(AssertionResult(name, ok, detail))


def _quoted(name: str) -> str:
    return urllib.parse.quote(name, safe="")


def load_scenario(path: Path | str) -> dict:
    path = Path(path)
    raw = yaml.safe_load(path.read_text())
    if not isinstance(raw, dict) or not isinstance(raw.get("steps"), list):
        raise ScenarioError("scenario must be a map with a steps list")
    return raw


def validate_references(steps: list[dict]) -> None:
    """Every step may reference only names defined by an earlier step."""
    principals: set[str] = set()
    platforms: set[str] = set()
    policies: set[str] = set()
    refs: set[str] = set()

    for i, step in enumerate(steps):
        op = step.get("op")
        where = f"step {i} ({op})"

        def need(kind: str, value: Optional[str], pool: set[str]) -> None:
            if value is not None and value not in pool:
                raise ScenarioError(f"{where} references undefined {kind} {value!r}")

        if op == "platform":
            platforms.add(step["id"])
        elif op == "keygen":
            principals.add(step["principal"])
        elif op == "policy":
            need("principal", step.get("principal"), principals)
            need("platform", step.get("platform"), platforms)
            # grantee names inside grants are forward claims, not references
            policies.add(step["name"])
            for volume in step.get("volumes", []):
                refs.add(volume_ref(step["name"], volume["name"]))
        elif op == "volume-create":
            need("principal", step.get("principal"), principals)
            need("policy", step.get("policy"), policies)
            need("volume ref", volume_ref(step["policy"], step["volume"]), refs)
        elif op == "workload-run":
            need("policy", step.get("policy"), policies)
            need("platform", step.get("platform"), platforms)
            for ref in step.get("volumes", []):
                need("volume ref", ref, refs)
        elif op == "gate-run":
            need("policy", step.get("gate_policy"), policies)
            need("platform", step.get("platform"), platforms)
            need("volume ref", step.get("source"), refs)
            need("volume ref", step.get("dest"), refs)
        elif op == "assert-read":
            need("principal", step.get("principal"), principals)
            need("policy", step.get("policy"), policies)
        elif op == "assert-no-key":
            need("principal", step.get("principal"), principals)
            need("policy", step.get("policy"), policies)
        elif op == "assert-denied-mutated":
            need("policy", step.get("policy"), policies)
            need("platform", step.get("platform"), platforms)
        elif op == "assert-isolation":
            pass
        else:
            raise ScenarioError(f"{where}: unknown op")


class ScenarioRunner:
    def __init__(self, scenario_path: Path | str, run_dir: Path | str) -> None:
        self.scenario_path = Path(scenario_path)
        self.base = self.scenario_path.parent
        self.run_dir = Path(run_dir)
        self.run_dir.mkdir(parents=True, exist_ok=True)
        (self.run_dir / "work").mkdir(exist_ok=True)
        self.tee = TeeSimulator(base_dir=self.run_dir / "work")
        self.manager = PolicyManager(
            self.run_dir / "store", self.tee.attestation_public_key
        )
        self.principals: dict[str, SigningKey] = {}
        self.platforms: dict[str, SimulatedPlatform] = {}
        self.artifacts: dict[str, bytes] = {}
        # principal -> list of plaintext blobs that must not leak
        self.protected: dict[str, list[tuple[str, bytes]]] = {}
        self.outcome = ScenarioOutcome()

    # -- path helpers --------------------------------------------------------

    def staging_dir(self, principal: str) -> Path:
        d = self.run_dir / "stakeholders" / principal / "staging"
        d.mkdir(parents=True, exist_ok=True)
        return d

    def volume_dir(self, ref: str) -> Path:
        owner, volume = split_volume_ref(ref)
        return self.run_dir / "volumes" / _quoted(owner) / volume

    def artifact_bytes(self, rel: Optional[str]) -> bytes:
        if rel is None:
            return EMPTY_TREE_MEASUREMENT_INPUT
        if rel not in self.artifacts:
            self.artifacts[rel] = pack_tree(self.base / rel)
        return self.artifacts[rel]

    # -- steps ----------------------------------------------------------------

    def run(self) -> ScenarioOutcome:
        doc = load_scenario(self.scenario_path)
        steps = doc["steps"]
        validate_references(steps)
        for step in steps:
            getattr(self, "_op_" + step["op"].replace("-", "_"))(step)
        return self.outcome

    def _op_platform(self, step: dict) -> None:
        spec = PlatformSpec(
            kernel_image=self._inline_or_file(step, "kernel_image"),
            kernel_cmdline=str(step.get("kernel_cmdline", "")),
            os_files=[
                OsFile(
                    path=str(f["path"]),
                    content=self._inline_or_file(f, "content"),
                    signed=bool(f.get("signed", True)),
                )
                for f in step.get("os_files", [])
            ],
        )
        self.platforms[step["id"]] = SimulatedPlatform.from_spec(spec)

    def _inline_or_file(self, mapping: dict, stem: str) -> bytes:
        if f"{stem}_text" in mapping:
            return str(mapping[f"{stem}_text"]).encode("utf-8")
        if f"{stem}_file" in mapping:
            return (self.base / mapping[f"{stem}_file"]).read_bytes()
        raise ScenarioError(f"need {stem}_text or {stem}_file")

    def _op_keygen(self, step: dict) -> None:
        self.principals[step["principal"]] = SigningKey.generate()

    def _op_policy(self, step: dict) -> None:
        principal = step["principal"]
        sk = self.principals[principal]
        platform_requirement = None
        if step.get("platform"):
            platform = self.platforms[step["platform"]]
            platform_requirement = PlatformRequirement(
                tpm_root_certs=(platform.root_certificate,),
                expected_pcrs=platform.expected_pcrs(),
            )
        measurement = measure_code(self.artifact_bytes(step.get("artifact")))
        policy = SecurityPolicy(
            name=step["name"],
            exec=step.get("exec", "true"),
            code_measurement=measurement.digest,
            volumes=tuple(
                VolumeDecl(v["name"], v["direction"]) for v in step.get("volumes", [])
            ),
            key_grants=tuple(
                KeyGrant(g["volume"], g["grantee"]) for g in step.get("grants", [])
            ),
            platform_requirement=platform_requirement,
            creator_public_key=sk.public_key,
            version=int(step.get("version", 1)),
        )
        decision = self.manager.upsert_policy(sign_policy(policy, sk))
        if not decision.accepted:
            raise ScenarioError(f"policy {policy.name} rejected: {decision.reason}")

    def _op_volume_create(self, step: dict) -> None:
        principal = step["principal"]
        policy_name = step["policy"]
        volume_name = step["volume"]
        ref = volume_ref(policy_name, volume_name)
        source = self.base / step["source"]
        staging = self.staging_dir(principal) / volume_name
        if staging.exists():
            raise ScenarioError(f"staging for {ref} already exists")
        copytree(source, staging)

        reason, keys = owner_fetch_keys(self.manager, policy_name, self.principals[principal])
        if reason is not None:
            raise ScenarioError(f"owner key fetch for {policy_name} failed: {reason}")
        key = keys[ref]
        volume = Volume.create(self.volume_dir(ref), volume_name, key)
        seal_tree(volume, key, staging)
        for path in sorted(staging.rglob("*")):
            if path.is_file() and path.stat().st_size >= 32:
                self.protected.setdefault(principal, []).append(
                    (path.relative_to(staging).as_posix(), path.read_bytes())
                )

    def _workload_args(self, step: dict) -> dict:
        platform = self.platforms[step["platform"]] if step.get("platform") else None
        return {
            "tpm_device": platform.device if platform else None,
            "measurement_log": platform.device.log if platform else None,
        }

    def _op_workload_run(self, step: dict) -> None:
        refs = list(step.get("volumes", []))
        volume_paths = {ref: str(self.volume_dir(ref)) for ref in refs}
        run = attested_workload_run(
            self.manager,
            self.tee,
            step["policy"],
            self.artifact_bytes(step["artifact"]),
            volume_paths,
            roles=step.get("roles"),
            **self._workload_args(step),
        )
        expect = step.get("expect", "provisioned")
        name = f"workload-run {step['policy']}"
        if expect == "provisioned":
            ok = run.provisioned and run.exit_code == 0
            detail = run.reject_reason or (run.handle.diagnostics() if run.handle and run.exit_code else "")
            self.outcome.add(name, ok, detail if not ok else "")
        else:
            self.outcome.add(
                name + " denied",
                not run.provisioned and not run.released_refs,
                run.reject_reason or "unexpectedly provisioned",
            )

    def _op_gate_run(self, step: dict) -> None:
        platform = self.platforms[step["platform"]]
        gate_policy = step["gate_policy"]
        run, keys = attested_provision(
            self.manager,
            self.tee,
            gate_policy,
            self.artifact_bytes(step.get("artifact")),
            tpm_device=platform.device,
            measurement_log=platform.device.log,
        )
        name = f"gate-run {step['source']} -> {step['dest']}"
        if not run.provisioned:
            self.outcome.add(name, False, f"gate provisioning failed: {run.reject_reason}")
            return
        source_ref, dest_ref = step["source"], step["dest"]
        source_owner, source_volume = split_volume_ref(source_ref)
        dest_owner, dest_volume = split_volume_ref(dest_ref)
        config = GateConfig(
            source_path=self.volume_dir(source_ref),
            source_policy=source_owner,
            source_volume=source_volume,
            dest_path=self.volume_dir(dest_ref),
            dest_policy=dest_owner,
            dest_volume=dest_volume,
            gate_policy=gate_policy,
            tpm_root_certs=(platform.root_certificate,),
            expected_pcrs=platform.expected_pcrs(),
        )
        result: GateResult = gate_run(
            config, platform.device, platform.device.log,
            source_key=keys[source_ref], dest_key=keys[dest_ref],
        )
        expect = step.get("expect", "accept")
        if expect == "accept":
            self.outcome.add(name, result.accepted, result.reason or "")
        else:
            self.outcome.add(name + " rejected", not result.accepted, "")

    def _op_assert_read(self, step: dict) -> None:
        principal = step["principal"]
        ref = volume_ref(step["policy"], step["volume"])
        name = f"assert-read {principal} {ref}"
        reason, keys = owner_fetch_keys(
            self.manager, step["policy"], self.principals[principal]
        )
        if reason is not None or ref not in keys:
            self.outcome.add(name, False, f"no key: {reason}")
            return
        try:
            volume = Volume.open(self.volume_dir(ref))
            data = volume.get(keys[ref], step["path"])
        except Exception as e:
            self.outcome.add(name, False, f"read failed: {e}")
            return
        expected = step.get("sha256")
        if expected is not None and hash_bytes(data).hex != expected:
            self.outcome.add(name, False, "content digest mismatch")
            return
        out_dir = self.staging_dir(principal) / "received" / step["volume"]
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / Path(step["path"]).name).write_bytes(data)
        self.outcome.add(name, True)

    def _op_assert_no_key(self, step: dict) -> None:
        principal = step["principal"]
        target_policy = step["policy"]
        target_volume = step["volume"]
        ref = volume_ref(target_policy, target_volume)
        name = f"assert-no-key {principal} {ref}"
        sk = self.principals[principal]

        # a foreign owner-export request must be refused outright
        reason, foreign = owner_fetch_keys(self.manager, target_policy, sk)
        if reason is None:
            self.outcome.add(name, False, "foreign owner export was accepted")
            return
        # the principal's own exports must not contain the target ref, and
        # none of their keys may open the target volume
        own_keys = {}
        for own_policy in self.manager.store.names():
            policy = self.manager.store.get(own_policy)
            if policy and policy.creator_public_key == sk.public_key:
                fetch_reason, keys = owner_fetch_keys(self.manager, own_policy, sk)
                if fetch_reason is None:
                    own_keys.update(keys)
        if ref in own_keys:
            self.outcome.add(name, False, "target key present in own export")
            return
        volume_path = self.volume_dir(ref)
        if volume_path.exists():
            volume = Volume.open(volume_path)
            for path in volume.paths():
                for key in own_keys.values():
                    try:
                        volume.get(key, path)
                    except AuthenticationFailure:
                        continue
                    except Exception:
                        continue
                    else:
                        self.outcome.add(name, False, f"opened {path} with foreign key")
                        return
        self.outcome.add(name, True)

    def _op_assert_denied_mutated(self, step: dict) -> None:
        artifact = bytearray(self.artifact_bytes(step["artifact"]))
        artifact[-1] ^= 0x01
        refs = list(step.get("volumes", []))
        run = attested_workload_run(
            self.manager,
            self.tee,
            step["policy"],
            bytes(artifact),
            {ref: str(self.volume_dir(ref)) for ref in refs},
            roles=step.get("roles"),
            **self._workload_args(step),
        )
        name = f"assert-denied-mutated {step['policy']}"
        ok = (
            not run.provisioned
            and run.reject_reason == "measurement_mismatch"
            and not run.released_refs
        )
        self.outcome.add(name, ok, run.reject_reason or "unexpectedly provisioned")

    def _op_assert_isolation(self, step: dict) -> None:
        leaks = isolation_sweep(self.run_dir, self.protected)
        self.outcome.add(
            "assert-isolation",
            not leaks,
            "; ".join(f"{p} leaked to {loc}" for p, loc in leaks[:5]),
        )


def isolation_sweep(
    run_dir: Path, protected: dict[str, list[tuple[str, bytes]]]
) -> list[tuple[str, str]]:
    """Find protected plaintext outside its owner's staging and the work area.

    Returns (principal, offending file) pairs; empty means isolated.
    """
    run_dir = Path(run_dir)
    work = run_dir / "work"
    leaks: list[tuple[str, str]] = []
    all_files = [p for p in run_dir.rglob("*") if p.is_file()]
    for principal, blobs in protected.items():
        own = run_dir / "stakeholders" / principal
        for candidate in all_files:
            if own in candidate.parents or work in candidate.parents:
                continue
            content = candidate.read_bytes()
            for _, blob in blobs:
                if blob in content:
                    leaks.append((principal, str(candidate.relative_to(run_dir))))
                    break
    return leaks


def run_scenario(scenario_path: Path | str, run_dir: Path | str) -> ScenarioOutcome:
    return ScenarioRunner(scenario_path, run_dir).run()
