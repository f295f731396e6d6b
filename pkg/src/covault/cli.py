"""Command-line harness.

Lab-backed commands share state under one --lab directory (the TEE
simulator's attestation key, the TPM vendor root, and the policy-manager
store), so keys released in one invocation still open volumes sealed in
another.

Exit codes: 0 success; 1 internal error; 2 usage error; 3 a protocol
decision rejected the request (the machine-readable reason is printed as
"error: <class>"). gate-run maps each reject reason to its own code, see
the gate module table. Secrets are written only to 0600 files, never to
the terminal.
"""

from __future__ import annotations

import argparse
import sys
import threading
from pathlib import Path

from .bench import run_benchmark
from .crypto import PublicKey, SigningKey, SymmetricKey
from .gate import GateConfig, gate_run, write_copy_report
from .manager import PolicyManager
from .platform_sim import PlatformSpec, SimulatedPlatform
from .policy import PolicyParseError, emit_policy, parse_policy, sign_policy
from .runtime import attested_provision, attested_workload_run, owner_fetch_keys, volume_ref
from .scenario import run_scenario
from .service import (
    ManagerClient,
    PolicyManagerServer,
    ServiceConfig,
    ServiceError,
    generate_tls_identity,
    service_code_measurement,
)
from .tee import TeeSimulator, pack_tree
from .tpm import TpmManufacturer
from .volume import Volume, seal_tree, unseal_tree

EXIT_OK = 0
EXIT_INTERNAL = 1
EXIT_USAGE = 2
EXIT_REJECTED = 3


class CliError(Exception):
    def __init__(self, message: str, code: int = EXIT_INTERNAL) -> None:
        super().__init__(message)
        self.code = code


def open_lab(lab_dir: Path) -> tuple[TeeSimulator, PolicyManager, TpmManufacturer]:
    tee = TeeSimulator.with_state(lab_dir / "tee")
    manager = PolicyManager(lab_dir / "store", tee.attestation_public_key)
    vendor = TpmManufacturer.with_state(lab_dir / "tpm-vendor")
    return tee, manager, vendor


def _write_secret(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.touch(mode=0o600)
    path.write_text(text + "\n")


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_keygen(args) -> int:
    out = Path(args.out)
    sk = SigningKey.generate()
    _write_secret(out / f"{args.name}.key", sk.private_hex())
    (out / f"{args.name}.pub").write_text(sk.public_key.hex + "\n")
    if args.tls:
        generate_tls_identity(args.name, out, f"{args.name}-tls")
    print(f"wrote {out / args.name}.key and .pub")
    return EXIT_OK


def cmd_policy_sign(args) -> int:
    try:
        policy = parse_policy(Path(args.policy).read_bytes())
    except PolicyParseError as e:
        raise CliError(f"policy invalid: {e}", EXIT_USAGE) from e
    sk = SigningKey.from_hex(Path(args.key).read_text().strip())
    signed = sign_policy(policy, sk)
    out = Path(args.out) if args.out else Path(args.policy)
    out.write_bytes(emit_policy(signed))
    print(f"signed {signed.name} v{signed.version} -> {out}")
    return EXIT_OK


def _client(args) -> ManagerClient:
    host, _, port = args.server.rpartition(":")
    return ManagerClient(
        host or "127.0.0.1",
        int(port),
        server_cert=args.server_cert,
        client_cert=args.client_cert,
        client_key=args.client_key,
        expected_measurement=args.expect_measurement,
    )


def cmd_policy_submit(args) -> int:
    text = Path(args.policy).read_bytes()
    if args.server:
        body = _client(args).call("policy-upsert", {"policy": text.decode("utf-8")})
        accepted, reason = body["accepted"], body["reason"]
    else:
        _, manager, _ = open_lab(Path(args.lab))
        try:
            policy = parse_policy(text)
        except PolicyParseError as e:
            raise CliError(f"policy invalid: {e}", EXIT_USAGE) from e
        decision = manager.upsert_policy(policy)
        accepted, reason = decision.accepted, decision.reason
    if not accepted:
        print(f"error: {reason}")
        return EXIT_REJECTED
    print("accepted")
    return EXIT_OK


def cmd_policy_fetch(args) -> int:
    if args.server:
        text = _client(args).call("policy-fetch", {"name": args.name})["policy"].encode()
    else:
        _, manager, _ = open_lab(Path(args.lab))
        text = manager.get_policy_public(args.name)
    if args.out:
        Path(args.out).write_bytes(text)
        print(f"wrote {args.out}")
    else:
        sys.stdout.write(text.decode("utf-8"))
    return EXIT_OK


def _volume_key(args, manager=None) -> SymmetricKey:
    if args.key_file:
        return SymmetricKey.from_hex(Path(args.key_file).read_text().strip())
    if not (args.lab and args.policy and args.owner_key):
        raise CliError("need --key-file, or --lab/--policy/--owner-key", EXIT_USAGE)
    if manager is None:
        _, manager, _ = open_lab(Path(args.lab))
    owner_sk = SigningKey.from_hex(Path(args.owner_key).read_text().strip())
    reason, keys = owner_fetch_keys(manager, args.policy, owner_sk)
    if reason is not None:
        raise CliError(f"owner key fetch rejected: {reason}", EXIT_REJECTED)
    ref = volume_ref(args.policy, args.name)
    if ref not in keys:
        raise CliError(f"policy does not declare volume {args.name!r}", EXIT_USAGE)
    return keys[ref]


def cmd_volume_seal(args) -> int:
    key = _volume_key(args)
    volume = Volume.create(Path(args.volume), args.name, key)
    count = seal_tree(volume, key, Path(args.source))
    print(f"sealed {count} files into {args.volume}")
    return EXIT_OK


def cmd_volume_unseal(args) -> int:
    volume = Volume.open(Path(args.volume))
    args.name = volume.volume_name
    key = _volume_key(args)
    count = unseal_tree(volume, key, Path(args.dest))
    print(f"unsealed {count} files into {args.dest}")
    return EXIT_OK


def _platform_for(args, vendor: TpmManufacturer):
    if not args.platform:
        return None
    spec = PlatformSpec.load(Path(args.platform))
    return SimulatedPlatform.from_spec(spec, vendor)


def cmd_workload_run(args) -> int:
    tee, manager, vendor = open_lab(Path(args.lab))
    platform = _platform_for(args, vendor)
    volume_paths = dict(pair.split("=", 1) for pair in args.volume or [])
    roles = dict(pair.split("=", 1) for pair in args.role or [])
    run = attested_workload_run(
        manager,
        tee,
        args.policy,
        pack_tree(Path(args.artifact)),
        volume_paths,
        roles=roles,
        tpm_device=platform.device if platform else None,
        measurement_log=platform.device.log if platform else None,
    )
    if not run.provisioned:
        print(f"error: {run.reject_reason}")
        return EXIT_REJECTED
    if run.exit_code != 0:
        print(f"workload exited {run.exit_code}")
        if run.handle:
            sys.stderr.write(run.handle.diagnostics())
        return EXIT_INTERNAL
    print(f"workload finished; released keys: {', '.join(run.released_refs) or 'none'}")
    return EXIT_OK


def cmd_gate_run(args) -> int:
    tee, manager, vendor = open_lab(Path(args.lab))
    platform = _platform_for(args, vendor)
    if platform is None:
        raise CliError("gate-run requires --platform", EXIT_USAGE)
    config = GateConfig.load(Path(args.config))
    artifact = pack_tree(Path(args.artifact))
    run, keys = attested_provision(
        manager, tee, config.gate_policy, artifact,
        tpm_device=platform.device, measurement_log=platform.device.log,
    )
    if not run.provisioned:
        print(f"error: {run.reject_reason}")
        return EXIT_REJECTED
    source_ref = volume_ref(config.source_policy, config.source_volume)
    dest_ref = volume_ref(config.dest_policy, config.dest_volume)
    result = gate_run(
        config, platform.device, platform.device.log,
        source_key=keys[source_ref], dest_key=keys[dest_ref],
    )
    if result.accepted:
        assert result.report is not None
        if args.report:
            write_copy_report(result.report, Path(args.report))
        print(f"copied {len(result.report.files)} files")
    else:
        print(f"error: {result.reason}")
    return result.exit_code


def cmd_bench_attest(args) -> int:
    report = run_benchmark(Path(args.workdir), runs=args.runs)
    print(report.render_table())
    if args.out:
        Path(args.out).write_bytes(report.to_canonical())
        print(f"wrote {args.out}")
    return EXIT_OK


def cmd_scenario_run(args) -> int:
    outcome = run_scenario(Path(args.scenario), Path(args.run_dir))
    for result in outcome.assertions:
        status = "PASS" if result.ok else "FAIL"
        detail = f"  ({result.detail})" if result.detail and not result.ok else ""
        print(f"{status}  {result.name}{detail}")
    return EXIT_OK if outcome.ok else EXIT_REJECTED


def cmd_serve(args) -> int:
    config = ServiceConfig.load(Path(args.config))
    manager = PolicyManager(
        config.store_path, PublicKey.from_hex(config.tee_attestation_root)
    )
    server = PolicyManagerServer(manager, config)
    host, port = server.address
    print(f"serving on {host}:{port}; service measurement {service_code_measurement()}")
    try:
        server.serve_in_background()
        threading.Event().wait()
    except KeyboardInterrupt:
        pass
    finally:
        server.close()
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def _add_server_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--server", help="host:port of a running policy manager")
    p.add_argument("--server-cert", help="pinned service certificate (PEM)")
    p.add_argument("--client-cert", help="client TLS certificate (PEM)")
    p.add_argument("--client-key", help="client TLS key (PEM)")
    p.add_argument(
        "--expect-measurement",
        help="required service code measurement (hex) in the server certificate",
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="covault",
        description="multi-stakeholder confidential computation harness",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("keygen", help="generate a stakeholder signing keypair")
    p.add_argument("--out", required=True)
    p.add_argument("--name", required=True)
    p.add_argument("--tls", action="store_true", help="also emit a TLS client identity")
    p.set_defaults(fn=cmd_keygen)

    p = sub.add_parser("policy-sign", help="sign a policy document")
    p.add_argument("policy")
    p.add_argument("--key", required=True)
    p.add_argument("--out")
    p.set_defaults(fn=cmd_policy_sign)

    p = sub.add_parser("policy-submit", help="deploy a signed policy")
    p.add_argument("policy")
    p.add_argument("--lab", help="local lab directory (direct mode)")
    _add_server_flags(p)
    p.set_defaults(fn=cmd_policy_submit)

    p = sub.add_parser("policy-fetch", help="fetch a stored policy verbatim")
    p.add_argument("name")
    p.add_argument("--lab")
    p.add_argument("--out")
    _add_server_flags(p)
    p.set_defaults(fn=cmd_policy_fetch)

    for verb, fn in (("volume-seal", cmd_volume_seal), ("volume-unseal", cmd_volume_unseal)):
        p = sub.add_parser(verb, help=f"{verb.replace('-', ' ')} a file tree")
        p.add_argument("--volume", required=True)
        p.add_argument("--key-file", help="hex volume key file")
        p.add_argument("--lab")
        p.add_argument("--policy")
        p.add_argument("--owner-key", help="stakeholder signing key file")
        if verb == "volume-seal":
            p.add_argument("--name", required=True, help="volume name in the manifest")
            p.add_argument("--source", required=True)
        else:
            p.add_argument("--dest", required=True)
        p.set_defaults(fn=fn)

    p = sub.add_parser("workload-run", help="launch and provision an attested workload")
    p.add_argument("--lab", required=True)
    p.add_argument("--policy", required=True)
    p.add_argument("--artifact", required=True, help="workload directory to measure")
    p.add_argument("--platform", help="platform description YAML")
    p.add_argument("--volume", action="append", metavar="REF=PATH")
    p.add_argument("--role", action="append", metavar="ROLE=REF")
    p.set_defaults(fn=cmd_workload_run)

    p = sub.add_parser("gate-run", help="run the trusted-boot gating stage")
    p.add_argument("--lab", required=True)
    p.add_argument("--config", required=True, help="gate config document")
    p.add_argument("--artifact", required=True, help="gate stub directory to measure")
    p.add_argument("--platform", required=True)
    p.add_argument("--report", help="write the copy report here")
    p.set_defaults(fn=cmd_gate_run)

    p = sub.add_parser("bench-attest", help="attestation-latency benchmark")
    p.add_argument("--workdir", required=True)
    p.add_argument("--runs", type=int, default=10)
    p.add_argument("--out", help="canonical report document path")
    p.set_defaults(fn=cmd_bench_attest)

    p = sub.add_parser("scenario-run", help="execute a declarative scenario")
    p.add_argument("scenario")
    p.add_argument("--run-dir", required=True)
    p.set_defaults(fn=cmd_scenario_run)

    p = sub.add_parser("serve", help="run the policy-manager TLS service")
    p.add_argument("--config", required=True)
    p.set_defaults(fn=cmd_serve)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except CliError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.code
    except ServiceError as e:
        print(f"error: {e.code}: {e.detail}", file=sys.stderr)
        return EXIT_REJECTED
    except Exception as e:  # noqa: BLE001 - top-level boundary
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
