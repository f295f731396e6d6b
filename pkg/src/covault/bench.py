"""Attestation-latency benchmark.

Times three nested phases of bringing up a verified workload, each over at
least ten independent runs, reporting the 10% trimmed mean and standard
deviation per phase:

    workload launch                    process start + exit only
    + enclave attestation              launch + quote + key release
    + enclave and platform attestation launch + quote + TPM quote + log replay

The numbers are properties of this machine and simulator, reported as
absolute local values; latencies are stored as integer microseconds in
the canonical report document.
"""

from __future__ import annotations

import statistics
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

from .crypto import canonical_encode
from .manager import PolicyManager
from .platform_sim import SimulatedPlatform
from .policy import PlatformRequirement, SecurityPolicy, sign_policy
from .runtime import attested_workload_run
from .crypto import SigningKey
from .tee import TeeSimulator, measure_code, pack_tree

MIN_RUNS = 10
TRIM_PROPORTION = 0.1

PHASE_LAUNCH = "workload launch"
PHASE_TEE = "launch + enclave attestation"
PHASE_TEE_TPM = "launch + enclave + platform attestation"


class BenchError(Exception):
    pass


def trimmed_mean(samples: Sequence[float], proportion: float = TRIM_PROPORTION) -> float:
    """Drop floor(n*proportion) samples from each end of the sorted list."""
    if not samples:
        raise BenchError("no samples")
    ordered = sorted(samples)
    k = int(len(ordered) * proportion)
    kept = ordered[k : len(ordered) - k] if k else ordered
    return sum(kept) / len(kept)


@dataclass(frozen=True)
class BenchRow:
    phase: str
    mean_us: int
    sd_us: int
    runs: int


@dataclass(frozen=True)
class BenchReport:
    rows: tuple[BenchRow, ...]

    def to_doc(self) -> dict:
        return {
            "trim_proportion_percent": int(TRIM_PROPORTION * 100),
            "rows": [
                {
                    "phase": r.phase,
                    "mean_us": r.mean_us,
                    "sd_us": r.sd_us,
                    "runs": r.runs,
                }
                for r in self.rows
            ],
        }

    def to_canonical(self) -> bytes:
        return canonical_encode(self.to_doc())

    def render_table(self) -> str:
        width = max(len(r.phase) for r in self.rows)
        lines = [f"{'phase':<{width}}  mean        sd          runs"]
        for r in self.rows:
            lines.append(
                f"{r.phase:<{width}}  {r.mean_us / 1000:>8.1f}ms  {r.sd_us / 1000:>8.1f}ms  {r.runs:>4}"
            )
        return "\n".join(lines)


def _measure(fn: Callable[[], None], runs: int) -> BenchRow:
    samples: list[float] = []
    for _ in range(runs):
        start = time.perf_counter()
        fn()
        samples.append((time.perf_counter() - start) * 1e6)
    return BenchRow(
        phase="",
        mean_us=round(trimmed_mean(samples)),
        sd_us=round(statistics.stdev(samples)),
        runs=runs,
    )


def _bench_artifact_dir(workdir: Path) -> Path:
    artifact_dir = workdir / "bench-workload"
    artifact_dir.mkdir(parents=True, exist_ok=True)
    (artifact_dir / "main.py").write_text(
        "import sys\nsys.stdin.readline()\nprint('ok')\n"
    )
    return artifact_dir


def run_benchmark(workdir: Path | str, runs: int = MIN_RUNS) -> BenchReport:
    """Build a throwaway lab and time the three provisioning depths."""
    if runs < MIN_RUNS:
        raise BenchError(f"need at least {MIN_RUNS} runs")
    workdir = Path(workdir)
    workdir.mkdir(parents=True, exist_ok=True)

    tee = TeeSimulator(base_dir=workdir / "enclaves")
    manager = PolicyManager(workdir / "store", tee.attestation_public_key)
    platform = SimulatedPlatform()
    platform.boot(b"bench kernel", "quiet")
    platform.load_file("usr/bin/service", b"service body", signed=True)

    artifact = pack_tree(_bench_artifact_dir(workdir))
    measurement = measure_code(artifact)
    owner = SigningKey.generate()

    def submit(name: str, requirement: PlatformRequirement | None) -> None:
        policy = SecurityPolicy(
            name=name,
            exec="python main.py",
            code_measurement=measurement.digest,
            volumes=(),
            key_grants=(),
            platform_requirement=requirement,
            creator_public_key=owner.public_key,
            version=1,
        )
        decision = manager.upsert_policy(sign_policy(policy, owner))
        if not decision.accepted:
            raise BenchError(f"bench policy rejected: {decision.reason}")

    submit("bench/plain", None)
    submit(
        "bench/platform",
        PlatformRequirement(
            tpm_root_certs=(platform.root_certificate,),
            expected_pcrs=platform.expected_pcrs(),
        ),
    )

    def launch_only() -> None:
        handle = tee.launch(artifact, "python main.py")
        handle.close_stdin()
        if handle.wait() != 0:
            raise BenchError("bench workload failed")

    def launch_tee() -> None:
        run = attested_workload_run(manager, tee, "bench/plain", artifact, {})
        if not run.provisioned or run.exit_code != 0:
            raise BenchError(f"attested run failed: {run.reject_reason}")

    def launch_tee_tpm() -> None:
        run = attested_workload_run(
            manager, tee, "bench/platform", artifact, {},
            tpm_device=platform.device, measurement_log=platform.device.log,
        )
        if not run.provisioned or run.exit_code != 0:
            raise BenchError(f"platform-attested run failed: {run.reject_reason}")

    rows = []
    for phase, fn in (
        (PHASE_LAUNCH, launch_only),
        (PHASE_TEE, launch_tee),
        (PHASE_TEE_TPM, launch_tee_tpm),
    ):
        row = _measure(fn, runs)
        rows.append(BenchRow(phase, row.mean_us, row.sd_us, row.runs))
    return BenchReport(rows=tuple(rows))
