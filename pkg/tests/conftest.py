import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from covault.crypto import SigningKey
from covault.manager import PolicyManager
from covault.platform_sim import SimulatedPlatform
from covault.policy import (
    KeyGrant,
    PlatformRequirement,
    SecurityPolicy,
    VolumeDecl,
    sign_policy,
)
from covault.tee import TeeSimulator

REPO_ROOT = Path(__file__).parent.parent


@pytest.fixture
def repo_root() -> Path:
    return REPO_ROOT


@pytest.fixture
def lab(tmp_path):
    """A fresh lab: TEE simulator + policy manager rooted in tmp_path."""
    tee = TeeSimulator(base_dir=tmp_path / "enclaves")
    manager = PolicyManager(tmp_path / "store", tee.attestation_public_key)
    return tee, manager


@pytest.fixture
def platform():
    p = SimulatedPlatform()
    p.boot(b"test kernel image", "quiet splash ima=on")
    p.load_file("usr/sbin/init", b"init binary", signed=True)
    p.load_file("usr/bin/service", b"service binary", signed=True)
    return p


def make_policy(
    name: str,
    sk: SigningKey,
    measurement,
    volumes=(),
    grants=(),
    platform_requirement=None,
    version: int = 1,
    exec_command: str = "true",
) -> SecurityPolicy:
    policy = SecurityPolicy(
        name=name,
        exec=exec_command,
        code_measurement=measurement,
        volumes=tuple(VolumeDecl(n, d) for n, d in volumes),
        key_grants=tuple(KeyGrant(v, g) for v, g in grants),
        platform_requirement=platform_requirement,
        creator_public_key=sk.public_key,
        version=version,
    )
    return sign_policy(policy, sk)


def requirement_for(platform: SimulatedPlatform) -> PlatformRequirement:
    return PlatformRequirement(
        tpm_root_certs=(platform.root_certificate,),
        expected_pcrs=platform.expected_pcrs(),
    )


# ---------------------------------------------------------------------------
# Acceptance reporting: one pass/fail line per criterion at session end
# ---------------------------------------------------------------------------

_acceptance_results: list[tuple[str, str]] = []


def pytest_runtest_logreport(report):
    if report.when != "call" or "test_acceptance" not in report.nodeid:
        return
    name = report.nodeid.split("::")[-1]
    _acceptance_results.append((name, "PASS" if report.passed else "FAIL"))


def pytest_terminal_summary(terminalreporter):
    if not _acceptance_results:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for name, status in _acceptance_results:
        terminalreporter.write_line(f"{status}  {name}")
