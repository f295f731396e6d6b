import itertools
from dataclasses import replace

import pytest

from covault.crypto import SigningKey, hash_bytes
from covault.policy import (
    PolicyParseError,
    SecurityPolicy,
    authorize_update,
    emit_policy,
    parse_policy,
    sign_policy,
    verify_policy,
)
from conftest import make_policy, requirement_for
from covault.platform_sim import SimulatedPlatform

MEAS = hash_bytes(b"workload-artifact")


@pytest.fixture
def alice_sk():
    return SigningKey.generate()


@pytest.fixture
def signed(alice_sk):
    return make_policy(
        "alice/data",
        alice_sk,
        MEAS,
        volumes=[("training-data", "input"), ("scratch", "output")],
        grants=[("training-data", "bob/trainer")],
    )


class TestSignVerify:
    def test_sign_then_verify(self, signed):
        assert verify_policy(signed)

    def test_unsigned_never_accepted(self, signed):
        assert not verify_policy(replace(signed, signature=None))

    def test_tampered_exec_rejects(self, signed):
        assert not verify_policy(replace(signed, exec="rm -rf /"))

    def test_signature_from_other_policy_rejects(self, signed, alice_sk):
        other = make_policy("alice/other", alice_sk, MEAS)
        assert not verify_policy(replace(signed, signature=other.signature))

    def test_sign_requires_matching_creator_key(self, signed):
        mallory = SigningKey.generate()
        with pytest.raises(Exception):
            sign_policy(signed, mallory)


class TestParse:
    def test_round_trip_is_byte_identical(self, signed):
        text = emit_policy(signed)
        assert emit_policy(parse_policy(text)) == text

    def test_parsed_equals_original(self, signed):
        assert parse_policy(emit_policy(signed)) == signed

    def test_undeclared_grant_volume(self, signed):
        doc = emit_policy(signed).decode()
        bad = doc.replace('"volume": "training-data"', '"volume": "nonexistent"')
        with pytest.raises(PolicyParseError) as exc:
            parse_policy(bad.encode())
        assert any("undeclared volume" in v for v in exc.value.violations)

    def test_pcr_index_out_of_range(self, alice_sk):
        platform = SimulatedPlatform()
        platform.boot(b"k", "c")
        policy = make_policy(
            "a/p", alice_sk, MEAS, platform_requirement=requirement_for(platform)
        )
        doc = emit_policy(policy).decode().replace('"10"', '"24"')
        with pytest.raises(PolicyParseError) as exc:
            parse_policy(doc.encode())
        assert any("PCR index 24" in v for v in exc.value.violations)

    def test_unknown_field_rejected(self, signed):
        doc = emit_policy(signed).decode().replace(
            '"version"', '"surprise": 1, "version"'
        )
        with pytest.raises(PolicyParseError) as exc:
            parse_policy(doc.encode())
        assert any("unknown fields" in v for v in exc.value.violations)

    def test_all_violations_reported_not_just_first(self):
        text = b"""
name: ""
exec: ""
code_measurement: "zz"
volumes: [{name: "a/b", direction: sideways}]
key_grants: [{volume: "missing", grantee: ""}]
creator_public_key: "nope"
version: 0
"""
        with pytest.raises(PolicyParseError) as exc:
            parse_policy(text)
        assert len(exc.value.violations) >= 6

    def test_annotated_example_parses(self, repo_root):
        policy = parse_policy((repo_root / "docs" / "policy-example.yaml").read_bytes())
        assert policy.name == "bob/trainer"
        assert policy.signature is None
        assert sorted(policy.platform_requirement.expected_pcrs) == [10, 17]

    def test_yaml_input_accepted(self, alice_sk):
        text = f"""
name: alice/data
exec: "true"
code_measurement: "{MEAS.hex}"
volumes:
  - {{name: training-data, direction: input}}
key_grants: []
creator_public_key: "{alice_sk.public_key.hex}"
version: 1
"""
        policy = parse_policy(text.encode())
        assert policy.name == "alice/data"
        assert policy.signature is None


def chain_of_updates(sk0, length, rotate=True):
    """Versions 1..length, each signed by its predecessor's key.

    With rotate=True every update also installs a fresh creator key.
    """
    if rotate:
        keys = [sk0] + [SigningKey.generate() for _ in range(length - 1)]
    else:
        keys = [sk0] * length
    policies = []
    for i in range(length):
        unsigned = SecurityPolicy(
            name="alice/data",
            exec="true",
            code_measurement=MEAS,
            volumes=(),
            key_grants=(),
            platform_requirement=None,
            creator_public_key=keys[i].public_key,
            version=i + 1,
        )
        signer = keys[max(i - 1, 0)]
        policies.append(
            replace(unsigned, signature=signer.sign(unsigned.signing_bytes()))
        )
    return policies


class TestAuthorizeUpdate:
    def test_accepts_successor(self, alice_sk, signed):
        nxt = make_policy("alice/data", alice_sk, MEAS, version=2)
        assert authorize_update(signed, nxt).accepted

    def test_attacker_key_rejected(self, signed):
        mallory = SigningKey.generate()
        forged = make_policy("alice/data", mallory, MEAS, version=2)
        decision = authorize_update(signed, forged)
        assert (decision.accepted, decision.reason) == (False, "bad_signature")

    def test_name_mismatch(self, alice_sk, signed):
        other = make_policy("alice/other", alice_sk, MEAS, version=2)
        assert authorize_update(signed, other).reason == "name_mismatch"

    def test_version_replay_rejected(self, alice_sk, signed):
        stale = make_policy("alice/data", alice_sk, MEAS, version=1)
        assert authorize_update(signed, stale).reason == "stale_version"

    def test_key_rotation_old_key_signs_new_policy(self, alice_sk, signed):
        new_sk = SigningKey.generate()
        rotated = SecurityPolicy(
            name="alice/data",
            exec="true",
            code_measurement=MEAS,
            volumes=signed.volumes,
            key_grants=signed.key_grants,
            platform_requirement=None,
            creator_public_key=new_sk.public_key,
            version=2,
        )
        rotated = replace(rotated, signature=alice_sk.sign(rotated.signing_bytes()))
        assert authorize_update(signed, rotated).accepted
        # and the next update must be signed by the rotated key
        v3 = make_policy("alice/data", new_sk, MEAS, version=3)
        assert authorize_update(rotated, v3).accepted

    def test_all_orderings_of_three_updates(self, alice_sk):
        """Enumerate every ordering of v2..v4; only ascending prefixes install."""
        base, *updates = chain_of_updates(alice_sk, 4)
        for ordering in itertools.permutations(range(3)):
            installed = base
            expected_installed = base
            for idx in ordering:
                proposal = updates[idx]
                decision = authorize_update(installed, proposal)
                # independent model: accept iff the proposal is the exact
                # successor (version + 1, signed by installed creator key)
                should_accept = proposal.version == expected_installed.version + 1
                assert decision.accepted == should_accept, (ordering, idx)
                if decision.accepted:
                    installed = proposal
                    expected_installed = proposal

    def test_chains_up_to_five_accept_and_foreign_injection_rejects(self, alice_sk):
        for length in range(2, 6):
            chain = chain_of_updates(alice_sk, length)
            installed = chain[0]
            for nxt in chain[1:]:
                decision = authorize_update(installed, nxt)
                assert decision.accepted
                installed = nxt
            # inject a foreign-signed update at every position
            for position in range(1, length):
                chain2 = chain_of_updates(alice_sk, length)
                mallory = SigningKey.generate()
                foreign = replace(
                    chain2[position],
                    signature=mallory.sign(chain2[position].signing_bytes()),
                )
                installed = chain2[0]
                for i, nxt in enumerate(chain2[1:], start=1):
                    proposal = foreign if i == position else nxt
                    decision = authorize_update(installed, proposal)
                    if i >= position:
                        # the break poisons the rest of the chain too
                        assert not decision.accepted
                    else:
                        assert decision.accepted
                        installed = nxt

    def test_depends_only_on_policy_contents(self, alice_sk, signed):
        # same decision regardless of any ambient state: pure function
        nxt = make_policy("alice/data", alice_sk, MEAS, version=2)
        first = authorize_update(signed, nxt)
        second = authorize_update(signed, nxt)
        assert first == second
