import itertools

import pytest

from covault.crypto import Digest, SymmetricKey, hash_bytes
from covault.gate import GateConfig, GateError, gate_run, write_gate_config
from covault.platform_sim import SimulatedPlatform
from covault.tpm import IMA_PCR, LogEntry, MeasurementLog, TpmManufacturer
from covault.volume import Volume, volume_verify


def booted_platform():
    platform = SimulatedPlatform()
    platform.boot(b"gate kernel", "quiet ima=on")
    platform.load_file("usr/sbin/loader", b"loader", signed=True)
    platform.load_file("usr/lib/driver.so", b"driver", signed=True)
    return platform


def make_source(tmp_path, key, files=3):
    volume = Volume.create(tmp_path / "source", "src", key)
    contents = {}
    for i in range(files):
        data = f"file {i} payload".encode() * (i + 1)
        volume.put(key, f"data/f{i}.bin", data)
        contents[f"data/f{i}.bin"] = data
    return volume, contents


def config_for(tmp_path, platform, expected_pcrs=None, roots=None):
    return GateConfig(
        source_path=tmp_path / "source",
        source_policy="alice/data",
        source_volume="src",
        dest_path=tmp_path / "dest",
        dest_policy="carol/delivery",
        dest_volume="dst",
        gate_policy="ops/gate",
        tpm_root_certs=roots if roots is not None else (platform.root_certificate,),
        expected_pcrs=expected_pcrs if expected_pcrs is not None else platform.expected_pcrs(),
    )


class TestGateHappyPath:
    def test_all_files_copied_and_readable(self, tmp_path):
        platform = booted_platform()
        src_key, dst_key = SymmetricKey.generate(), SymmetricKey.generate()
        _, contents = make_source(tmp_path, src_key)
        config = config_for(tmp_path, platform)
        result = gate_run(config, platform.device, platform.device.log, src_key, dst_key)
        assert result.accepted and result.exit_code == 0
        dest = Volume.open(tmp_path / "dest")
        assert volume_verify(dest) == []
        for path, data in contents.items():
            assert dest.get(dst_key, path) == data
        # re-encryption, not key sharing: source key does not open the copy
        with pytest.raises(Exception):
            dest.get(src_key, next(iter(contents)))

    def test_copy_report_lists_files_and_hashes(self, tmp_path):
        platform = booted_platform()
        src_key, dst_key = SymmetricKey.generate(), SymmetricKey.generate()
        _, contents = make_source(tmp_path, src_key)
        result = gate_run(
            config_for(tmp_path, platform), platform.device, platform.device.log,
            src_key, dst_key,
        )
        assert result.report is not None
        reported = {path: (digest, length) for path, digest, length in result.report.files}
        assert set(reported) == set(contents)
        for path, data in contents.items():
            assert reported[path] == (hash_bytes(data).hex, len(data))

    def test_config_file_round_trip(self, tmp_path):
        platform = booted_platform()
        config = config_for(tmp_path, platform)
        write_gate_config(config, tmp_path / "gate.json")
        loaded = GateConfig.load(tmp_path / "gate.json")
        assert loaded.to_doc() == config.to_doc()


def tampered_log(platform) -> MeasurementLog:
    evil = hash_bytes(b"unsigned event")
    return MeasurementLog(
        list(platform.device.log.entries())
        + [LogEntry(IMA_PCR, evil, "tmp/unsigned-binary", evil)]
    )


def mutated_pcrs(platform) -> dict[int, Digest]:
    pcrs = dict(platform.expected_pcrs())
    flipped = bytearray(pcrs[17].value)
    flipped[-1] ^= 1
    pcrs[17] = Digest(bytes(flipped))
    return pcrs


class TestGatingSoundness:
    @pytest.mark.parametrize(
        "chain_ok,pcrs_ok,log_ok", list(itertools.product([True, False], repeat=3))
    )
    def test_eight_case_table(self, tmp_path, chain_ok, pcrs_ok, log_ok):
        """Data flows iff chain, PCR values, and log replay are all good."""
        platform = booted_platform()
        src_key, dst_key = SymmetricKey.generate(), SymmetricKey.generate()
        make_source(tmp_path, src_key)
        roots = (platform.root_certificate,) if chain_ok else (
            TpmManufacturer("impostor").root_certificate,
        )
        expected = platform.expected_pcrs() if pcrs_ok else mutated_pcrs(platform)
        log = platform.device.log if log_ok else tampered_log(platform)

        config = config_for(tmp_path, platform, expected_pcrs=expected, roots=roots)
        result = gate_run(config, platform.device, log, src_key, dst_key)

        should_flow = chain_ok and pcrs_ok and log_ok
        assert result.accepted == should_flow
        assert (tmp_path / "dest").exists() == should_flow
        if not should_flow:
            expected_reason = (
                "untrusted_chain" if not chain_ok
                else "pcr_mismatch" if not pcrs_ok
                else "log_replay_mismatch"
            )
            assert result.reason == expected_reason
            assert result.exit_code != 0

    def test_kernel_mutation_rejects_with_empty_destination(self, tmp_path):
        """Policy pinned one kernel; the booted platform runs another."""
        golden = booted_platform()
        src_key, dst_key = SymmetricKey.generate(), SymmetricKey.generate()
        make_source(tmp_path, src_key)
        rogue = SimulatedPlatform(manufacturer=golden.manufacturer)
        rogue.boot(b"gate kernel MUTATED", "quiet ima=on")
        rogue.load_file("usr/sbin/loader", b"loader", signed=True)
        rogue.load_file("usr/lib/driver.so", b"driver", signed=True)
        config = config_for(tmp_path, golden)  # expectations from the golden boot
        result = gate_run(config, rogue.device, rogue.device.log, src_key, dst_key)
        assert (result.accepted, result.reason) == (False, "pcr_mismatch")
        assert not (tmp_path / "dest").exists()


class TestAtomicity:
    def test_crash_at_every_file_leaves_empty_or_complete(self, tmp_path, monkeypatch):
        platform = booted_platform()
        src_key, dst_key = SymmetricKey.generate(), SymmetricKey.generate()
        _, contents = make_source(tmp_path, src_key, files=5)

        for crash_after in range(len(contents)):
            dest = tmp_path / f"dest-{crash_after}"
            config = GateConfig(
                source_path=tmp_path / "source",
                source_policy="a", source_volume="src",
                dest_path=dest, dest_policy="c", dest_volume="dst",
                gate_policy="g",
                tpm_root_certs=(platform.root_certificate,),
                expected_pcrs=platform.expected_pcrs(),
            )
            calls = {"n": 0}
            real_put = Volume.put

            def crashing_put(self, key, path, data, _limit=crash_after, _c=calls):
                if _c["n"] >= _limit:
                    raise OSError("injected crash mid-copy")
                _c["n"] += 1
                return real_put(self, key, path, data)

            monkeypatch.setattr(Volume, "put", crashing_put)
            with pytest.raises(OSError):
                gate_run(config, platform.device, platform.device.log, src_key, dst_key)
            monkeypatch.setattr(Volume, "put", real_put)

            assert not dest.exists(), f"partial copy visible after crash {crash_after}"
            assert not dest.with_name(dest.name + f".staging-{0}").exists()

        # and with no crash the full copy publishes
        final = tmp_path / "dest-final"
        config = GateConfig(
            source_path=tmp_path / "source", source_policy="a", source_volume="src",
            dest_path=final, dest_policy="c", dest_volume="dst", gate_policy="g",
            tpm_root_certs=(platform.root_certificate,),
            expected_pcrs=platform.expected_pcrs(),
        )
        result = gate_run(config, platform.device, platform.device.log, src_key, dst_key)
        assert result.accepted
        volume = Volume.open(final)
        assert volume_verify(volume) == []
        assert set(volume.paths()) == set(contents)

    def test_source_corruption_aborts_with_no_destination(self, tmp_path):
        platform = booted_platform()
        src_key, dst_key = SymmetricKey.generate(), SymmetricKey.generate()
        volume, _ = make_source(tmp_path, src_key)
        entry = volume._entries["data/f1.bin"]
        blob = tmp_path / "source" / entry.ciphertext_hash.hex
        raw = bytearray(blob.read_bytes())
        raw[0] ^= 1
        blob.write_bytes(bytes(raw))
        result = gate_run(
            config_for(tmp_path, platform), platform.device, platform.device.log,
            src_key, dst_key,
        )
        assert (result.accepted, result.reason) == (False, "volume_auth_failure")
        assert not (tmp_path / "dest").exists()

    def test_existing_destination_refused(self, tmp_path):
        platform = booted_platform()
        src_key, dst_key = SymmetricKey.generate(), SymmetricKey.generate()
        make_source(tmp_path, src_key)
        (tmp_path / "dest").mkdir()
        with pytest.raises(GateError):
            gate_run(config_for(tmp_path, platform), platform.device,
                     platform.device.log, src_key, dst_key)

    def test_concurrent_gate_lock(self, tmp_path):
        import os

        platform = booted_platform()
        src_key, dst_key = SymmetricKey.generate(), SymmetricKey.generate()
        make_source(tmp_path, src_key)
        lock = tmp_path / "dest.gate-lock"
        lock.parent.mkdir(exist_ok=True)
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        try:
            with pytest.raises(GateError):
                gate_run(config_for(tmp_path, platform), platform.device,
                         platform.device.log, src_key, dst_key)
        finally:
            os.close(fd)
            lock.unlink()
