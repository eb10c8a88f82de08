"""Measurement cache, platform report algebra, and report verification."""

import hashlib

import pytest

from walletemu import attestation as att
from walletemu.crypto import Rng, SigningKey
from walletemu.errors import NoPolicyKey
from walletemu.memory import CostModel

MIB = 1048576
SHA512_EMPTY = bytes.fromhex(
    "cf83e1357eefb8bdf1542850d66d8007d620e4050b5715dc83f4a921d36ce9ce"
    "47d0d13c5d85f2b0ff8318d2877eec2f63b931bd47417a81a538327af927da3e")


@pytest.fixture
def model():
    return CostModel()


@pytest.fixture
def machine():
    return att.MachineKey.generate(Rng(11))


class TestMeasurementCache:
    def test_cold_60_mib_costs_about_1_1_s(self, model):
        cache = att.MeasurementCache()
        content = bytes(60 * MIB)
        _, charge = cache.measure(att.SubjectKind.ZYGOTE, "z1", content, model)
        assert charge == pytest.approx(1_100_917, rel=1e-3)
        assert abs(charge - 1_100_000) / 1_100_000 < 0.10
        assert cache.bytes_hashed == 60 * MIB

    def test_cache_hit_is_free(self, model):
        cache = att.MeasurementCache()
        content = b"zygote bytes"
        cache.measure(att.SubjectKind.ZYGOTE, "z1", content, model)
        hashed_before = cache.bytes_hashed
        m, charge = cache.measure(att.SubjectKind.ZYGOTE, "z1", content, model)
        assert charge == 0
        assert cache.hits == 1
        assert cache.bytes_hashed == hashed_before
        assert m.digest == hashlib.sha512(content).digest()

    def test_empty_content_matches_standard_vector(self, model):
        cache = att.MeasurementCache()
        m, _ = cache.measure(att.SubjectKind.INPUT, "in", b"", model)
        assert m.digest == SHA512_EMPTY


class TestPlatformReportAlgebra:
    def test_gen_then_verif_holds(self, machine):
        d = Rng(1).bytes(64)
        u = Rng(2).bytes(64)
        report = att.asp_gen(machine, d, u)
        assert att.asp_verif(report, machine.machine_id, d,
                             machine.public_bytes())

    def test_get_user_data_round_trips(self, machine):
        d, u = Rng(3).bytes(64), Rng(4).bytes(64)
        assert att.asp_get_user_data(att.asp_gen(machine, d, u)) == u

    def test_verif_fails_on_different_measurement(self, machine):
        report = att.asp_gen(machine, Rng(5).bytes(64), Rng(6).bytes(64))
        assert not att.asp_verif(report, machine.machine_id,
                                 Rng(7).bytes(64), machine.public_bytes())

    def test_bit_flipped_signature_fails(self, machine):
        d = Rng(8).bytes(64)
        r = att.asp_gen(machine, d, Rng(9).bytes(64))
        bad = att.PlatformReport(r.machine_id, r.monitor_measurement,
                                 r.user_data,
                                 bytes([r.signature[0] ^ 1]) + r.signature[1:])
        assert not att.asp_verif(bad, machine.machine_id, d,
                                 machine.public_bytes())

    def test_plain_vm_cannot_produce_valid_report(self, machine):
        # A profile without the machine key can only forge the signature.
        d = Rng(10).bytes(64)
        forged = att.PlatformReport(machine.machine_id, d, bytes(64),
                                    Rng(11).bytes(64))
        assert not att.asp_verif(forged, machine.machine_id, d,
                                 machine.public_bytes())

    def test_algebra_over_random_triples(self):
        rng = Rng(12)
        for _ in range(50):
            machine = att.MachineKey.generate(rng)
            d, u = rng.bytes(64), rng.bytes(64)
            report = att.asp_gen(machine, d, u)
            assert att.asp_verif(report, machine.machine_id, d,
                                 machine.public_bytes())
            assert att.asp_get_user_data(report) == u

    def test_cert_round_trip(self, machine):
        cert = machine.export_cert()
        assert att.load_cert(cert) == machine.public_bytes()
        assert cert.strip() == machine.public_bytes().hex()


def build_chain_link(zygote=b"Z" * 100, function=b"F" * 40,
                     inp=b"in", out=b"out", zid="z", fid="f"):
    return att.InvocationMeasurements(zid, zygote, fid, function, inp, out)


class TestBuildReport:
    def setup_method(self):
        self.model = CostModel()
        self.machine = att.MachineKey.generate(Rng(20))
        self.signer = SigningKey.generate(Rng(21))
        self.platform = att.asp_gen(self.machine, att.sha512(b"monitor"),
                                    att.sha512(b"cfg"))
        self.nonce = Rng(22).bytes(16)

    def test_warm_path_hashes_only_mutables(self):
        cache = att.MeasurementCache()
        link = build_chain_link()
        att.build_report(cache, self.nonce, [link], self.platform,
                         self.signer, self.model)
        hashed_before = cache.bytes_hashed
        report, _ = att.build_report(cache, self.nonce, [link], self.platform,
                                     self.signer, self.model)
        assert cache.bytes_hashed - hashed_before == len(link.input_bytes) + \
            len(link.output_bytes)
        assert len(report.chain_entries) == 1

    def test_cold_path_dominated_by_zygote_hash(self):
        cache = att.MeasurementCache()
        link = build_chain_link(zygote=bytes(60 * MIB))
        _, charge = att.build_report(cache, self.nonce, [link], self.platform,
                                     self.signer, self.model)
        assert charge == pytest.approx(self.model.hash_us(60 * MIB), rel=0.01)

    def test_three_link_chain_single_signature(self):
        cache = att.MeasurementCache()
        links = [build_chain_link(inp=b"a", out=b"b", fid="f1"),
                 build_chain_link(inp=b"b", out=b"c", fid="f2"),
                 build_chain_link(inp=b"c", out=b"d", fid="f3")]
        report, _ = att.build_report(cache, self.nonce, links, self.platform,
                                     self.signer, self.model)
        assert len(report.chain_entries) == 3
        assert report.signature  # one signature over the whole composition

    def test_missing_signer_is_no_policy_key(self):
        with pytest.raises(NoPolicyKey):
            att.build_report(att.MeasurementCache(), self.nonce,
                             [build_chain_link()], self.platform, None,
                             self.model)

    def test_serialization_round_trip(self):
        cache = att.MeasurementCache()
        report, _ = att.build_report(cache, self.nonce, [build_chain_link()],
                                     self.platform, self.signer, self.model)
        parsed = att.AttestationReport.from_bytes(report.to_bytes())
        assert parsed == report
        assert "chain_entries" in report.to_json()

    def test_determinism(self):
        def build():
            cache = att.MeasurementCache()
            report, _ = att.build_report(cache, self.nonce,
                                         [build_chain_link()], self.platform,
                                         self.signer, self.model)
            return report.to_bytes()

        assert build() == build()


class TestVerifyReport:
    def setup_method(self):
        self.model = CostModel()
        self.machine = att.MachineKey.generate(Rng(30))
        self.signer = SigningKey.generate(Rng(31))
        self.monitor_digest = att.sha512(b"monitor-config")
        self.platform = att.asp_gen(self.machine, self.monitor_digest,
                                    att.sha512(b"boot"))
        self.nonce = Rng(32).bytes(16)
        self.link = build_chain_link()
        cache = att.MeasurementCache()
        self.report, _ = att.build_report(cache, self.nonce, [self.link],
                                          self.platform, self.signer,
                                          self.model)

    def expectations(self, **overrides):
        fields = dict(
            machine_id=self.machine.machine_id,
            vendor_public=self.machine.public_bytes(),
            monitor_digest=self.monitor_digest,
            allowed_zygote_digests=frozenset([att.sha512(self.link.zygote_content)]),
            allowed_function_digests=frozenset([att.sha512(self.link.function_content)]),
            nonce=self.nonce,
            input_digest=att.sha512(self.link.input_bytes),
            function_verify_public=self.signer.public_bytes(),
        )
        fields.update(overrides)
        return att.VerifyExpectations(**fields)

    def test_genuine_report_verifies(self):
        assert att.verify_report(self.report, self.expectations())

    def test_swapped_input_detected(self):
        bad = self.expectations(input_digest=att.sha512(b"other input"))
        assert not att.verify_report(self.report, bad)

    def test_unexpected_function_digest_detected(self):
        bad = self.expectations(
            allowed_function_digests=frozenset([att.sha512(b"niceware")]))
        assert not att.verify_report(self.report, bad)

    def test_unexpected_zygote_digest_detected(self):
        bad = self.expectations(
            allowed_zygote_digests=frozenset([att.sha512(b"other zygote")]))
        assert not att.verify_report(self.report, bad)

    def test_nonce_mismatch_detected(self):
        bad = self.expectations(nonce=Rng(33).bytes(16))
        assert not att.verify_report(self.report, bad)

    def test_tampered_output_digest_detected(self):
        entry = self.report.chain_entries[0]
        forged_entry = att.ChainEntry(entry.zygote_digest,
                                      entry.function_digest,
                                      entry.input_digest,
                                      att.sha512(b"forged output"))
        forged = att.AttestationReport(self.report.platform, self.report.nonce,
                                       (forged_entry,), self.report.signature)
        assert not att.verify_report(forged, self.expectations())

    def test_chain_linkage_enforced(self):
        cache = att.MeasurementCache()
        links = [build_chain_link(inp=b"a", out=b"b"),
                 build_chain_link(inp=b"NOT-b", out=b"c")]
        report, _ = att.build_report(cache, self.nonce, links, self.platform,
                                     self.signer, self.model)
        exp = self.expectations(input_digest=att.sha512(b"a"))
        assert not att.verify_report(report, exp)
