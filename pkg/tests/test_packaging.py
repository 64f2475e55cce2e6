import json

import pytest
from hypothesis import given
from hypothesis import strategies as st

from faarm.crypto import (
    Digest,
    SignatureScheme,
    hash_data,
    keygen,
    signing_payload,
    verify,
)
from faarm.packaging import (
    FLAG_REQUIRES_LOCK,
    MAX_MANIFEST_BYTES,
    PKG_MAGIC,
    BundleError,
    Manifest,
    ManifestError,
    build_package,
    canonical_bytes,
    parse_manifest,
    read_bundle,
    write_bundle,
)

from conftest import TEST_MCU_ID, TEST_TIMESTAMP

# Frozen fixture: the reference manifest and its canonical serialization.
FIXTURE_HASH = "f1ad9a781903e0a6ca7f0197d5036ceb4d74ce173f000f3006e6cdb4bdf1d654"
FIXTURE_MANIFEST = Manifest(
    version=3,
    mcu_id="MALI-MCU-XYZ",
    timestamp="2025-10-10T12:00:00Z",
    firmware_hash=Digest.from_hex(FIXTURE_HASH),
    flags=("requires_lock",),
)
FIXTURE_CANONICAL = (
    b'{"version":3,"mcu_id":"MALI-MCU-XYZ","timestamp":"2025-10-10T12:00:00Z",'
    b'"firmware_hash":"f1ad9a781903e0a6ca7f0197d5036ceb4d74ce173f000f3006e6cdb4bdf1d654",'
    b'"flags":["requires_lock"]}'
)


def make_manifest(**overrides) -> Manifest:
    kwargs = dict(
        version=1,
        mcu_id=TEST_MCU_ID,
        timestamp=TEST_TIMESTAMP,
        firmware_hash=hash_data(b"firmware"),
        flags=(FLAG_REQUIRES_LOCK,),
    )
    kwargs.update(overrides)
    return Manifest(**kwargs)


flag_strategy = st.lists(
    st.text(
        alphabet=st.characters(whitelist_categories=("Ll", "Lu", "Nd"), whitelist_characters="_-"),
        min_size=1,
        max_size=12,
    ),
    max_size=4,
)

manifest_strategy = st.builds(
    Manifest,
    version=st.integers(min_value=1, max_value=2**63),
    mcu_id=st.text(
        alphabet=st.characters(blacklist_categories=("Cs",)), min_size=1, max_size=24
    ),
    timestamp=st.just(TEST_TIMESTAMP),
    firmware_hash=st.binary(min_size=32, max_size=32).map(Digest),
    flags=flag_strategy.map(tuple),
)


class TestCanonicalForm:
    def test_fixture_canonical_bytes_are_frozen(self):
        assert canonical_bytes(FIXTURE_MANIFEST) == FIXTURE_CANONICAL

    def test_serialization_is_stable(self):
        assert canonical_bytes(FIXTURE_MANIFEST) == canonical_bytes(FIXTURE_MANIFEST)

    def test_key_order_is_fixed(self):
        keys = list(json.loads(canonical_bytes(FIXTURE_MANIFEST)).keys())
        assert keys == ["version", "mcu_id", "timestamp", "firmware_hash", "flags"]

    def test_no_insignificant_whitespace(self):
        raw = canonical_bytes(FIXTURE_MANIFEST)
        assert b" " not in raw.replace(b"MALI-MCU-XYZ", b"")

    def test_flag_order_at_construction_is_normalized(self):
        a = make_manifest(flags=("a_flag", "b_flag"))
        b = make_manifest(flags=("b_flag", "a_flag"))
        assert canonical_bytes(a) == canonical_bytes(b)

    def test_duplicate_flags_collapse(self):
        m = make_manifest(flags=("requires_lock", "requires_lock"))
        assert m.flags == ("requires_lock",)

    @given(manifest_strategy)
    def test_parse_of_canonical_is_identity(self, manifest):
        assert parse_manifest(canonical_bytes(manifest)) == manifest

    @given(manifest_strategy, manifest_strategy)
    def test_distinct_manifests_have_distinct_bytes(self, a, b):
        if a != b:
            assert canonical_bytes(a) != canonical_bytes(b)

    def test_non_ascii_mcu_id_roundtrips(self):
        m = make_manifest(mcu_id="MCU-über-1")
        assert parse_manifest(canonical_bytes(m)) == m


class TestManifestValidation:
    def test_version_zero_rejected(self):
        with pytest.raises(ManifestError, match="version"):
            make_manifest(version=0)

    def test_negative_version_rejected(self):
        with pytest.raises(ManifestError, match="version"):
            make_manifest(version=-3)

    def test_bool_version_rejected(self):
        with pytest.raises(ManifestError, match="version"):
            make_manifest(version=True)

    def test_empty_mcu_id_rejected(self):
        with pytest.raises(ManifestError, match="mcu_id"):
            make_manifest(mcu_id="")

    def test_naive_timestamp_rejected(self):
        with pytest.raises(ManifestError, match="timestamp"):
            make_manifest(timestamp="2025-10-10T12:00:00")

    def test_non_utc_offset_rejected(self):
        with pytest.raises(ManifestError, match="timestamp"):
            make_manifest(timestamp="2025-10-10T12:00:00+02:00")

    def test_explicit_utc_offset_accepted(self):
        m = make_manifest(timestamp="2025-10-10T12:00:00+00:00")
        assert m.timestamp == "2025-10-10T12:00:00+00:00"

    def test_garbage_timestamp_rejected(self):
        with pytest.raises(ManifestError, match="timestamp"):
            make_manifest(timestamp="yesterday")

    def test_empty_flag_rejected(self):
        with pytest.raises(ManifestError, match="flags"):
            make_manifest(flags=("",))


class TestStrictParse:
    def test_unknown_key_rejected(self):
        obj = json.loads(FIXTURE_CANONICAL)
        obj["extra"] = 1
        raw = json.dumps(obj, separators=(",", ":")).encode()
        with pytest.raises(ManifestError, match="unknown keys"):
            parse_manifest(raw)

    def test_missing_key_rejected(self):
        obj = json.loads(FIXTURE_CANONICAL)
        del obj["flags"]
        raw = json.dumps(obj, separators=(",", ":")).encode()
        with pytest.raises(ManifestError, match="missing keys"):
            parse_manifest(raw)

    def test_whitespace_variant_rejected(self):
        raw = json.dumps(json.loads(FIXTURE_CANONICAL), indent=1).encode()
        with pytest.raises(ManifestError, match="canonical"):
            parse_manifest(raw)

    def test_key_reorder_rejected(self):
        obj = json.loads(FIXTURE_CANONICAL)
        reordered = {k: obj[k] for k in ("flags", "version", "mcu_id", "timestamp", "firmware_hash")}
        raw = json.dumps(reordered, separators=(",", ":")).encode()
        with pytest.raises(ManifestError, match="canonical"):
            parse_manifest(raw)

    def test_uppercase_hash_rejected(self):
        raw = FIXTURE_CANONICAL.replace(b"f1ad", b"F1AD")
        with pytest.raises(ManifestError):
            parse_manifest(raw)

    def test_quoted_version_rejected(self):
        raw = FIXTURE_CANONICAL.replace(b'"version":3', b'"version":"3"')
        with pytest.raises(ManifestError, match="version"):
            parse_manifest(raw)

    def test_float_version_rejected(self):
        raw = FIXTURE_CANONICAL.replace(b'"version":3', b'"version":3.0')
        with pytest.raises(ManifestError):
            parse_manifest(raw)

    def test_short_hash_rejected(self):
        obj = json.loads(FIXTURE_CANONICAL)
        obj["firmware_hash"] = obj["firmware_hash"][:62]
        raw = json.dumps(obj, separators=(",", ":")).encode()
        with pytest.raises(ManifestError, match="firmware_hash"):
            parse_manifest(raw)

    def test_non_object_rejected(self):
        with pytest.raises(ManifestError):
            parse_manifest(b"[1,2,3]")

    def test_truncated_json_rejected(self):
        with pytest.raises(ManifestError, match="JSON"):
            parse_manifest(FIXTURE_CANONICAL[:-2])

    def test_non_utf8_rejected(self):
        with pytest.raises(ManifestError, match="JSON"):
            parse_manifest(b"\xff\xfe" + FIXTURE_CANONICAL)

    def test_oversized_manifest_rejected(self):
        with pytest.raises(ManifestError, match="exceeds"):
            parse_manifest(b" " * (MAX_MANIFEST_BYTES + 1))

    def test_unsorted_flags_rejected(self):
        raw = FIXTURE_CANONICAL.replace(
            b'["requires_lock"]', b'["requires_lock","a_flag"]'
        )
        with pytest.raises(ManifestError, match="canonical"):
            parse_manifest(raw)

    def test_duplicate_flags_in_raw_rejected(self):
        raw = FIXTURE_CANONICAL.replace(
            b'["requires_lock"]', b'["requires_lock","requires_lock"]'
        )
        with pytest.raises(ManifestError, match="canonical"):
            parse_manifest(raw)


class TestBuildPackage:
    def test_manifest_hash_is_firmware_hash(self, ed25519_key):
        fw = b"\x01\x02" * 100
        pkg = build_package(
            fw, version=2, mcu_id=TEST_MCU_ID, key=ed25519_key, timestamp=TEST_TIMESTAMP
        )
        assert pkg.manifest.firmware_hash == hash_data(fw)
        assert pkg.manifest.version == 2
        assert pkg.manifest.mcu_id == TEST_MCU_ID
        assert pkg.manifest.flags == (FLAG_REQUIRES_LOCK,)

    def test_signature_verifies_over_digest_and_manifest(self, ed25519_key):
        fw = b"firmware image"
        pkg = build_package(
            fw, version=1, mcu_id=TEST_MCU_ID, key=ed25519_key, timestamp=TEST_TIMESTAMP
        )
        payload = signing_payload(hash_data(fw), canonical_bytes(pkg.manifest))
        assert verify(ed25519_key.public, payload, pkg.signature)

    def test_version_zero_refused(self, ed25519_key):
        with pytest.raises(ManifestError, match="version"):
            build_package(
                b"fw", version=0, mcu_id=TEST_MCU_ID, key=ed25519_key,
                timestamp=TEST_TIMESTAMP,
            )

    def test_default_timestamp_is_utc_rfc3339(self, ed25519_key):
        pkg = build_package(b"fw", version=1, mcu_id=TEST_MCU_ID, key=ed25519_key)
        assert pkg.manifest.timestamp.endswith("Z")

    @pytest.mark.parametrize(
        "scheme", [SignatureScheme.ECDSA_P256, SignatureScheme.ED25519],
        ids=lambda s: s.value,
    )
    def test_identical_inputs_build_identical_bundles(self, tmp_path, scheme):
        key = keygen(scheme, seed=99, allow_seeded=True)
        fw = bytes(range(200))
        out = []
        for name in ("a.pkg", "b.pkg"):
            pkg = build_package(
                fw, version=5, mcu_id=TEST_MCU_ID, key=key, timestamp=TEST_TIMESTAMP
            )
            path = write_bundle(pkg, tmp_path / name)
            out.append(path.read_bytes())
        assert out[0] == out[1]


class TestBundles:
    def roundtrip(self, tmp_path, ed25519_key, name):
        fw = bytes(range(256)) * 4
        pkg = build_package(
            fw, version=4, mcu_id=TEST_MCU_ID, key=ed25519_key, timestamp=TEST_TIMESTAMP
        )
        path = write_bundle(pkg, tmp_path / name)
        back = read_bundle(path)
        assert back.firmware == pkg.firmware
        assert canonical_bytes(back.manifest) == canonical_bytes(pkg.manifest)
        assert back.signature.data == pkg.signature.data
        assert back.signature.scheme is None
        return path

    def test_directory_roundtrip_bit_exact(self, tmp_path, ed25519_key):
        path = self.roundtrip(tmp_path, ed25519_key, "bundle")
        assert (path / "firmware.bin").is_file()
        assert (path / "manifest.json").is_file()
        assert (path / "firmware.sig").is_file()

    def test_container_roundtrip_bit_exact(self, tmp_path, ed25519_key):
        path = self.roundtrip(tmp_path, ed25519_key, "bundle.pkg")
        assert path.read_bytes()[:4] == PKG_MAGIC

    def test_missing_signature_file_rejected(self, tmp_path, ed25519_key):
        path = self.roundtrip(tmp_path, ed25519_key, "bundle")
        (path / "firmware.sig").unlink()
        with pytest.raises(BundleError, match="firmware.sig"):
            read_bundle(path)

    def test_wrong_size_signature_rejected(self, tmp_path, ed25519_key):
        path = self.roundtrip(tmp_path, ed25519_key, "bundle")
        (path / "firmware.sig").write_bytes(b"\x00" * 63)
        with pytest.raises(BundleError, match="64 bytes"):
            read_bundle(path)

    def test_missing_bundle_rejected(self, tmp_path):
        with pytest.raises(BundleError, match="no such bundle"):
            read_bundle(tmp_path / "nope")

    def test_bad_container_magic_rejected(self, tmp_path):
        blob = tmp_path / "evil.pkg"
        blob.write_bytes(b"NOPE" + b"\x00" * 32)
        with pytest.raises(BundleError, match="magic"):
            read_bundle(blob)

    def test_truncated_container_rejected(self, tmp_path, ed25519_key):
        path = self.roundtrip(tmp_path, ed25519_key, "bundle.pkg")
        blob = path.read_bytes()
        path.write_bytes(blob[:-10])
        with pytest.raises(BundleError, match="truncated"):
            read_bundle(path)

    def test_trailing_garbage_rejected(self, tmp_path, ed25519_key):
        path = self.roundtrip(tmp_path, ed25519_key, "bundle.pkg")
        path.write_bytes(path.read_bytes() + b"extra")
        with pytest.raises(BundleError, match="trailing"):
            read_bundle(path)

    def test_firmware_size_limit_enforced(self, tmp_path, ed25519_key):
        path = self.roundtrip(tmp_path, ed25519_key, "bundle")
        with pytest.raises(BundleError, match="exceeds"):
            read_bundle(path, max_firmware_size=16)

    def test_mutated_part_fails_verification(self, tmp_path, ed25519_key):
        # single-byte mutations on each bundle part must be caught by hash,
        # parse, or signature check (the wide fuzz run lives in acceptance)
        fw = b"\xaa" * 512
        pkg = build_package(
            fw, version=1, mcu_id=TEST_MCU_ID, key=ed25519_key, timestamp=TEST_TIMESTAMP
        )
        path = write_bundle(pkg, tmp_path / "bundle")

        fw_mut = bytearray(fw)
        fw_mut[100] ^= 0x01
        assert hash_data(bytes(fw_mut)) != pkg.manifest.firmware_hash

        manifest_raw = bytearray(canonical_bytes(pkg.manifest))
        manifest_raw[20] ^= 0x01
        try:
            mutated = parse_manifest(bytes(manifest_raw))
        except ManifestError:
            mutated = None
        if mutated is not None:
            payload = signing_payload(hash_data(fw), canonical_bytes(mutated))
            assert not verify(ed25519_key.public, payload, pkg.signature)

        sig_mut = bytearray(pkg.signature.data)
        sig_mut[10] ^= 0x01
        payload = signing_payload(hash_data(fw), canonical_bytes(pkg.manifest))
        assert not verify(ed25519_key.public, payload, bytes(sig_mut))
        assert path.is_dir()
