import pytest
from hypothesis import given, strategies as st

from pasco.crypto import (
    PRG_MAX_OUT,
    SecretBytes,
    SigningKeyPair,
    aead_decrypt,
    aead_encrypt,
    constant_time_eq,
    kdf,
    mac,
    mac_verify,
    prg,
    public_key_fingerprint,
    random_bytes,
    verify,
    xor_mask,
)
from pasco.errors import AuthenticationFailure, InvalidArgument, InvalidKey

KEY = SecretBytes(b"\x07" * 32)


class TestSecretBytes:
    def test_reveal_round_trip(self):
        s = SecretBytes(b"abc")
        assert s.reveal() == b"abc"
        assert len(s) == 3

    def test_repr_hides_value(self):
        s = SecretBytes(b"hunter2hunter2")
        assert "hunter2" not in repr(s)
        assert "hunter2" not in str(s)

    def test_wipe_zeroizes(self):
        s = SecretBytes(b"abc")
        s.wipe()
        assert s.reveal() == b"\x00\x00\x00"

    def test_equality_by_value(self):
        assert SecretBytes(b"xy") == SecretBytes(b"xy")
        assert SecretBytes(b"xy") != SecretBytes(b"xz")

    def test_not_hashable(self):
        with pytest.raises(TypeError):
            hash(SecretBytes(b"xy"))

    @pytest.mark.parametrize("bad", [b"", b"\x00" * 4097, "text", 7, None])
    def test_rejects_bad_values(self, bad):
        with pytest.raises(InvalidArgument):
            SecretBytes(bad)


class TestKeyedStream:
    def test_prg_deterministic(self):
        assert prg(KEY, b"ctx", 64) == prg(KEY, b"ctx", 64)

    def test_prg_extends_prefix(self):
        # Counter mode: a longer read of the same (key, context) starts with
        # the shorter one, which is what makes retry-with-larger-n stable.
        assert prg(KEY, b"ctx", 128)[:64] == prg(KEY, b"ctx", 64)

    def test_prg_context_separates(self):
        assert prg(KEY, b"a", 32) != prg(KEY, b"b", 32)

    def test_prg_key_separates(self):
        assert prg(KEY, b"a", 32) != prg(SecretBytes(b"\x08" * 32), b"a", 32)

    @pytest.mark.parametrize("n", [0, -1, PRG_MAX_OUT + 1, "32"])
    def test_prg_length_bounds(self, n):
        with pytest.raises(InvalidArgument):
            prg(KEY, b"ctx", n)

    def test_kdf_label_separates(self):
        assert kdf(KEY, "enc") != kdf(KEY, "mac")

    def test_kdf_disjoint_from_prg(self):
        assert kdf(KEY, "x").reveal() != prg(KEY, b"x", 32)

    def test_kdf_rejects_empty_label(self):
        with pytest.raises(InvalidArgument):
            kdf(KEY, "")

    def test_mac_verify(self):
        tag = mac(KEY, b"msg")
        assert len(tag) == 32
        assert mac_verify(KEY, b"msg", tag)
        assert not mac_verify(KEY, b"msh", tag)
        assert not mac_verify(KEY, b"msg", tag[:-1] + b"\x00")

    @given(st.binary(min_size=1, max_size=64), st.binary(max_size=256))
    def test_mac_deterministic_property(self, key, message):
        k = SecretBytes(key)
        assert mac(k, message) == mac(k, message)


class TestXorAndRandom:
    @given(st.binary(min_size=1, max_size=512))
    def test_xor_involution(self, data):
        pad = prg(KEY, b"pad", len(data))
        assert xor_mask(xor_mask(data, pad), pad) == data

    def test_xor_length_mismatch(self):
        with pytest.raises(InvalidArgument):
            xor_mask(b"ab", b"abc")

    def test_random_bytes_all_distinct(self):
        draws = {random_bytes(16) for _ in range(64)}
        assert len(draws) == 64

    @pytest.mark.parametrize("n", [0, -5, 4097])
    def test_random_bytes_bounds(self, n):
        with pytest.raises(InvalidArgument):
            random_bytes(n)

    def test_constant_time_eq(self):
        assert constant_time_eq(b"same", b"same")
        assert not constant_time_eq(b"same", b"sane")


class TestAead:
    def test_round_trip(self):
        blob = aead_encrypt(KEY, b"payload", b"aad")
        assert aead_decrypt(KEY, blob, b"aad") == b"payload"

    def test_nonce_randomized(self):
        assert aead_encrypt(KEY, b"payload", b"aad") != aead_encrypt(KEY, b"payload", b"aad")

    def test_tamper_detected(self):
        blob = bytearray(aead_encrypt(KEY, b"payload", b"aad"))
        blob[-1] ^= 1
        with pytest.raises(AuthenticationFailure):
            aead_decrypt(KEY, bytes(blob), b"aad")

    def test_aad_binds(self):
        blob = aead_encrypt(KEY, b"payload", b"aad")
        with pytest.raises(AuthenticationFailure):
            aead_decrypt(KEY, blob, b"other")

    def test_wrong_key_fails(self):
        blob = aead_encrypt(KEY, b"payload", b"aad")
        with pytest.raises(AuthenticationFailure):
            aead_decrypt(SecretBytes(b"\x08" * 32), blob, b"aad")

    def test_key_length_enforced(self):
        with pytest.raises(InvalidArgument):
            aead_encrypt(SecretBytes(b"short"), b"x", b"")


class TestSigning:
    def test_sign_verify(self):
        kp = SigningKeyPair.generate()
        sig = kp.sign(b"message")
        assert verify(kp.public_bytes, b"message", sig)
        assert not verify(kp.public_bytes, b"other", sig)

    def test_from_seed_deterministic(self):
        seed = b"\x21" * 32
        a = SigningKeyPair.from_seed(seed)
        b = SigningKeyPair.from_seed(seed)
        assert a.public_bytes == b.public_bytes
        assert verify(b.public_bytes, b"m", a.sign(b"m"))

    def test_fingerprint_stable_and_sized(self):
        kp = SigningKeyPair.generate()
        assert kp.fingerprint == public_key_fingerprint(kp.public_bytes)
        assert len(kp.fingerprint) == 32

    def test_malformed_public_key(self):
        with pytest.raises(InvalidKey):
            verify(b"\x00" * 5, b"m", b"\x00" * 64)
