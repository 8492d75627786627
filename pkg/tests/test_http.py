import base64
import json

import pytest

from pasco.accounts import encode_account_id
from pasco.crypto import SigningKeyPair
from pasco.errors import (
    AuthenticationFailure,
    InvalidArgument,
    NotFound,
    TransportError,
    Unauthorized,
)
from pasco.sss.httpd import serve_background
from pasco.sss.service import SssService
from pasco.client.transport import HttpTransport, LocalTransport, fetch_server_key
from pasco.wire import (
    HDR_FINGERPRINT,
    HDR_NONCE,
    HDR_RESPONSE_SIG,
    HDR_SIGNATURE,
    HDR_TIMESTAMP,
    MAX_CLOCK_SKEW,
    NonceCache,
    parse_auth_headers,
    raise_for_error,
    sign_request,
    sign_response,
    signed_call,
    verify_request,
    verify_response,
)

KP = SigningKeyPair.from_seed(b"\x51" * 32)


class TestRequestAuth:
    def test_round_trip(self):
        headers = sign_request(KP, "GET", "/v1/otp", b"", now=1000)
        auth = parse_auth_headers(headers)
        verify_request(KP.public_bytes, "GET", "/v1/otp", b"", auth, now=1000)

    def test_header_lookup_case_insensitive(self):
        headers = sign_request(KP, "GET", "/x", b"", now=1000)
        lowered = {k.lower(): v for k, v in headers.items()}
        auth = parse_auth_headers(lowered)
        verify_request(KP.public_bytes, "GET", "/x", b"", auth, now=1000)

    @pytest.mark.parametrize("drop", [HDR_FINGERPRINT, HDR_NONCE, HDR_TIMESTAMP, HDR_SIGNATURE])
    def test_missing_header_rejected(self, drop):
        headers = sign_request(KP, "GET", "/x", b"", now=1000)
        del headers[drop]
        with pytest.raises(Unauthorized):
            parse_auth_headers(headers)

    @pytest.mark.parametrize(
        "method,path,body",
        [("POST", "/v1/otp", b""), ("GET", "/v1/pad", b""), ("GET", "/v1/otp", b"x")],
    )
    def test_any_component_change_breaks_signature(self, method, path, body):
        headers = sign_request(KP, "GET", "/v1/otp", b"", now=1000)
        auth = parse_auth_headers(headers)
        with pytest.raises(Unauthorized):
            verify_request(KP.public_bytes, method, path, body, auth, now=1000)

    def test_wrong_key_rejected(self):
        headers = sign_request(KP, "GET", "/x", b"", now=1000)
        auth = parse_auth_headers(headers)
        other = SigningKeyPair.from_seed(b"\x52" * 32)
        with pytest.raises(Unauthorized):
            verify_request(other.public_bytes, "GET", "/x", b"", auth, now=1000)

    def test_skew_window(self):
        headers = sign_request(KP, "GET", "/x", b"", now=1000)
        auth = parse_auth_headers(headers)
        verify_request(KP.public_bytes, "GET", "/x", b"", auth, now=1000 + MAX_CLOCK_SKEW)
        for bad in (1000 + MAX_CLOCK_SKEW + 1, 1000 - MAX_CLOCK_SKEW - 1):
            with pytest.raises(Unauthorized):
                verify_request(KP.public_bytes, "GET", "/x", b"", auth, now=bad)

    def test_nonce_cache_refuses_replay(self):
        cache = NonceCache()
        cache.check_and_store("abc", now=1000)
        with pytest.raises(Unauthorized):
            cache.check_and_store("abc", now=1001)
        # but the same nonce is fine again once its ttl has lapsed
        cache.check_and_store("abc", now=1000 + 301)


class TestResponseAuth:
    def test_round_trip(self):
        sig = sign_response(KP, 200, b"body", "nonce")
        verify_response(KP.public_bytes, 200, b"body", "nonce", sig)

    @pytest.mark.parametrize(
        "status,body,nonce",
        [(201, b"body", "nonce"), (200, b"tampered", "nonce"), (200, b"body", "other")],
    )
    def test_binding(self, status, body, nonce):
        sig = sign_response(KP, 200, b"body", "nonce")
        with pytest.raises(AuthenticationFailure):
            verify_response(KP.public_bytes, status, body, nonce, sig)

    def test_malformed_signature(self):
        with pytest.raises(AuthenticationFailure):
            verify_response(KP.public_bytes, 200, b"", "n", "!!not-base64!!")


class TestErrorMapping:
    def test_typed_error_round_trip(self):
        with pytest.raises(NotFound):
            raise_for_error(404, json.dumps({"code": "not-found", "message": "x"}).encode())

    def test_unreadable_error_body(self):
        with pytest.raises(TransportError):
            raise_for_error(500, b"<html>oops</html>")

    def test_success_is_silent(self):
        raise_for_error(200, b"{}")


class TestHandleApi:
    def test_server_key_route_is_open(self, service):
        status, _, body = service.handle_api("GET", "/v1/server-key", {}, b"")
        assert status == 200
        assert base64.b64decode(json.loads(body)["public_key"]) == service.public_key

    def test_unsigned_request_rejected(self, service):
        status, _, body = service.handle_api("GET", "/v1/otp", {}, b"")
        assert status == 401

    def test_unknown_key_rejected(self, service):
        headers = sign_request(KP, "GET", "/v1/otp", b"", now=service._clock())
        status, _, _ = service.handle_api("GET", "/v1/otp", headers, b"")
        assert status == 401

    def test_replay_rejected(self, service):
        doc = {"public_key": base64.b64encode(KP.public_bytes).decode()}
        body = json.dumps(doc).encode()
        headers = sign_request(KP, "POST", "/v1/accounts", body, now=service._clock())
        status, _, _ = service.handle_api("POST", "/v1/accounts", headers, body)
        assert status == 200
        status, _, out = service.handle_api("POST", "/v1/accounts", headers, body)
        assert status == 401
        assert json.loads(out)["code"] == "unauthorized"

    def test_proof_of_possession_required(self, service):
        # Registration body carries one key but the request is signed by
        # another: the signer does not own the enclosed key, so no account.
        other = SigningKeyPair.from_seed(b"\x53" * 32)
        doc = {"public_key": base64.b64encode(other.public_bytes).decode()}
        body = json.dumps(doc).encode()
        headers = sign_request(KP, "POST", "/v1/accounts", body, now=service._clock())
        status, _, _ = service.handle_api("POST", "/v1/accounts", headers, body)
        assert status == 401

    def test_all_responses_signed_even_errors(self, service):
        status, headers, body = service.handle_api("GET", "/v1/otp", {HDR_NONCE: "n0"}, b"")
        assert status == 401
        verify_response(service.public_key, status, body, "n0", headers[HDR_RESPONSE_SIG])

    def test_unknown_route_404(self, service):
        doc = {"public_key": base64.b64encode(KP.public_bytes).decode()}
        body = json.dumps(doc).encode()
        headers = sign_request(KP, "POST", "/v1/accounts", body, now=service._clock())
        assert service.handle_api("POST", "/v1/accounts", headers, body)[0] == 200
        headers = sign_request(KP, "GET", "/v1/nothing", b"", now=service._clock())
        status, _, _ = service.handle_api("GET", "/v1/nothing", headers, b"")
        assert status == 404


class TestSignedCall:
    def test_happy_path(self, service, transport):
        doc = {"public_key": base64.b64encode(KP.public_bytes).decode()}
        answer = signed_call(
            transport.request, KP, "POST", "/v1/accounts", doc,
            pinned_key=service.public_key,
        )
        assert "account_id" in answer

    def test_missing_response_signature_rejected(self, service):
        def stripped(method, path, headers, body):
            status, resp_headers, resp_body = service.handle_api(method, path, headers, body)
            resp_headers.pop(HDR_RESPONSE_SIG, None)
            return status, resp_headers, resp_body

        doc = {"public_key": base64.b64encode(KP.public_bytes).decode()}
        with pytest.raises(AuthenticationFailure):
            signed_call(stripped, KP, "POST", "/v1/accounts", doc, pinned_key=service.public_key)

    def test_tampered_response_rejected(self, service):
        def corrupting(method, path, headers, body):
            status, resp_headers, resp_body = service.handle_api(method, path, headers, body)
            return status, resp_headers, resp_body + b" "

        doc = {"public_key": base64.b64encode(KP.public_bytes).decode()}
        with pytest.raises(AuthenticationFailure):
            signed_call(
                corrupting, KP, "POST", "/v1/accounts", doc, pinned_key=service.public_key
            )

    def test_wire_error_becomes_typed_exception(self, service, transport):
        doc = {"public_key": base64.b64encode(KP.public_bytes).decode()}
        signed_call(transport.request, KP, "POST", "/v1/accounts", doc,
                    pinned_key=service.public_key)
        absent = encode_account_id(b"\x00" * 32)
        with pytest.raises(NotFound):
            signed_call(transport.request, KP, "GET", f"/v1/records/{absent}",
                        pinned_key=service.public_key)


class TestHttpServer:
    def test_round_trip_over_tcp(self, tmp_path):
        service = SssService()
        server = serve_background(service)
        try:
            transport = HttpTransport(server.url)
            transport.pinned_key = fetch_server_key(transport)
            assert transport.pinned_key == service.public_key
            doc = {"public_key": base64.b64encode(KP.public_bytes).decode()}
            answer = signed_call(transport.request, KP, "POST", "/v1/accounts", doc,
                                 pinned_key=transport.pinned_key)
            assert "account_id" in answer
            transport.close()
        finally:
            server.stop()

    def test_connection_refused_is_transport_error(self):
        transport = HttpTransport("http://127.0.0.1:9", timeout=0.2)
        with pytest.raises(TransportError):
            transport.request("GET", "/v1/server-key", {}, b"")
        transport.close()

    def test_local_transport_url_is_canonical(self, service):
        t = LocalTransport(service, "HTTP://One.SSS.Example:80/")
        assert t.url == "http://one.sss.example"
