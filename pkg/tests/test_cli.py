import io
import json
import os
import stat

import pytest

from pasco.client.cli import main
from pasco.sss.httpd import serve_background
from pasco.sss.service import SssService


@pytest.fixture(autouse=True)
def clean_env(monkeypatch, tmp_path):
    monkeypatch.setenv("PASCO_CONFIG", str(tmp_path / "no-such-config.json"))
    monkeypatch.delenv("PASCO_SSS_URL", raising=False)
    monkeypatch.delenv("PASCO_PROFILE_PATH", raising=False)


@pytest.fixture
def http_one():
    service = SssService()
    server = serve_background(service)
    yield service, server
    server.stop()


@pytest.fixture
def http_two():
    service = SssService()
    server = serve_background(service)
    yield service, server
    server.stop()


@pytest.fixture
def ready(http_one, tmp_path):
    """Profile already set up against one live endpoint."""
    _, server = http_one
    profile = str(tmp_path / "profile")
    assert main(["--profile", profile, "--sss", server.url, "setup"]) == 0
    return profile, server


def run(capsys, argv):
    code = main(argv)
    captured = capsys.readouterr()
    return code, captured.out, captured.err


class TestSetup:
    def test_creates_profile(self, http_one, tmp_path, capsys):
        _, server = http_one
        profile = str(tmp_path / "profile")
        code, out, err = run(capsys, ["--profile", profile, "--sss", server.url, "setup"])
        assert code == 0
        assert os.path.exists(profile)
        assert "profile created" in err
        assert out == ""

    def test_second_setup_conflicts(self, ready, capsys):
        profile, server = ready
        code, _, err = run(capsys, ["--profile", profile, "--sss", server.url, "setup"])
        assert code == 1 and "error" in err

    def test_no_endpoints_configured(self, tmp_path, capsys):
        code, _, err = run(capsys, ["--profile", str(tmp_path / "p"), "setup"])
        assert code == 1 and "no endpoints" in err

    def test_env_endpoint_and_profile(self, http_one, tmp_path, monkeypatch, capsys):
        _, server = http_one
        profile = str(tmp_path / "env-profile")
        monkeypatch.setenv("PASCO_SSS_URL", server.url)
        monkeypatch.setenv("PASCO_PROFILE_PATH", profile)
        code, _, _ = run(capsys, ["setup"])
        assert code == 0 and os.path.exists(profile)

    def test_config_file_resolution(self, http_one, tmp_path, capsys):
        _, server = http_one
        profile = str(tmp_path / "cfg-profile")
        config = tmp_path / "config.json"
        config.write_text(json.dumps({
            "sss": [{"url": server.url}],
            "profile_path": profile,
        }))
        code, _, _ = run(capsys, ["--config", str(config), "setup"])
        assert code == 0 and os.path.exists(profile)
        code, out, _ = run(capsys, ["--config", str(config), "add",
                                    "https://site.example", "u@example.org", "--show"])
        assert code == 0 and out.strip()


class TestPasswords:
    def test_add_then_get_shows_same_password(self, ready, capsys):
        profile, _ = ready
        code, out, _ = run(capsys, ["--profile", profile, "add",
                                    "https://site.example", "u@example.org", "--show"])
        assert code == 0
        password = out.strip()
        code, out, err = run(capsys, ["--profile", profile, "get",
                                      "https://site.example", "--show"])
        assert code == 0 and out.strip() == password
        assert "u@example.org" in err

    def test_clip_drop_instead_of_stdout(self, ready, tmp_path, capsys):
        profile, _ = ready
        clip = str(tmp_path / "clip")
        code, out, err = run(capsys, ["--profile", profile, "--clip", clip, "add",
                                      "https://site.example", "u@example.org"])
        assert code == 0 and out == ""
        assert "password written" in err
        mode = stat.S_IMODE(os.stat(clip).st_mode)
        assert mode == 0o600
        code, shown, _ = run(capsys, ["--profile", profile, "get",
                                      "https://site.example", "--show"])
        assert open(clip).read() == shown.strip()

    def test_get_unknown_is_exit_3(self, ready, capsys):
        profile, _ = ready
        code, _, err = run(capsys, ["--profile", profile, "get", "https://no.example"])
        assert code == 3

    def test_endpoint_down_is_exit_4(self, ready, capsys):
        profile, server = ready
        server.stop()
        code, _, _ = run(capsys, ["--profile", profile, "get", "https://x.example"])
        assert code == 4

    def test_change_rotates(self, ready, capsys):
        profile, _ = ready
        _, out, _ = run(capsys, ["--profile", profile, "add",
                                 "https://site.example", "u", "--show"])
        old = out.strip()
        code, out, _ = run(capsys, ["--profile", profile, "change",
                                    "https://site.example", "--show"])
        assert code == 0 and out.strip() != old

    def test_remove_then_get(self, ready, capsys):
        profile, _ = ready
        run(capsys, ["--profile", profile, "add", "https://site.example", "u", "--show"])
        code, _, _ = run(capsys, ["--profile", profile, "remove", "https://site.example"])
        assert code == 0
        code, _, _ = run(capsys, ["--profile", profile, "get", "https://site.example"])
        assert code == 3

    def test_policy_flags(self, ready, capsys):
        profile, _ = ready
        code, out, _ = run(capsys, [
            "--profile", profile, "add", "https://digits.example", "u", "--show",
            "--min-length", "20", "--max-length", "20",
            "--classes", "digit", "--require", "digit=1",
        ])
        assert code == 0
        password = out.strip()
        assert len(password) == 20 and password.isdigit()

    def test_policy_json(self, ready, capsys):
        profile, _ = ready
        policy = json.dumps({"min_length": 12, "max_length": 12, "classes": ["lower"]})
        code, out, _ = run(capsys, ["--profile", profile, "add",
                                    "https://lower.example", "u", "--show",
                                    "--policy", policy])
        assert code == 0
        password = out.strip()
        assert len(password) == 12 and password.isalpha() and password.islower()

    def test_bad_require_flag(self, ready, capsys):
        profile, _ = ready
        code, _, err = run(capsys, ["--profile", profile, "add", "https://x.example",
                                    "u", "--require", "vowels=2"])
        assert code == 1 and "require" in err


class TestEnrollment:
    def test_export_then_enroll_stdin(self, ready, tmp_path, capsys, monkeypatch):
        profile, _ = ready
        _, out, _ = run(capsys, ["--profile", profile, "add",
                                 "https://site.example", "u", "--show"])
        code, payload, _ = run(capsys, ["--profile", profile, "export"])
        assert code == 0 and payload.strip()
        second = str(tmp_path / "second-profile")
        monkeypatch.setattr("sys.stdin", io.StringIO(payload.strip()))
        code, _, err = run(capsys, ["--profile", second, "enroll"])
        assert code == 0 and "enrolled" in err
        code, out2, _ = run(capsys, ["--profile", second, "get",
                                     "https://site.example", "--show"])
        assert code == 0 and out2.strip() == out.strip()

    def test_enroll_bad_payload(self, tmp_path, capsys):
        code, _, err = run(capsys, ["--profile", str(tmp_path / "p"),
                                    "enroll", "garbage"])
        assert code == 1 and "error" in err


class TestBackupCommands:
    def test_create_restore_revoke(self, ready, tmp_path, capsys):
        profile, server = ready
        _, out, _ = run(capsys, ["--profile", profile, "add",
                                 "https://site.example", "u", "--show"])
        password = out.strip()
        device = str(tmp_path / "bd")
        code, _, err = run(capsys, ["--profile", profile, "backup", "create",
                                    "--device", device, "--label", "drawer",
                                    "--role", "restore", "--pin", "135790"])
        assert code == 0 and "provisioned" in err

        restored = str(tmp_path / "restored-profile")
        code, _, err = run(capsys, ["--profile", restored, "--sss", server.url,
                                    "backup", "restore", "--device", device,
                                    "--pin", "135790"])
        assert code == 0 and "registered" in err
        code, out, _ = run(capsys, ["--profile", restored, "get",
                                    "https://site.example", "--show"])
        assert code == 0 and out.strip() == password

        code, _, err = run(capsys, ["--profile", profile, "backup", "revoke",
                                    "--label", "drawer"])
        assert code == 0 and "revoked" in err
        blocked = str(tmp_path / "blocked-profile")
        code, _, _ = run(capsys, ["--profile", blocked, "--sss", server.url,
                                  "backup", "restore", "--device", device,
                                  "--pin", "135790"])
        assert code == 2

    def test_wrong_pin_is_exit_2(self, ready, tmp_path, capsys):
        profile, server = ready
        device = str(tmp_path / "bd")
        run(capsys, ["--profile", profile, "backup", "create", "--device", device,
                     "--label", "drawer", "--role", "restore", "--pin", "135790"])
        code, _, err = run(capsys, ["--profile", str(tmp_path / "p2"),
                                    "--sss", server.url, "backup", "restore",
                                    "--device", device, "--pin", "000000"])
        assert code == 2 and "attempts left" in err

    def test_emergency_flow_with_acl_update(self, ready, tmp_path, capsys):
        profile, server = ready
        _, out, _ = run(capsys, ["--profile", profile, "add",
                                 "https://mail.example", "m@example.org", "--show"])
        mail = out.strip()
        run(capsys, ["--profile", profile, "add", "https://bank.example", "b", "--show"])
        device = str(tmp_path / "bd")
        code, _, _ = run(capsys, ["--profile", profile, "backup", "create",
                                  "--device", device, "--label", "wallet",
                                  "--role", "emergency", "--pin", "246802",
                                  "--allow", "https://mail.example"])
        assert code == 0

        code, out, _ = run(capsys, ["--sss", server.url, "emergency",
                                    "https://mail.example", "--device", device,
                                    "--pin", "246802", "--show"])
        assert code == 0 and out.strip() == mail

        code, _, _ = run(capsys, ["--sss", server.url, "emergency",
                                  "https://bank.example", "--device", device,
                                  "--pin", "246802", "--show"])
        assert code == 2  # not on the allow-list

        code, _, err = run(capsys, ["--profile", profile, "backup", "acl",
                                    "--label", "wallet",
                                    "--allow", "https://mail.example",
                                    "--allow", "https://bank.example"])
        assert code == 0 and "updated" in err
        code, _, _ = run(capsys, ["--sss", server.url, "emergency",
                                  "https://bank.example", "--device", device,
                                  "--pin", "246802", "--show"])
        assert code == 0


class TestMirroredCli:
    def test_degraded_write_then_reconcile(self, http_one, http_two, tmp_path, capsys):
        _, server1 = http_one
        service2, server2 = http_two
        profile = str(tmp_path / "profile")
        code, _, _ = run(capsys, ["--profile", profile, "--sss", server1.url,
                                  "--sss", server2.url, "setup"])
        assert code == 0

        port = server2.server_address[1]
        server2.stop()
        code, out, err = run(capsys, ["--profile", profile, "add",
                                      "https://site.example", "u", "--show"])
        assert code == 0 and out.strip()
        assert "warning" in err and "reconcile" in err

        code, _, err = run(capsys, ["--profile", profile, "reconcile"])
        assert code == 0 and "nothing pending" in err  # endpoint still down

        server2b = serve_background(service2, port=port)
        try:
            code, _, err = run(capsys, ["--profile", profile, "reconcile"])
            assert code == 0 and "pushed 1" in err
        finally:
            server2b.stop()
