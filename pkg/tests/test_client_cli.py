"""`sso` CLI: exit codes, cache handling, prompting discipline."""

import os
import time

import pytest

from certsso import certificate as cm
from certsso import cli
from certsso import crypto
from certsso.home_server import HomeConfig, HomeServer
from certsso.resource_server import (
    ResourceConfig,
    ResourceRule,
    ResourceServer,
    RuleTable,
)
from certsso.rng import Rng
from certsso.userdb import UserDirectory

PASSWORD = "open sesame"


@pytest.fixture(scope="module")
def stack(kp1024, kp1024_other, tmp_path_factory):
    base = tmp_path_factory.mktemp("cli")
    anchor = base / "home.anchor"
    cm.write_trust_anchor(anchor, "home", kp1024.public)

    directory = UserDirectory()
    directory.add_user("alice", PASSWORD, ("admin",), rng=Rng("cli-db"))
    home = HomeServer(
        HomeConfig(user_db="-", server_key="-", port=0, key_bits=1024),
        directory=directory, keypair=kp1024)
    home.start()

    rs_cert = cm.issue(
        issuer_sk=kp1024.secret, issuer_id="home",
        subject=cm.SubjectInfo(username="rs1"), roles=(),
        subject_pk=kp1024_other.public, validity_seconds=86400,
        now=time.time(), rng=Rng("cli-rs"))
    rs = ResourceServer(
        ResourceConfig(credentials="-", trust_anchor="-", rules="-", port=0),
        rules=RuleTable([ResourceRule("files", "admin"),
                         ResourceRule("vault", "root")]),
        credentials=(cm.encode_certificate(rs_cert), kp1024_other.secret),
        trust=cm.trust_store_from_anchor(anchor))
    rs.start()
    yield home, rs, str(anchor), base
    rs.stop()
    home.stop()


@pytest.fixture()
def prompt_counter(monkeypatch):
    calls = []

    def fake_prompt(prompt=""):
        calls.append(prompt)
        return PASSWORD

    monkeypatch.setattr(cli, "read_password", fake_prompt)
    return calls


def addr(server):
    return f"{server.address[0]}:{server.address[1]}"


class TestSignon:
    def test_success_writes_owner_only_cache(self, stack, prompt_counter,
                                             tmp_path):
        home, _, anchor, _ = stack
        cache = tmp_path / "alice.cache"
        rc = cli.main(["signon", "--home", addr(home), "--user", "alice",
                       "--anchor", anchor, "--cache", str(cache)])
        assert rc == cli.EXIT_OK
        assert len(prompt_counter) == 1
        assert cache.exists()
        assert os.stat(cache).st_mode & 0o777 == 0o600
        cert, _, sk = cli.client.load_cache(cache)
        assert cert.subject.username == "alice"

    def test_wrong_password_exit_4_cache_untouched(self, stack, monkeypatch,
                                                   tmp_path):
        home, _, anchor, _ = stack
        monkeypatch.setattr(cli, "read_password", lambda prompt="": "nope")
        cache = tmp_path / "alice.cache"
        rc = cli.main(["signon", "--home", addr(home), "--user", "alice",
                       "--anchor", anchor, "--cache", str(cache)])
        assert rc == cli.EXIT_AUTH
        assert not cache.exists()

    def test_unreachable_server_exit_5(self, stack, prompt_counter, tmp_path):
        _, _, anchor, _ = stack
        cache = tmp_path / "x.cache"
        rc = cli.main(["signon", "--home", "127.0.0.1:1", "--user", "alice",
                       "--anchor", anchor, "--cache", str(cache)])
        assert rc == cli.EXIT_NETWORK
        assert not cache.exists()

    def test_password_never_written_to_disk(self, stack, prompt_counter,
                                            tmp_path):
        home, _, anchor, _ = stack
        cache = tmp_path / "alice.cache"
        rc = cli.main(["signon", "--home", addr(home), "--user", "alice",
                       "--anchor", anchor, "--cache", str(cache)])
        assert rc == cli.EXIT_OK
        for path in tmp_path.rglob("*"):
            if path.is_file():
                assert PASSWORD.encode() not in path.read_bytes()


class TestAccess:
    @pytest.fixture()
    def cache(self, stack, prompt_counter, tmp_path):
        home, _, anchor, _ = stack
        path = tmp_path / "alice.cache"
        assert cli.main(["signon", "--home", addr(home), "--user", "alice",
                         "--anchor", anchor, "--cache", str(path)]) == 0
        prompt_counter.clear()
        return path

    def test_permitted_prints_body_exit_0(self, stack, cache, capsys,
                                          prompt_counter):
        _, rs, anchor, _ = stack
        rc = cli.main(["access", "--server", addr(rs), "--resource", "files",
                       "--body", "hello", "--cache", str(cache),
                       "--anchor", anchor])
        assert rc == cli.EXIT_OK
        assert capsys.readouterr().out == "files:hello\n"
        assert prompt_counter == []  # sso claim: no further password prompts

    def test_denied_exit_7(self, stack, cache):
        _, rs, anchor, _ = stack
        rc = cli.main(["access", "--server", addr(rs), "--resource", "vault",
                       "--body", "x", "--cache", str(cache), "--anchor", anchor])
        assert rc == cli.EXIT_DENIED

    def test_missing_cache_exit_2(self, stack, tmp_path):
        _, rs, anchor, _ = stack
        rc = cli.main(["access", "--server", addr(rs), "--resource", "files",
                       "--cache", str(tmp_path / "nope.cache"),
                       "--anchor", anchor])
        assert rc == cli.EXIT_CONFIG

    def test_unreachable_resource_exit_5(self, stack, cache):
        _, _, anchor, _ = stack
        rc = cli.main(["access", "--server", "127.0.0.1:1", "--resource",
                       "files", "--cache", str(cache), "--anchor", anchor])
        assert rc == cli.EXIT_NETWORK


class TestExpiry:
    def test_expired_cache_exit_6_then_reenroll_succeeds(
        self, kp1024, kp1024_other, stack, prompt_counter, tmp_path
    ):
        _, rs, anchor, _ = stack
        # a home server that issues 1-second certificates
        directory = UserDirectory()
        directory.add_user("alice", PASSWORD, ("admin",), rng=Rng("exp-db"))
        short_home = HomeServer(
            HomeConfig(user_db="-", server_key="-", port=0, key_bits=1024,
                       cert_validity=1),
            directory=directory, keypair=kp1024)
        short_home.start()
        try:
            cache = tmp_path / "alice.cache"
            assert cli.main(["signon", "--home", addr(short_home),
                             "--user", "alice", "--anchor", anchor,
                             "--cache", str(cache)]) == 0
            time.sleep(1.2)
            rc = cli.main(["access", "--server", addr(rs), "--resource",
                           "files", "--cache", str(cache), "--anchor", anchor])
            assert rc == cli.EXIT_REENROLL
            # repeat the first step: fresh signon, then access succeeds
            assert cli.main(["signon", "--home", addr(short_home),
                             "--user", "alice", "--anchor", anchor,
                             "--cache", str(cache)]) == 0
            rc = cli.main(["access", "--server", addr(rs), "--resource",
                           "files", "--body", "x", "--cache", str(cache),
                           "--anchor", anchor])
            assert rc == cli.EXIT_OK
        finally:
            short_home.stop()

    def test_auto_renew_prompts_and_proceeds(self, kp1024, stack,
                                             prompt_counter, tmp_path):
        _, rs, anchor, _ = stack
        directory = UserDirectory()
        directory.add_user("alice", PASSWORD, ("admin",), rng=Rng("ar-db"))
        short_home = HomeServer(
            HomeConfig(user_db="-", server_key="-", port=0, key_bits=1024,
                       cert_validity=1),
            directory=directory, keypair=kp1024)
        short_home.start()
        try:
            cache = tmp_path / "alice.cache"
            assert cli.main(["signon", "--home", addr(short_home),
                             "--user", "alice", "--anchor", anchor,
                             "--cache", str(cache)]) == 0
            prompt_counter.clear()
            time.sleep(1.2)
            rc = cli.main(["access", "--server", addr(rs), "--resource",
                           "files", "--body", "y", "--cache", str(cache),
                           "--anchor", anchor, "--auto-renew",
                           "--home", addr(short_home), "--user", "alice"])
            assert rc == cli.EXIT_OK
            assert len(prompt_counter) == 1  # renewal re-prompts, never cached
        finally:
            short_home.stop()


class TestInspect:
    def test_inspect_shows_sorted_roles_and_validity(self, stack, tmp_path,
                                                     capsys, kp1024):
        _, _, _, _ = stack
        # craft a cache directly with out-of-order roles
        rng = Rng("inspect")
        subject_kp = crypto.gen_keypair(1024, rng)
        cert = cm.issue(
            issuer_sk=kp1024.secret, issuer_id="home",
            subject=cm.SubjectInfo(username="zoe"),
            roles=("staff", "admin"), subject_pk=subject_kp.public,
            validity_seconds=3600, now=1_700_000_000, rng=rng)
        cache = tmp_path / "zoe.cache"
        cm.write_credential_file(cache, cm.encode_certificate(cert),
                                 subject_kp.secret)
        rc = cli.main(["inspect", "--cache", str(cache)])
        out = capsys.readouterr().out
        assert rc == cli.EXIT_OK
        assert "roles:        admin,staff" in out
        assert "2023-11-14 22:13:20Z" in out  # not-before
        assert "2023-11-14 23:13:20Z" in out  # not-after = +3600 s

    def test_missing_cache_exit_2(self, tmp_path):
        assert cli.main(["inspect", "--cache", str(tmp_path / "no.cache")]) == 2

    def test_malformed_cache_exit_2(self, tmp_path):
        bad = tmp_path / "bad.cache"
        bad.write_text("not an envelope")
        assert cli.main(["inspect", "--cache", str(bad)]) == 2
