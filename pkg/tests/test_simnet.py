"""Simulator: determinism, loss recovery, adversary scenarios, predicates."""

import time

import pytest

from certsso import crypto
from certsso.resource_server import ResourceRule
from certsso.simnet import (
    AdvAction,
    Intent,
    NetConfig,
    Scenario,
    UserSpec,
    assert_transcript,
    format_report,
    main as sim_main,
    parse_scenario,
    run_scenario,
)

ALICE = UserSpec("alice", "wonderland-pass", ("admin", "staff"))


def happy_scenario(**overrides):
    base = dict(
        seed=11,
        users=[ALICE],
        intents=[
            Intent("alice", "enroll"),
            Intent("alice", "access", server="rs1", resource="files",
                   body=b"body-of-the-request"),
        ],
        rules=[ResourceRule("files", "admin")],
        expect_frames=8,
    )
    base.update(overrides)
    return Scenario(**base)


class TestHappyPath:
    def test_eight_protocol_frames_plus_appdata(self, sim_keys):
        result = run_scenario(happy_scenario(), key_library=sim_keys)
        assert all(o.ok for o in result.outcomes)
        kinds = [e.msg_kind for e in result.transcript.frames()]
        assert kinds == ["m1", "m2", "m3", "m4", "r1", "r2", "r3", "r4",
                         "appdata", "appdata"]

    def test_session_keys_byte_identical_across_sides(self, sim_keys):
        result = run_scenario(happy_scenario(), key_library=sim_keys)
        assert len(result.sessions) == 1
        assert result.client_session_keys == [result.sessions[0].key_bytes]

    def test_predicates_pass(self, sim_keys):
        scenario = happy_scenario()
        result = run_scenario(scenario, key_library=sim_keys)
        reports = assert_transcript(result, scenario)
        assert all(r.passed for r in reports), format_report(result, scenario,
                                                             reports)

    def test_deterministic_transcript(self, sim_keys):
        a = run_scenario(happy_scenario(), key_library=sim_keys)
        b = run_scenario(happy_scenario(), key_library=sim_keys)
        assert a.transcript.to_text() == b.transcript.to_text()

    def test_different_seed_different_transcript(self, sim_keys):
        a = run_scenario(happy_scenario(), key_library=sim_keys)
        b = run_scenario(happy_scenario(seed=12), key_library=sim_keys)
        assert a.transcript.to_text() != b.transcript.to_text()

    def test_two_resource_servers_two_sessions(self, sim_keys):
        scenario = happy_scenario(
            resource_servers=2,
            intents=[
                Intent("alice", "enroll"),
                Intent("alice", "access", server="rs1", resource="files",
                       body=b"first-request"),
                Intent("alice", "access", server="rs2", resource="files",
                       body=b"second-request"),
            ],
            expect_frames=12,
        )
        result = run_scenario(scenario, key_library=sim_keys)
        assert all(o.ok for o in result.outcomes)
        assert {s.server for s in result.sessions} == {"rs1", "rs2"}
        keys = {bytes(s.key_bytes) for s in result.sessions}
        assert len(keys) == 2  # fresh session key per server


class TestFailures:
    def test_wrong_password_intent_fails(self, sim_keys):
        scenario = happy_scenario(
            intents=[Intent("alice", "enroll", password_override="wrong")],
            expect_frames=None)
        result = run_scenario(scenario, key_library=sim_keys)
        out = result.outcome_for("alice", 0)
        assert not out.ok
        assert result.home_counters["certificates_issued"] == 0
        assert any(reason == "bad-password" for _, _, reason in result.anomalies)

    def test_unknown_user_gives_up_silently(self, sim_keys):
        scenario = Scenario(
            seed=5, users=[ALICE],
            intents=[Intent("mallory", "enroll")],
            max_retries=1)
        result = run_scenario(scenario, key_library=sim_keys)
        assert not result.outcome_for("mallory", 0).ok
        assert result.home_counters["refused"].get("unknown-user", 0) >= 1

    def test_at_capacity_refusal(self, sim_keys):
        scenario = happy_scenario(max_handshakes=0, max_retries=0,
                                  intents=[Intent("alice", "enroll")],
                                  expect_frames=None)
        result = run_scenario(scenario, key_library=sim_keys)
        assert not result.outcome_for("alice", 0).ok
        assert result.home_counters["refused"].get("at-capacity", 0) >= 1

    def test_access_without_enrollment(self, sim_keys):
        scenario = Scenario(
            seed=6, users=[ALICE],
            intents=[Intent("alice", "access", server="rs1", resource="files")])
        result = run_scenario(scenario, key_library=sim_keys)
        out = result.outcome_for("alice", 0)
        assert not out.ok and out.detail == "no-credentials"


class TestLossRecovery:
    def test_lossless_has_no_duplicates(self, sim_keys):
        result = run_scenario(happy_scenario(), key_library=sim_keys)
        statuses = {e.status for e in result.transcript.entries}
        assert statuses == {"delivered"}

    def test_enrollment_survives_10pct_loss(self, sim_keys):
        completed = 0
        for seed in range(20):
            scenario = Scenario(
                seed=seed, net=NetConfig(loss=0.1), users=[ALICE],
                intents=[Intent("alice", "enroll")])
            result = run_scenario(scenario, key_library=sim_keys)
            completed += result.outcome_for("alice", 0).ok
        assert completed == 20  # analytic failure odds ~2.6e-3 per run

    def test_loss_visible_in_transcript(self, sim_keys):
        scenario = Scenario(
            seed=3, net=NetConfig(loss=0.4), users=[ALICE],
            intents=[Intent("alice", "enroll")])
        result = run_scenario(scenario, key_library=sim_keys)
        assert any(e.status == "dropped" for e in result.transcript.entries)

    def test_duplication_does_not_break_handshake(self, sim_keys):
        scenario = happy_scenario(net=NetConfig(dup=0.5), expect_frames=None)
        result = run_scenario(scenario, key_library=sim_keys)
        assert all(o.ok for o in result.outcomes)
        assert result.home_counters["certificates_issued"] == 1
        assert len(result.sessions) == 1

    def test_reorder_jitter_does_not_break_handshake(self, sim_keys):
        scenario = happy_scenario(
            net=NetConfig(delay_min=0.01, delay_max=0.05, reorder=0.04),
            expect_frames=None)
        result = run_scenario(scenario, key_library=sim_keys)
        assert all(o.ok for o in result.outcomes)

    def test_adversary_drop_recovered_by_retransmission(self, sim_keys):
        scenario = happy_scenario(
            adversary=[AdvAction("drop", msg_kind="m2", occurrence=1)],
            expect_frames=None)
        result = run_scenario(scenario, key_library=sim_keys)
        assert all(o.ok for o in result.outcomes)

    def test_lost_responses_yield_timeout_outcome_not_crash(self, sim_keys):
        # both AppData frames dropped: the access intent times out cleanly
        scenario = happy_scenario(
            adversary=[AdvAction("drop", msg_kind="appdata", occurrence=1),
                       AdvAction("drop", msg_kind="appdata", occurrence=2)],
            expect_frames=None)
        result = run_scenario(scenario, key_library=sim_keys)
        out = result.outcome_for("alice", 1)
        assert not out.ok and "timeout" in out.detail

    def test_simulated_time_is_free(self, sim_keys):
        # a scenario that simulates ~8 s of retransmissions and timeouts
        scenario = Scenario(
            seed=9, net=NetConfig(loss=1.0), users=[ALICE],
            intents=[Intent("alice", "enroll")])
        t0 = time.perf_counter()
        result = run_scenario(scenario, key_library=sim_keys)
        wall = time.perf_counter() - t0
        out = result.outcome_for("alice", 0)
        assert not out.ok and out.detail == "give-up"
        assert wall < 1.0


class TestReplay:
    def test_replayed_m3_no_extra_certificates(self, sim_keys):
        scenario = happy_scenario(
            intents=[Intent("alice", "enroll")],
            adversary=[
                AdvAction("record", msg_kind="m3", occurrence=1),
                AdvAction("replay", recording=1, at=1.5, mode="new-conn"),
                AdvAction("replay", recording=1, at=2.0, mode="same-conn"),
            ],
            expect_frames=None)
        result = run_scenario(scenario, key_library=sim_keys)
        assert result.outcome_for("alice", 0).ok
        assert result.home_counters["certificates_issued"] == 1
        injected = [e for e in result.transcript.entries if e.status == "injected"]
        assert len(injected) == 2

    def test_replayed_r3_no_extra_sessions(self, sim_keys):
        scenario = happy_scenario(
            adversary=[
                AdvAction("record", msg_kind="r3", occurrence=1),
                AdvAction("replay", recording=1, at=2.0, mode="new-conn"),
            ],
            expect_frames=None)
        result = run_scenario(scenario, key_library=sim_keys)
        assert len(result.sessions) == 1
        reports = assert_transcript(result, scenario,
                                    predicates=["single-session-per-nonce"])
        assert reports[0].passed

    def test_replayed_m1_mints_no_second_nonce_per_connection(self, sim_keys):
        scenario = happy_scenario(
            intents=[Intent("alice", "enroll")],
            adversary=[
                AdvAction("record", msg_kind="m1", occurrence=1),
                AdvAction("replay", recording=1, at=0.5, mode="same-conn"),
            ],
            expect_frames=None)
        result = run_scenario(scenario, key_library=sim_keys)
        m2_frames = {e.data for e in result.transcript.frames()
                     if e.msg_kind == "m2"}
        assert len(m2_frames) == 1  # idempotent re-answer, same stored nonce


class TestTamper:
    @pytest.mark.parametrize("kind", ["m2", "m3", "m4", "r2", "r3", "r4"])
    def test_tampered_frames_never_yield_sessions_with_wrong_identity(
        self, sim_keys, kind
    ):
        scenario = happy_scenario(max_retries=0, expect_frames=None,
                                  adversary=[AdvAction("tamper", msg_kind=kind,
                                                       occurrence=1, offset=12)])
        result = run_scenario(scenario, key_library=sim_keys)
        for session in result.sessions:
            assert session.peer_username == "alice"
            assert session.roles == ("admin", "staff")

    def test_substitute_cert_in_r3_rejected(self, sim_keys):
        scenario = happy_scenario(
            max_retries=0, expect_frames=None,
            adversary=[AdvAction("substitute-cert", msg_kind="r3", occurrence=1)])
        result = run_scenario(scenario, key_library=sim_keys)
        assert len(result.sessions) == 0
        assert any("cert-invalid" in reason for _, _, reason in result.anomalies)

    def test_substitute_cert_in_r2_rejected_by_client(self, sim_keys):
        scenario = happy_scenario(
            max_retries=0, expect_frames=None,
            adversary=[AdvAction("substitute-cert", msg_kind="r2", occurrence=1)])
        result = run_scenario(scenario, key_library=sim_keys)
        assert len(result.sessions) == 0
        out = result.outcome_for("alice", 1)
        assert not out.ok and "server-untrusted" in out.detail


class TestNegativeControl:
    def test_disabled_sealing_fails_wire_predicates(self, sim_keys):
        scenario = happy_scenario()
        crypto.set_insecure_no_seal(True)
        try:
            result = run_scenario(scenario, key_library=sim_keys)
        finally:
            crypto.set_insecure_no_seal(False)
        reports = {r.name: r for r in assert_transcript(result, scenario)}
        assert not reports["no-plaintext-password"].passed
        assert not reports["no-plaintext-session-key"].passed


SCENARIO_TEXT = """
# demo scenario
seed 21
loss 0.05
delay 10 30
retries 3
bits 1024
servers 2
user alice wonderland-pass admin,staff
rule files admin
intent alice enroll
intent alice access rs1 files hello there
intent alice access rs2 files general kenobi
adversary record m3 1
adversary replay 1 at 3.0 new-conn
"""


class TestScenarioFile:
    def test_parse_round_trip(self):
        scenario = parse_scenario(SCENARIO_TEXT)
        assert scenario.seed == 21
        assert scenario.net.loss == 0.05
        assert scenario.net.delay_min == pytest.approx(0.010)
        assert scenario.net.delay_max == pytest.approx(0.030)
        assert scenario.resource_servers == 2
        assert scenario.users == [ALICE]
        assert scenario.intents[1].body == b"hello there"
        assert scenario.adversary[1].at == 3.0

    def test_parse_error_names_line(self):
        with pytest.raises(ValueError, match="line 2"):
            parse_scenario("seed 1\nbogus directive\n")

    def test_replay_must_reference_a_recording(self):
        with pytest.raises(ValueError, match="recording"):
            parse_scenario("user a b\nintent a enroll\nadversary replay 1 at 2.0\n")

    def test_cli_run_writes_report(self, tmp_path, capsys):
        scenario_path = tmp_path / "demo.scn"
        scenario_path.write_text(SCENARIO_TEXT)
        report_path = tmp_path / "report.txt"
        rc = sim_main(["run", "--scenario", str(scenario_path),
                       "--seed", "4", "--report", str(report_path)])
        assert rc == 0
        report = report_path.read_text()
        assert "no-plaintext-password PASS" in report
        assert "single-session-per-nonce PASS" in report
        out = capsys.readouterr().out
        assert "certificates_issued" in out

    def test_cli_missing_scenario_exits_2(self, tmp_path):
        assert sim_main(["run", "--scenario", str(tmp_path / "none.scn")]) == 2
