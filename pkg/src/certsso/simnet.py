"""Deterministic in-memory network simulator with an active adversary.

The simulator binds the pure state machines to a virtual lossy network: one
event loop over a priority queue of timed deliveries, a simulated clock (no
wall-clock dependence anywhere), and per-participant forked Rng streams, so
a (scenario, seed) pair always produces a byte-identical transcript.

The network applies loss / duplication / delay / reorder-jitter per frame.
The adversary sits on the wire (it reads every byte but holds no keys) and
executes a script: record frames, replay them later into fresh or existing
connections, flip bytes, drop frames, or substitute certificates (including
a full impersonation attempt: forged certificate plus a challenge signature
under the adversary's own key).

Transcript predicates check the wire-hygiene properties: plaintext passwords,
session keys or resource bodies must never appear in any frame, and no
challenge nonce may yield more than one established session.

CLI (`sso-sim`): run --scenario <file> [--seed N] [--report <path>].
Scenario files are whitespace-separated directives; see parse_scenario().
"""

from __future__ import annotations

import argparse
import heapq
import sys
from dataclasses import dataclass, field, replace

from . import certificate as cert_mod
from . import crypto
from .errors import (
    NeedMoreData,
    ProtocolError,
    ProtocolOrderError,
    Refusal,
    SsoError,
    WireError,
)
from .protocol import (
    ClientAccess,
    ClientEnroll,
    Counters,
    HomeEnv,
    HomeServerConn,
    IssuanceConfig,
    ReplayCache,
    ResourceEnv,
    ResourceServerConn,
    TimeoutPolicy,
    decode_app_response,
    encode_app_request,
)
from .resource_server import RuleTable, ResourceRule, handle_app_data
from .rng import Rng
from .userdb import UserDirectory
from .wire import (
    MSG_NAMES,
    TYPE_APP_DATA,
    WIRE_VERSIONS,
    AppData,
    AuthResponse,
    Challenge,
    ConnRequest,
    decode_msg_exact,
    encode_msg,
)

ISSUER_ID = "home"


# ---------- scenario model


@dataclass(frozen=True)
class NetConfig:
    loss: float = 0.0
    dup: float = 0.0
    delay_min: float = 0.02  # seconds of simulated time
    delay_max: float = 0.02
    reorder: float = 0.0  # extra uniform jitter window

    def __post_init__(self):
        for name in ("loss", "dup"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name} probability must be in [0, 1]")
        if self.delay_min < 0 or self.delay_max < self.delay_min or self.reorder < 0:
            raise ValueError("bad delay configuration")


@dataclass(frozen=True)
class UserSpec:
    username: str
    password: str
    roles: tuple[str, ...] = ()


@dataclass(frozen=True)
class Intent:
    client: str
    action: str  # 'enroll' | 'access'
    server: str = ""
    resource: str = ""
    body: bytes = b""
    password_override: str | None = None


@dataclass(frozen=True)
class AdvAction:
    kind: str  # 'record' | 'replay' | 'tamper' | 'drop' | 'substitute-cert'
    msg_kind: str = ""  # m1..m4, r1..r4, appdata, or 'frame'
    occurrence: int = 1  # 1-based; for 'frame' this is the global frame index
    offset: int = 0  # tamper byte offset
    recording: int = 1  # 1-based recording index for replay
    at: float = 0.0  # injection time for replay
    mode: str = "new-conn"  # or 'same-conn'


@dataclass
class Scenario:
    seed: int = 1
    net: NetConfig = NetConfig()
    users: list[UserSpec] = field(default_factory=list)
    intents: list[Intent] = field(default_factory=list)
    adversary: list[AdvAction] = field(default_factory=list)
    rules: list[ResourceRule] = field(default_factory=list)
    resource_servers: int = 1
    bits: int = 1024
    suite: str = crypto.MODERN_AEAD
    max_retries: int = 3
    handshake_timeout: float = 10.0
    cert_validity: int = 86400
    max_handshakes: int = 64
    max_sim_time: float = 120.0
    expect_frames: int | None = None


# ---------- transcript


@dataclass(frozen=True)
class TranscriptEntry:
    time: float
    src: str
    dst: str
    conn: int
    data: bytes
    status: str  # delivered | dropped | duplicated | tampered | injected

    @property
    def msg_kind(self) -> str:
        if len(self.data) >= 4 and self.data[3] in MSG_NAMES:
            return MSG_NAMES[self.data[3]]
        return "?"


class Transcript:
    def __init__(self):
        self.entries: list[TranscriptEntry] = []

    def append(self, entry: TranscriptEntry) -> None:
        self.entries.append(entry)

    def to_text(self) -> str:
        lines = [
            f"{e.time:.6f} {e.src}->{e.dst}#{e.conn} {e.msg_kind} {e.status} "
            f"{e.data.hex()}"
            for e in self.entries
        ]
        return "\n".join(lines) + "\n"

    def frames(self, statuses=("delivered", "tampered", "duplicated", "injected")):
        return [e for e in self.entries if e.status in statuses]


@dataclass
class IntentOutcome:
    client: str
    index: int
    action: str
    server: str
    ok: bool
    detail: str


@dataclass
class SessionSummary:
    server: str
    peer_username: str
    roles: tuple[str, ...]
    nonce_digest: bytes
    key_bytes: bytes


@dataclass
class SimResult:
    transcript: Transcript
    outcomes: list[IntentOutcome]
    sessions: list[SessionSummary]  # server-side established sessions
    client_session_keys: list[bytes]
    home_counters: dict
    resource_counters: dict[str, dict]
    anomalies: list[tuple[float, str, str]]
    secrets: list[bytes] = field(default_factory=list)

    def outcome_for(self, client: str, index: int) -> IntentOutcome:
        for out in self.outcomes:
            if out.client == client and out.index == index:
                return out
        raise KeyError((client, index))


# ---------- adversary runtime


class _Adversary:
    def __init__(self, actions: list[AdvAction], rng: Rng, trust_issuer: str):
        self.actions = actions
        self.rng = rng
        self.trust_issuer = trust_issuer
        self.recordings: list[tuple[bytes, str, str, int]] = []
        self.frame_index = 0
        self.kind_seen: dict[str, int] = {}
        self.challenges: dict[tuple[str, str, int], bytes] = {}
        self._keypair: crypto.AsymKeyPair | None = None

    def _matches(self, action: AdvAction, kind: str, occ: int) -> bool:
        if action.msg_kind == "frame":
            return action.occurrence == self.frame_index
        return action.msg_kind == kind and action.occurrence == occ

    def keypair(self) -> crypto.AsymKeyPair:
        if self._keypair is None:
            self._keypair = crypto.gen_keypair(1024, self.rng)
        return self._keypair

    def filter(
        self, src: str, dst: str, conn: int, data: bytes, version: int
    ) -> tuple[bytes | None, bool]:
        """Returns (possibly mutated frame or None if dropped, tampered?)."""
        kind = MSG_NAMES.get(data[3], "?") if len(data) >= 4 else "?"
        self.frame_index += 1
        occ = self.kind_seen.get(kind, 0) + 1
        self.kind_seen[kind] = occ
        if kind == "r2":
            try:
                msg = decode_msg_exact(data, version)
                self.challenges[(dst, src, conn)] = msg.nonce
            except (WireError, SsoError, NeedMoreData):
                pass
        tampered = False
        for action in self.actions:
            if not self._matches(action, kind, occ):
                continue
            if action.kind == "record":
                self.recordings.append((data, src, dst, conn))
            elif action.kind == "drop":
                return None, False
            elif action.kind == "tamper":
                buf = bytearray(data)
                buf[action.offset % len(buf)] ^= 0xFF
                data = bytes(buf)
                tampered = True
            elif action.kind == "substitute-cert":
                mutated = self._substitute_cert(src, dst, conn, data, version)
                if mutated is not None:
                    data = mutated
                    tampered = True
        return data, tampered

    def _substitute_cert(
        self, src: str, dst: str, conn: int, data: bytes, version: int
    ) -> bytes | None:
        """Impersonation attempt: swap in a certificate forged under the
        adversary's own key (issuer id spoofed to the real trust root)."""
        try:
            msg = decode_msg_exact(data, version)
        except (WireError, SsoError, NeedMoreData):
            return None
        pair = self.keypair()
        if isinstance(msg, AuthResponse):
            try:
                original = cert_mod.decode_certificate(msg.cert_bytes)
                username = original.subject.username
            except SsoError:
                username = "mallory"
            forged = cert_mod.issue(
                issuer_sk=pair.secret,
                issuer_id=self.trust_issuer,
                subject=cert_mod.SubjectInfo(username=username),
                roles=("admin",),
                subject_pk=pair.public,
                validity_seconds=86400,
                now=0.0,
                rng=self.rng,
            )
            challenge = self.challenges.get((src, dst, conn))
            sig = (
                crypto.sign(pair.secret, crypto.sha256(challenge))
                if challenge is not None
                else msg.sig
            )
            new = AuthResponse(cert_mod.encode_certificate(forged), sig)
            return encode_msg(new, version)
        if isinstance(msg, Challenge):
            forged = cert_mod.issue(
                issuer_sk=pair.secret,
                issuer_id=self.trust_issuer,
                subject=cert_mod.SubjectInfo(username=src),
                roles=(),
                subject_pk=pair.public,
                validity_seconds=86400,
                now=0.0,
                rng=self.rng,
            )
            new = Challenge(msg.nonce, cert_mod.encode_certificate(forged))
            return encode_msg(new, version)
        return None


# ---------- participants


class _SimClient:
    def __init__(self, name: str, password: str, sim: "Simulation"):
        self.name = name
        self.password = password
        self.sim = sim
        self.rng = sim.master.fork(f"client:{name}")
        self.intents = [i for i in sim.scenario.intents if i.client == name]
        self.intent_idx = -1
        self.active: dict | None = None
        self.enrollment = None
        self.session_keys: list[bytes] = []

    # -- intent lifecycle

    def start_next_intent(self, now: float) -> None:
        self.intent_idx += 1
        self.active = None
        if self.intent_idx >= len(self.intents):
            return
        intent = self.intents[self.intent_idx]
        if intent.action == "enroll":
            password = (
                intent.password_override
                if intent.password_override is not None
                else self.password
            )
            fsm = ClientEnroll(
                self.name,
                password,
                self.sim.home_pk,
                self.rng.fork(f"enroll:{self.intent_idx}"),
                suite=self.sim.scenario.suite,
                policy=self.sim.policy,
            )
            conn = self.sim.new_conn_id()
            self.active = {"kind": "enroll", "fsm": fsm, "conn": conn,
                           "server": "home", "intent": intent}
            self.sim.send(self.name, "home", conn, fsm.start(now), now)
            self.sim.schedule_timer(self.name, conn, fsm.next_wakeup())
        elif intent.action == "access":
            if self.enrollment is None:
                self._finish(now, False, "no-credentials")
                return
            fsm = ClientAccess(
                self.enrollment.certificate,
                self.enrollment.cert_bytes,
                self.enrollment.keypair.secret,
                self.sim.trust,
                self.rng.fork(f"access:{self.intent_idx}"),
                policy=self.sim.policy,
            )
            conn = self.sim.new_conn_id()
            self.active = {"kind": "access", "fsm": fsm, "conn": conn,
                           "server": intent.server, "intent": intent,
                           "awaiting_response": False, "response_deadline": None}
            try:
                first = fsm.start(now)
            except ProtocolError as exc:
                self._finish(now, False, exc.reason)
                return
            self.sim.send(self.name, intent.server, conn, first, now)
            self.sim.schedule_timer(self.name, conn, fsm.next_wakeup())
        else:
            self._finish(now, False, f"unknown-action:{intent.action}")

    def _finish(self, now: float, ok: bool, detail: str) -> None:
        intent = self.intents[self.intent_idx]
        self.sim.outcomes.append(
            IntentOutcome(
                client=self.name,
                index=self.intent_idx,
                action=intent.action,
                server=intent.server or "home",
                ok=ok,
                detail=detail,
            )
        )
        self.active = None
        self.sim.schedule_intent(self.name, now)

    def pending(self) -> bool:
        return self.intent_idx < len(self.intents)

    def flush_timeout_outcomes(self, now: float) -> None:
        """Called at end of simulation for intents that never finished."""
        while self.intent_idx < len(self.intents):
            if self.intent_idx >= 0 and self.active is not None:
                self._finish(now, False, "timeout")
            else:
                self.start_next_intent(now)
                if self.active is not None:
                    self._finish(now, False, "timeout")

    # -- event handlers

    def on_deliver(self, src: str, conn: int, data: bytes, now: float) -> None:
        act = self.active
        if act is None or act["conn"] != conn or act["server"] != src:
            self.sim.note_anomaly(now, self.name, "stale-frame")
            return
        try:
            msg = decode_msg_exact(data, self.sim.wire_version)
        except (WireError, SsoError, NeedMoreData) as exc:
            self.sim.note_anomaly(now, self.name, f"undecodable:{type(exc).__name__}")
            return
        fsm = act["fsm"]
        if act["kind"] == "access" and isinstance(msg, AppData):
            self._on_app_response(msg, now)
            return
        try:
            outs = fsm.on_message(msg, now)
        except ProtocolOrderError:
            self.sim.note_anomaly(now, self.name, "protocol-order")
            return
        except SsoError as exc:
            reason = getattr(exc, "reason", type(exc).__name__)
            self.sim.note_anomaly(now, self.name, reason)
            self._finish(now, False, reason)
            return
        for out in outs:
            self.sim.send(self.name, src, conn, out, now)
        if act["kind"] == "enroll" and fsm.state == ClientEnroll.DONE:
            self.enrollment = fsm.result
            self.sim.secrets.append(bytes(fsm.session_key().key))
            self.sim.secrets.append(fsm.result.keypair.secret.encode())
            self._finish(now, True, "enrolled")
            return
        if act["kind"] == "access" and fsm.state == ClientAccess.ESTABLISHED:
            session = fsm.session
            self.session_keys.append(bytes(session.key.key))
            self.sim.secrets.append(bytes(session.key.key))
            intent = act["intent"]
            request = crypto.sym_encrypt(
                session.key,
                encode_app_request(intent.resource, intent.body),
                fsm.rng,
            )
            act["awaiting_response"] = True
            act["response_deadline"] = now + self.sim.policy.handshake_timeout
            self.sim.send(self.name, src, conn, AppData(request), now)
            self.sim.schedule_timer(self.name, conn, act["response_deadline"])
            return
        self.sim.schedule_timer(self.name, conn, fsm.next_wakeup())

    def _on_app_response(self, msg: AppData, now: float) -> None:
        act = self.active
        if not act.get("awaiting_response"):
            self.sim.note_anomaly(now, self.name, "unexpected-appdata")
            return
        session = act["fsm"].session
        try:
            status, body = decode_app_response(
                crypto.sym_decrypt(session.key, msg.ciphertext)
            )
        except SsoError as exc:
            self._finish(now, False, f"bad-response:{type(exc).__name__}")
            return
        act["response"] = (status, body)
        self._finish(now, status == "ok", status)

    def on_timer(self, conn: int, now: float) -> None:
        act = self.active
        if act is None or act["conn"] != conn:
            return
        if act["kind"] == "access" and act.get("awaiting_response"):
            if now + 1e-9 >= act["response_deadline"]:
                self._finish(now, False, "response-timeout")
            return
        fsm = act["fsm"]
        wakeup = fsm.next_wakeup()
        if wakeup is None:
            return
        if now + 1e-9 < wakeup:
            self.sim.schedule_timer(self.name, conn, wakeup)
            return
        out = fsm.on_timeout(now)
        if out is not None:
            self.sim.send(self.name, act["server"], conn, out, now)
        if fsm.state == "failed":
            self._finish(now, False, fsm.fail_reason or "failed")
            return
        self.sim.schedule_timer(self.name, conn, fsm.next_wakeup())


class _SimHome:
    def __init__(self, sim: "Simulation", env: HomeEnv):
        self.sim = sim
        self.env = env
        self.rng = sim.master.fork("home")
        self.conns: dict[tuple[str, int], HomeServerConn] = {}

    def _gc(self, now: float) -> None:
        dead = [k for k, fsm in self.conns.items()
                if fsm.expired(now) or fsm.state == HomeServerConn.FAILED]
        for key in dead:
            del self.conns[key]

    def on_deliver(self, src: str, conn: int, data: bytes, now: float) -> None:
        self._gc(now)
        try:
            msg = decode_msg_exact(data, self.sim.wire_version)
        except (WireError, SsoError, NeedMoreData) as exc:
            self.sim.note_anomaly(now, "home", f"undecodable:{type(exc).__name__}")
            return
        key = (src, conn)
        fsm = self.conns.get(key)
        if fsm is None:
            active = sum(
                1 for f in self.conns.values() if f.state != HomeServerConn.DONE
            )
            if active >= self.env.max_handshakes:
                self.env.counters.count_refusal("at-capacity")
                return  # refusal: no reply at all
            fsm = HomeServerConn(self.env, self.rng.fork(f"conn:{src}:{conn}"), now)
            self.conns[key] = fsm
        try:
            outs = fsm.on_message(msg, now)
        except Refusal as exc:
            self.env.counters.count_refusal(exc.reason)
            self.conns.pop(key, None)
            return
        except ProtocolOrderError:
            self.sim.note_anomaly(now, "home", "protocol-order")
            self.conns.pop(key, None)
            return
        except SsoError as exc:
            reason = getattr(exc, "reason", type(exc).__name__)
            self.env.counters.count_failure(reason)
            self.sim.note_anomaly(now, "home", reason)
            self.conns.pop(key, None)
            return
        for out in outs:
            self.sim.send("home", src, conn, out, now)


class _SimResource:
    def __init__(self, name: str, sim: "Simulation", env: ResourceEnv,
                 rules: RuleTable):
        self.name = name
        self.sim = sim
        self.env = env
        self.rules = rules
        self.rng = sim.master.fork(f"resource:{name}")
        self.conns: dict[tuple[str, int], ResourceServerConn] = {}

    def _gc(self, now: float) -> None:
        dead = [k for k, fsm in self.conns.items()
                if fsm.expired(now) or fsm.state == ResourceServerConn.FAILED]
        for key in dead:
            del self.conns[key]

    def sessions(self) -> list[SessionSummary]:
        out = []
        for fsm in self.conns.values():
            if fsm.state == ResourceServerConn.ESTABLISHED and fsm.session:
                out.append(
                    SessionSummary(
                        server=self.name,
                        peer_username=fsm.session.peer_username,
                        roles=fsm.session.roles,
                        nonce_digest=fsm.session.nonce_digest,
                        key_bytes=bytes(fsm.session.key.key),
                    )
                )
        return out

    def on_deliver(self, src: str, conn: int, data: bytes, now: float) -> None:
        self._gc(now)
        try:
            msg = decode_msg_exact(data, self.sim.wire_version)
        except (WireError, SsoError, NeedMoreData) as exc:
            self.sim.note_anomaly(now, self.name, f"undecodable:{type(exc).__name__}")
            return
        key = (src, conn)
        fsm = self.conns.get(key)
        if isinstance(msg, AppData):
            if fsm is None or fsm.state != ResourceServerConn.ESTABLISHED:
                self.sim.note_anomaly(now, self.name, "appdata-without-session")
                return
            try:
                reply = handle_app_data(fsm.session, self.rules, msg, fsm.rng)
            except SsoError as exc:
                # tampered AppData: close without a response
                self.sim.note_anomaly(now, self.name, type(exc).__name__)
                del self.conns[key]
                return
            self.sim.send(self.name, src, conn, reply, now)
            return
        if fsm is None:
            active = sum(
                1
                for f in self.conns.values()
                if f.state != ResourceServerConn.ESTABLISHED
            )
            if active >= self.env.max_handshakes:
                self.env.counters.count_refusal("at-capacity")
                return
            fsm = ResourceServerConn(self.env, self.rng.fork(f"conn:{src}:{conn}"), now)
            self.conns[key] = fsm
        try:
            outs = fsm.on_message(msg, now)
        except ProtocolOrderError:
            self.sim.note_anomaly(now, self.name, "protocol-order")
            self.conns.pop(key, None)
            return
        except SsoError as exc:
            reason = getattr(exc, "reason", type(exc).__name__)
            self.env.counters.count_failure(reason)
            self.sim.note_anomaly(now, self.name, reason)
            self.conns.pop(key, None)
            return
        for out in outs:
            self.sim.send(self.name, src, conn, out, now)


# ---------- the simulation engine


class Simulation:
    def __init__(self, scenario: Scenario, seed: int | None = None,
                 key_library: list[crypto.AsymKeyPair] | None = None):
        self.scenario = scenario
        self.seed = scenario.seed if seed is None else seed
        self.master = Rng(f"scenario:{self.seed}")
        self.net_rng = self.master.fork("net")
        self.policy = TimeoutPolicy(
            handshake_timeout=scenario.handshake_timeout,
            max_retries=scenario.max_retries,
        )
        self.wire_version = WIRE_VERSIONS[scenario.suite]
        self.transcript = Transcript()
        self.outcomes: list[IntentOutcome] = []
        self.anomalies: list[tuple[float, str, str]] = []
        self.secrets: list[bytes] = []
        self._heap: list = []
        self._seq = 0
        self._conn_counter = 0
        self.now = 0.0

        # key material: either generated from the seed or served from a
        # caller-provided library (faster test batches; still deterministic)
        self._key_library = list(key_library) if key_library else None
        self._key_cursor = 0
        home_pair = self._next_key("home-key")
        self.home_pk = home_pair.public
        self.trust = cert_mod.TrustStore()
        self.trust.add(ISSUER_ID, home_pair.public)

        directory = UserDirectory()
        db_rng = self.master.fork("userdb")
        for user in scenario.users:
            directory.add_user(
                user.username,
                user.password,
                user.roles,
                cert_mod.SubjectInfo(
                    username=user.username, email=f"{user.username}@example.org"
                ),
                rng=db_rng,
            )

        self.home = _SimHome(
            self,
            HomeEnv(
                directory=directory,
                keypair=home_pair,
                issuance=IssuanceConfig(
                    issuer_id=ISSUER_ID,
                    key_bits=scenario.bits,
                    validity_seconds=scenario.cert_validity,
                    suite=scenario.suite,
                ),
                replay=ReplayCache(ttl=scenario.handshake_timeout),
                counters=Counters(),
                keypair_source=self._issuance_source(),
                policy=self.policy,
                max_handshakes=scenario.max_handshakes,
            ),
        )

        rules = RuleTable(scenario.rules)
        self.resources: dict[str, _SimResource] = {}
        for i in range(1, scenario.resource_servers + 1):
            name = f"rs{i}"
            pair = self._next_key(f"rs-key:{name}")
            cert = cert_mod.issue(
                issuer_sk=home_pair.secret,
                issuer_id=ISSUER_ID,
                subject=cert_mod.SubjectInfo(username=name),
                roles=(),
                subject_pk=pair.public,
                validity_seconds=scenario.cert_validity,
                now=0.0,
                rng=self.master.fork(f"rs-cert:{name}"),
            )
            env = ResourceEnv(
                cert_bytes=cert_mod.encode_certificate(cert),
                keypair=pair,
                trust=self.trust,
                replay=ReplayCache(ttl=scenario.handshake_timeout),
                counters=Counters(),
                suite=scenario.suite,
                policy=self.policy,
                max_handshakes=scenario.max_handshakes,
            )
            self.resources[name] = _SimResource(name, self, env, rules)

        self.clients: dict[str, _SimClient] = {}
        password_of = {u.username: u.password for u in scenario.users}
        for intent in scenario.intents:
            if intent.client not in self.clients:
                self.clients[intent.client] = _SimClient(
                    intent.client, password_of.get(intent.client, ""), self
                )

        self.adversary = _Adversary(
            scenario.adversary, self.master.fork("adversary"), ISSUER_ID
        )

    # -- key material

    def _next_key(self, label: str) -> crypto.AsymKeyPair:
        if self._key_library:
            pair = self._key_library[self._key_cursor % len(self._key_library)]
            self._key_cursor += 1
            return pair
        return crypto.gen_keypair(self.scenario.bits, self.master.fork(label))

    def _issuance_source(self):
        def take(rng: Rng):
            if self._key_library:
                return self._next_key(""), 0.0, True
            return crypto.gen_keypair(self.scenario.bits, rng), 0.0, False

        return take

    # -- event plumbing

    def _push(self, at: float, kind: str, payload: tuple) -> None:
        heapq.heappush(self._heap, (at, self._seq, kind, payload))
        self._seq += 1

    def new_conn_id(self) -> int:
        self._conn_counter += 1
        return self._conn_counter

    def schedule_timer(self, name: str, conn: int, at: float | None) -> None:
        if at is not None:
            self._push(max(at, self.now), "timer", (name, conn))

    def schedule_intent(self, name: str, at: float) -> None:
        self._push(at, "intent", (name,))

    def note_anomaly(self, now: float, who: str, reason: str) -> None:
        self.anomalies.append((now, who, reason))

    def send(self, src: str, dst: str, conn: int, msg, now: float) -> None:
        data = encode_msg(msg, self.wire_version)
        filtered, tampered = self.adversary.filter(
            src, dst, conn, data, self.wire_version
        )
        if filtered is None:
            self.transcript.append(
                TranscriptEntry(now, src, dst, conn, data, "dropped")
            )
            return
        data = filtered
        if self.net_rng.random() < self.scenario.net.loss:
            self.transcript.append(
                TranscriptEntry(now, src, dst, conn, data, "dropped")
            )
            return
        status = "tampered" if tampered else "delivered"
        self._push(now + self._delay(), "deliver", (dst, src, conn, data, status))
        if self.scenario.net.dup and self.net_rng.random() < self.scenario.net.dup:
            self._push(
                now + self._delay(), "deliver", (dst, src, conn, data, "duplicated")
            )

    def _delay(self) -> float:
        net = self.scenario.net
        delay = (
            net.delay_min
            if net.delay_max == net.delay_min
            else self.net_rng.uniform(net.delay_min, net.delay_max)
        )
        if net.reorder:
            delay += self.net_rng.uniform(0.0, net.reorder)
        return delay

    def _deliver(self, dst: str, src: str, conn: int, data: bytes, now: float):
        if dst == "home":
            self.home.on_deliver(src, conn, data, now)
        elif dst in self.resources:
            self.resources[dst].on_deliver(src, conn, data, now)
        elif dst in self.clients:
            self.clients[dst].on_deliver(src, conn, data, now)
        else:
            self.note_anomaly(now, dst, "unknown-destination")

    # -- run

    def run(self) -> SimResult:
        for name in self.clients:
            self.schedule_intent(name, 0.0)
        for idx, action in enumerate(self.scenario.adversary):
            if action.kind == "replay":
                self._push(action.at, "replay", (idx,))

        while self._heap:
            at, _, kind, payload = heapq.heappop(self._heap)
            if at > self.scenario.max_sim_time:
                break
            self.now = at
            if kind == "deliver":
                dst, src, conn, data, status = payload
                self.transcript.append(
                    TranscriptEntry(at, src, dst, conn, data, status)
                )
                self._deliver(dst, src, conn, data, at)
            elif kind == "timer":
                name, conn = payload
                if name in self.clients:
                    self.clients[name].on_timer(conn, at)
            elif kind == "intent":
                (name,) = payload
                self.clients[name].start_next_intent(at)
            elif kind == "replay":
                (idx,) = payload
                self._run_replay(self.scenario.adversary[idx], at)

        end = min(self.now, self.scenario.max_sim_time)
        for client in self.clients.values():
            client.flush_timeout_outcomes(end)
        self.outcomes.sort(key=lambda o: (o.client, o.index))

        sessions = []
        for name in sorted(self.resources):
            sessions.extend(self.resources[name].sessions())
        client_keys = []
        for name in sorted(self.clients):
            client_keys.extend(self.clients[name].session_keys)
        return SimResult(
            transcript=self.transcript,
            outcomes=self.outcomes,
            sessions=sessions,
            client_session_keys=client_keys,
            home_counters=self.home.env.counters.snapshot(),
            resource_counters={
                name: rs.env.counters.snapshot()
                for name, rs in sorted(self.resources.items())
            },
            anomalies=self.anomalies,
            secrets=self.secrets,
        )

    def _run_replay(self, action: AdvAction, now: float) -> None:
        idx = action.recording - 1
        if idx < 0 or idx >= len(self.adversary.recordings):
            self.note_anomaly(now, "adversary", "replay-miss")
            return
        data, src, dst, conn = self.adversary.recordings[idx]
        if action.mode == "new-conn":
            conn = self.new_conn_id()
        self.transcript.append(
            TranscriptEntry(now, src, dst, conn, data, "injected")
        )
        self._deliver(dst, src, conn, data, now)


def run_scenario(
    scenario: Scenario, seed: int | None = None,
    key_library: list[crypto.AsymKeyPair] | None = None,
) -> SimResult:
    return Simulation(scenario, seed=seed, key_library=key_library).run()


# ---------- transcript predicates


STANDARD_PREDICATES = (
    "no-plaintext-password",
    "no-plaintext-session-key",
    "no-plaintext-resource-body",
    "single-session-per-nonce",
)


@dataclass(frozen=True)
class PredicateReport:
    name: str
    passed: bool
    detail: str = ""


def _bytes_on_wire(result: SimResult, needle: bytes) -> bool:
    if not needle:
        return False
    return any(needle in entry.data for entry in result.transcript.entries)


def assert_transcript(
    result: SimResult, scenario: Scenario, predicates=None
) -> list[PredicateReport]:
    names = list(predicates) if predicates else list(STANDARD_PREDICATES)
    if scenario.expect_frames is not None and "message-count" not in names:
        names.append("message-count")
    reports = []
    for name in names:
        if name == "no-plaintext-password":
            leaked = [
                u.username
                for u in scenario.users
                if _bytes_on_wire(result, u.password.encode("utf-8"))
            ]
            reports.append(
                PredicateReport(name, not leaked,
                                f"password visible for {leaked}" if leaked else "")
            )
        elif name == "no-plaintext-session-key":
            keys = (
                [s.key_bytes for s in result.sessions]
                + result.client_session_keys
                + result.secrets
            )
            leaked = sum(1 for k in keys if _bytes_on_wire(result, k))
            reports.append(
                PredicateReport(name, leaked == 0,
                                f"{leaked} key(s) visible" if leaked else "")
            )
        elif name == "no-plaintext-resource-body":
            bodies = [i.body for i in scenario.intents if i.action == "access"]
            leaked = sum(1 for b in bodies if len(b) >= 4 and _bytes_on_wire(result, b))
            reports.append(
                PredicateReport(name, leaked == 0,
                                f"{leaked} body(ies) visible" if leaked else "")
            )
        elif name == "single-session-per-nonce":
            digests = [s.nonce_digest for s in result.sessions]
            dupes = len(digests) - len(set(digests))
            reports.append(
                PredicateReport(name, dupes == 0,
                                f"{dupes} duplicate nonce session(s)" if dupes else "")
            )
        elif name == "message-count":
            protocol_frames = [
                e
                for e in result.transcript.frames()
                if len(e.data) >= 4 and e.data[3] != TYPE_APP_DATA
            ]
            got = len(protocol_frames)
            want = scenario.expect_frames
            reports.append(
                PredicateReport(name, got == want, f"got {got}, expected {want}")
            )
        else:
            reports.append(PredicateReport(name, False, "unknown predicate"))
    return reports


# ---------- scenario file format


def parse_scenario(text: str) -> Scenario:
    """Whitespace-separated directives, one per line, '#' comments.

    seed N | loss P | dup P | delay MS [MS] | reorder MS | retries N
    bits N | suite NAME | validity SECONDS | servers N | max-handshakes N
    expect-frames N | max-time SECONDS
    user NAME PASSWORD [role,role]
    rule RESOURCE ROLE
    intent NAME enroll [PASSWORD]
    intent NAME access SERVER RESOURCE [BODY...]
    adversary record KIND N
    adversary replay N at SECONDS [new-conn|same-conn]
    adversary tamper KIND N offset BYTE   (KIND may be 'frame')
    adversary drop KIND N
    adversary substitute-cert KIND N
    """
    scenario = Scenario()
    net = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tokens = line.split()
        word, rest = tokens[0], tokens[1:]
        try:
            if word == "seed":
                scenario.seed = int(rest[0])
            elif word == "loss":
                net["loss"] = float(rest[0])
            elif word == "dup":
                net["dup"] = float(rest[0])
            elif word == "delay":
                net["delay_min"] = float(rest[0]) / 1e3
                net["delay_max"] = float(rest[1] if len(rest) > 1 else rest[0]) / 1e3
            elif word == "reorder":
                net["reorder"] = float(rest[0]) / 1e3
            elif word == "retries":
                scenario.max_retries = int(rest[0])
            elif word == "bits":
                scenario.bits = int(rest[0])
            elif word == "suite":
                scenario.suite = rest[0]
            elif word == "validity":
                scenario.cert_validity = int(rest[0])
            elif word == "servers":
                scenario.resource_servers = int(rest[0])
            elif word == "max-handshakes":
                scenario.max_handshakes = int(rest[0])
            elif word == "expect-frames":
                scenario.expect_frames = int(rest[0])
            elif word == "max-time":
                scenario.max_sim_time = float(rest[0])
            elif word == "user":
                roles = tuple(r for r in rest[2].split(",") if r) if len(rest) > 2 else ()
                scenario.users.append(UserSpec(rest[0], rest[1], roles))
            elif word == "rule":
                scenario.rules.append(ResourceRule(rest[0], rest[1]))
            elif word == "intent":
                name, action = rest[0], rest[1]
                if action == "enroll":
                    scenario.intents.append(
                        Intent(name, "enroll",
                               password_override=rest[2] if len(rest) > 2 else None)
                    )
                elif action == "access":
                    body = " ".join(rest[4:]).encode("utf-8") if len(rest) > 4 else b""
                    scenario.intents.append(
                        Intent(name, "access", server=rest[2], resource=rest[3],
                               body=body)
                    )
                else:
                    raise ValueError(f"unknown intent action {action!r}")
            elif word == "adversary":
                scenario.adversary.append(_parse_adv_action(rest))
            else:
                raise ValueError(f"unknown directive {word!r}")
        except (IndexError, ValueError) as exc:
            raise ValueError(f"scenario line {lineno}: {raw.strip()!r}: {exc}") from None
    if net:
        scenario.net = replace(scenario.net, **net)
    if scenario.suite not in WIRE_VERSIONS:
        raise ValueError(f"unknown suite {scenario.suite!r}")
    recordings = sum(1 for a in scenario.adversary if a.kind == "record")
    for action in scenario.adversary:
        if action.kind == "replay" and not 1 <= action.recording <= recordings:
            raise ValueError(
                f"replay references recording {action.recording}, "
                f"but only {recordings} record action(s) are defined"
            )
    return scenario


def _parse_adv_action(rest: list[str]) -> AdvAction:
    kind = rest[0]
    if kind == "record":
        return AdvAction("record", msg_kind=rest[1], occurrence=int(rest[2]))
    if kind == "drop":
        return AdvAction("drop", msg_kind=rest[1], occurrence=int(rest[2]))
    if kind == "substitute-cert":
        return AdvAction("substitute-cert", msg_kind=rest[1], occurrence=int(rest[2]))
    if kind == "tamper":
        if rest[3] != "offset":
            raise ValueError("tamper syntax: tamper KIND N offset BYTE")
        return AdvAction("tamper", msg_kind=rest[1], occurrence=int(rest[2]),
                         offset=int(rest[4]))
    if kind == "replay":
        if rest[2] != "at":
            raise ValueError("replay syntax: replay N at SECONDS [mode]")
        mode = rest[4] if len(rest) > 4 else "new-conn"
        if mode not in ("new-conn", "same-conn"):
            raise ValueError(f"unknown replay mode {mode!r}")
        return AdvAction("replay", recording=int(rest[1]), at=float(rest[3]),
                         mode=mode)
    raise ValueError(f"unknown adversary action {kind!r}")


# ---------- CLI


def format_report(
    result: SimResult, scenario: Scenario, reports: list[PredicateReport]
) -> str:
    lines = []
    for out in result.outcomes:
        lines.append(
            f"# outcome client={out.client} intent={out.index} action={out.action} "
            f"server={out.server} ok={out.ok} detail={out.detail}"
        )
    lines.append(f"# home counters: {result.home_counters}")
    for name, counters in result.resource_counters.items():
        lines.append(f"# {name} counters: {counters}")
    lines.append(f"# frames: {len(result.transcript.entries)} transcript entries")
    for report in reports:
        suffix = f"  ({report.detail})" if report.detail and not report.passed else ""
        lines.append(f"{report.name} {'PASS' if report.passed else 'FAIL'}{suffix}")
    return "\n".join(lines) + "\n"


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="sso-sim", description="deterministic protocol simulator + adversary"
    )
    sub = parser.add_subparsers(dest="command", required=True)
    p_run = sub.add_parser("run", help="run one scenario")
    p_run.add_argument("--scenario", required=True)
    p_run.add_argument("--seed", type=int, default=None, help="override file seed")
    p_run.add_argument("--report", default=None, help="write the report here too")
    p_run.add_argument("--transcript", default=None, help="dump the transcript here")
    args = parser.parse_args(argv)

    try:
        with open(args.scenario, encoding="utf-8") as fh:
            scenario = parse_scenario(fh.read())
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    result = run_scenario(scenario, seed=args.seed)
    reports = assert_transcript(result, scenario)
    text = format_report(result, scenario, reports)
    sys.stdout.write(text)
    if args.report:
        with open(args.report, "w", encoding="utf-8") as fh:
            fh.write(text)
    if args.transcript:
        with open(args.transcript, "w", encoding="utf-8") as fh:
            fh.write(result.transcript.to_text())
    return 0 if all(r.passed for r in reports) else 1


def console_main() -> None:
    sys.exit(main())
