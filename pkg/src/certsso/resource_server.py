"""Resource server daemon: Phase-2 authentication plus a demo service.

After a session is established every frame is AppData carrying an
authenticated ciphertext under the per-connection session key. The demo
service is request-response: the request names a resource and a body, the
rule table maps each resource to the single role required for it, and a
permitted request is answered by echoing the body prefixed with the resource
name. Denials are answered in-session; a tampered AppData frame closes the
connection without a reply.

CLI (`resource-server`): serve --config <path>. Rules file: `resource=role`
lines. Exit codes: 0 ok, 2 config error, 3 bind error.
"""

from __future__ import annotations

import argparse
import logging
import socket
import sys
import threading
import time
from dataclasses import dataclass

from . import certificate as cert_mod
from . import crypto
from .errors import (
    AuthenticationFailure,
    ConfigError,
    MalformedData,
    ProtocolError,
    Refusal,
    SsoError,
)
from .home_server import parse_kv_file, _setup_logging
from .protocol import (
    Counters,
    ReplayCache,
    ResourceEnv,
    ResourceServerConn,
    SessionContext,
    TimeoutPolicy,
    admit,
    decode_app_request,
    encode_app_response,
)
from .rng import Rng
from .wire import WIRE_VERSIONS, AppData, FrameStream

log = logging.getLogger("certsso.resource")

STATUS_OK = "ok"
STATUS_INSUFFICIENT_ROLE = "denied:insufficient-role"
STATUS_UNKNOWN_RESOURCE = "denied:unknown-resource"


@dataclass(frozen=True)
class ResourceRule:
    resource: str
    required_role: str


class RuleTable:
    """resource name -> required role; names unique."""

    def __init__(self, rules=()):
        self._rules: dict[str, str] = {}
        for rule in rules:
            self.add(rule)

    def add(self, rule: ResourceRule) -> None:
        if rule.resource in self._rules:
            raise ConfigError(f"duplicate resource {rule.resource!r}")
        self._rules[rule.resource] = rule.required_role

    def required_role(self, resource: str) -> str | None:
        return self._rules.get(resource)

    def __len__(self) -> int:
        return len(self._rules)

    @classmethod
    def load(cls, path) -> "RuleTable":
        table = cls()
        for lineno, line in enumerate(
            open(path, encoding="utf-8").read().splitlines(), start=1
        ):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}: line {lineno}: expected resource=role")
            resource, role = (part.strip() for part in line.split("=", 1))
            table.add(ResourceRule(resource, role))
        return table


def check_access(roles, required_role: str) -> bool:
    return required_role in roles


def handle_request(
    session: SessionContext, rules: RuleTable, resource: str, body: bytes
) -> tuple[str, bytes]:
    """RBAC decision + demo response for an already-decrypted request."""
    required = rules.required_role(resource)
    if required is None:
        return STATUS_UNKNOWN_RESOURCE, b""
    if not check_access(session.roles, required):
        return STATUS_INSUFFICIENT_ROLE, b""
    return STATUS_OK, resource.encode("utf-8") + b":" + body


def handle_app_data(
    session: SessionContext, rules: RuleTable, frame: AppData, rng: Rng
) -> AppData:
    """Decrypt, decide, re-encrypt. Raises AuthenticationFailure on tamper
    (callers must close the connection without replying)."""
    plain = crypto.sym_decrypt(session.key, frame.ciphertext)
    try:
        resource, body = decode_app_request(plain)
    except (MalformedData, UnicodeDecodeError):
        raise AuthenticationFailure("malformed request inside valid ciphertext") from None
    status, response = handle_request(session, rules, resource, body)
    return AppData(
        crypto.sym_encrypt(session.key, encode_app_response(status, response), rng)
    )


@dataclass
class ResourceConfig:
    credentials: str
    trust_anchor: str
    rules: str
    host: str = "127.0.0.1"
    port: int = 7402
    max_handshakes: int = 64
    suite: str = crypto.MODERN_AEAD
    handshake_timeout: float = 10.0
    log_file: str = ""

    @classmethod
    def from_file(cls, path) -> "ResourceConfig":
        raw = parse_kv_file(path)
        known = set(cls.__dataclass_fields__)
        kwargs = {}
        for key, value in raw.items():
            if key not in known:
                raise ConfigError(f"{path}: unknown key {key!r}")
            if key in ("port", "max_handshakes"):
                try:
                    kwargs[key] = int(value)
                except ValueError:
                    raise ConfigError(f"{path}: {key} must be an integer") from None
            elif key == "handshake_timeout":
                kwargs[key] = float(value)
            else:
                kwargs[key] = value
        for required in ("credentials", "trust_anchor", "rules"):
            if required not in kwargs:
                raise ConfigError(f"{path}: missing required key {required!r}")
        cfg = cls(**kwargs)
        if cfg.max_handshakes < 1:
            raise ConfigError("max_handshakes must be >= 1")
        if cfg.suite not in WIRE_VERSIONS:
            raise ConfigError(f"suite must be one of {sorted(WIRE_VERSIONS)}")
        return cfg


class ResourceServer:
    def __init__(
        self,
        config: ResourceConfig,
        rules: RuleTable | None = None,
        credentials=None,
        trust: cert_mod.TrustStore | None = None,
    ):
        self.config = config
        self.rules = rules if rules is not None else RuleTable.load(config.rules)
        if credentials is None:
            _, cert_bytes, sk = cert_mod.load_credential_file(config.credentials)
        else:
            cert_bytes, sk = credentials
        self.trust = trust or cert_mod.trust_store_from_anchor(config.trust_anchor)
        self.counters = Counters()
        self.env = ResourceEnv(
            cert_bytes=cert_bytes,
            keypair=crypto.AsymKeyPair(sk.public(), sk),
            trust=self.trust,
            replay=ReplayCache(ttl=config.handshake_timeout),
            counters=self.counters,
            suite=config.suite,
            policy=TimeoutPolicy(handshake_timeout=config.handshake_timeout),
            max_handshakes=config.max_handshakes,
        )
        self.wire_version = WIRE_VERSIONS[config.suite]
        self.sessions: dict[int, SessionContext] = {}
        self._sessions_lock = threading.Lock()
        self._next_conn_id = 0
        self._listener: socket.socket | None = None
        self._accept_thread: threading.Thread | None = None
        self._stop = threading.Event()
        self._active = 0
        self._active_lock = threading.Lock()
        self._workers: set[threading.Thread] = set()

    def start(self) -> None:
        listener = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        listener.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        listener.bind((self.config.host, self.config.port))
        listener.listen(128)
        listener.settimeout(0.1)  # lets the accept loop observe stop()
        self._listener = listener
        self._accept_thread = threading.Thread(
            target=self._accept_loop, name="resource-accept", daemon=True
        )
        self._accept_thread.start()
        log.info("serving addr=%s:%d rules=%d", *self.address, len(self.rules))

    @property
    def address(self) -> tuple[str, int]:
        host, port = self._listener.getsockname()[:2]
        return host, port

    def stop(self) -> None:
        self._stop.set()
        if self._listener is not None:
            try:
                self._listener.close()
            except OSError:
                pass
        if self._accept_thread is not None:
            self._accept_thread.join(timeout=2.0)
        deadline = time.monotonic() + self.config.handshake_timeout
        for worker in list(self._workers):
            worker.join(timeout=max(0.0, deadline - time.monotonic()))

    def _accept_loop(self) -> None:
        while not self._stop.is_set():
            try:
                conn, addr = self._listener.accept()
            except socket.timeout:
                continue
            except OSError:
                return
            with self._active_lock:
                try:
                    admit(self._active, self.config.max_handshakes)
                except Refusal as exc:
                    self.counters.count_refusal(exc.reason)
                    log.info("refused reason=%s peer=%s", exc.reason, addr[0])
                    conn.close()
                    continue
                self._active += 1
            worker = threading.Thread(
                target=self._serve_conn, args=(conn,), daemon=True
            )
            self._workers.add(worker)
            worker.start()

    def _serve_conn(self, conn: socket.socket) -> None:
        self.counters.incr("handshakes_started")
        with self._active_lock:
            conn_id = self._next_conn_id
            self._next_conn_id += 1
        fsm = ResourceServerConn(self.env, Rng(), time.time())
        stream = FrameStream(conn, self.wire_version)
        conn.settimeout(self.config.handshake_timeout)
        rng = Rng()
        try:
            while not self._stop.is_set():
                msg = stream.read_msg()
                if msg is None:
                    break
                if isinstance(msg, AppData):
                    if fsm.state != ResourceServerConn.ESTABLISHED:
                        log.info("appdata outcome=fail reason=no-session")
                        break
                    stream.write_msg(
                        handle_app_data(fsm.session, self.rules, msg, rng)
                    )
                    continue
                was_established = fsm.state == ResourceServerConn.ESTABLISHED
                for out in fsm.on_message(msg, time.time()):
                    stream.write_msg(out)
                if fsm.state == ResourceServerConn.ESTABLISHED and not was_established:
                    conn.settimeout(None)
                    with self._sessions_lock:
                        self.sessions[conn_id] = fsm.session
                    self.counters.incr("handshakes_completed")
                    log.info(
                        "session outcome=ok user=%s roles=%s",
                        fsm.session.peer_username,
                        ",".join(fsm.session.roles),
                    )
        except AuthenticationFailure:
            log.info("appdata outcome=closed reason=authentication-failure")
        except ProtocolError as exc:
            self.counters.count_failure(exc.reason)
            log.info("handshake outcome=failed reason=%s", exc.reason)
        except SsoError as exc:
            self.counters.count_failure(type(exc).__name__)
            log.info("handshake outcome=failed reason=%s", type(exc).__name__)
        except socket.timeout:
            self.counters.count_failure("handshake-timeout")
        except OSError:
            pass
        finally:
            # session keys do not outlive their connection
            with self._sessions_lock:
                self.sessions.pop(conn_id, None)
            try:
                conn.close()
            except OSError:
                pass
            with self._active_lock:
                self._active -= 1
            self._workers.discard(threading.current_thread())


def _cmd_serve(args) -> int:
    try:
        config = ResourceConfig.from_file(args.config)
        _setup_logging(config.log_file)
        server = ResourceServer(config)
    except (ConfigError, SsoError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    try:
        server.start()
    except OSError as exc:
        print(f"error: cannot bind {config.host}:{config.port}: {exc}", file=sys.stderr)
        return 3
    print(
        f"resource-server listening on {server.address[0]}:{server.address[1]}",
        file=sys.stderr,
    )
    try:
        while True:
            time.sleep(0.5)
    except KeyboardInterrupt:
        pass
    finally:
        server.stop()
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="resource-server",
        description="Phase-2 authentication + RBAC-guarded demo resource service",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    p_serve = sub.add_parser("serve", help="run the daemon")
    p_serve.add_argument("--config", required=True)
    p_serve.set_defaults(func=_cmd_serve)
    args = parser.parse_args(argv)
    return args.func(args)


def console_main() -> None:
    sys.exit(main())
