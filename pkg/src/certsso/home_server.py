"""Home server daemon: user directory, enrollment endpoint, issuance.

Binds the Phase-1 state machine to a listening socket, one handler thread
per connection, with an optional pregenerated keypair pool. Refusals
(unknown user, at capacity) close the connection without a distinguishing
reply; the typed reason only reaches the log and counters.

CLI (`home-server`):
    serve   --config <path>
    useradd <name> --db <path> --roles r1,r2 --password ... [--email ...]
    keygen  --bits 2048 --out <path> [--issuer-id home]
    certify --key <home key> --name rs1 --out <path>   (resource-server creds)

Exit codes: 0 ok, 2 config/usage error, 3 bind error.
"""

from __future__ import annotations

import argparse
import logging
import socket
import sys
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path

from . import certificate as cert_mod
from . import crypto
from .errors import ConfigError, ProtocolError, Refusal, SsoError, WireError
from .keypool import KeyPool
from .protocol import (
    Counters,
    HomeEnv,
    HomeServerConn,
    IssuanceConfig,
    ReplayCache,
    TimeoutPolicy,
    admit,
    inline_keypair_source,
)
from .rng import Rng
from .userdb import UserDirectory
from .wire import WIRE_VERSIONS, Enroll, FrameStream

log = logging.getLogger("certsso.home")


def parse_kv_file(path) -> dict[str, str]:
    """key = value lines; '#' starts a comment; later keys override."""
    out: dict[str, str] = {}
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}: line {lineno}: expected key = value")
        key, value = (part.strip() for part in line.split("=", 1))
        out[key] = value
    return out


@dataclass
class HomeConfig:
    user_db: str
    server_key: str
    host: str = "127.0.0.1"
    port: int = 7401
    issuer_id: str = "home"
    max_handshakes: int = 64
    key_bits: int = 2048
    cert_validity: int = 86400
    suite: str = crypto.MODERN_AEAD
    keypool: int = 0
    handshake_timeout: float = 10.0
    log_file: str = ""

    _INT_KEYS = ("port", "max_handshakes", "key_bits", "cert_validity", "keypool")

    @classmethod
    def from_file(cls, path) -> "HomeConfig":
        raw = parse_kv_file(path)
        known = set(cls.__dataclass_fields__)
        kwargs = {}
        for key, value in raw.items():
            if key not in known:
                raise ConfigError(f"{path}: unknown key {key!r}")
            if key in cls._INT_KEYS:
                try:
                    kwargs[key] = int(value)
                except ValueError:
                    raise ConfigError(f"{path}: {key} must be an integer") from None
            elif key == "handshake_timeout":
                kwargs[key] = float(value)
            else:
                kwargs[key] = value
        for required in ("user_db", "server_key"):
            if required not in kwargs:
                raise ConfigError(f"{path}: missing required key {required!r}")
        cfg = cls(**kwargs)
        cfg.validate()
        return cfg

    def validate(self) -> None:
        if self.max_handshakes < 1:
            raise ConfigError("max_handshakes must be >= 1")
        if self.keypool < 0:
            raise ConfigError("keypool must be >= 0")
        if self.key_bits not in crypto.RSA_BITS_ALLOWED:
            raise ConfigError(f"key_bits must be one of {crypto.RSA_BITS_ALLOWED}")
        if self.suite not in WIRE_VERSIONS:
            raise ConfigError(f"suite must be one of {sorted(WIRE_VERSIONS)}")
        if self.cert_validity <= 0:
            raise ConfigError("cert_validity must be positive")


class HomeServer:
    """Runnable daemon; also embeddable in-process for tests and benchmarks."""

    def __init__(
        self,
        config: HomeConfig,
        directory: UserDirectory | None = None,
        keypair: crypto.AsymKeyPair | None = None,
    ):
        self.config = config
        self.directory = directory or UserDirectory.load(config.user_db)
        if keypair is None:
            sk = cert_mod.load_secret_key_file(config.server_key)
            keypair = crypto.AsymKeyPair(sk.public(), sk)
        self.keypair = keypair
        self.counters = Counters()
        self.pool: KeyPool | None = None
        if config.keypool > 0:
            self.pool = KeyPool(config.key_bits, config.keypool)
            source = self.pool.take
        else:
            source = inline_keypair_source(config.key_bits)
        policy = TimeoutPolicy(handshake_timeout=config.handshake_timeout)
        self.env = HomeEnv(
            directory=self.directory,
            keypair=self.keypair,
            issuance=IssuanceConfig(
                issuer_id=config.issuer_id,
                key_bits=config.key_bits,
                validity_seconds=config.cert_validity,
                suite=config.suite,
            ),
            replay=ReplayCache(ttl=config.handshake_timeout),
            counters=self.counters,
            keypair_source=source,
            policy=policy,
            max_handshakes=config.max_handshakes,
        )
        self.wire_version = WIRE_VERSIONS[config.suite]
        self._listener: socket.socket | None = None
        self._accept_thread: threading.Thread | None = None
        self._stop = threading.Event()
        self._active = 0
        self._active_lock = threading.Lock()
        self._workers: set[threading.Thread] = set()

    # -- lifecycle

    def start(self) -> None:
        listener = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        listener.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        listener.bind((self.config.host, self.config.port))
        listener.listen(128)
        listener.settimeout(0.1)  # lets the accept loop observe stop()
        self._listener = listener
        if self.pool is not None:
            self.pool.start()
        self._accept_thread = threading.Thread(
            target=self._accept_loop, name="home-accept", daemon=True
        )
        self._accept_thread.start()
        log.info(
            "serving issuer=%s addr=%s:%d bits=%d keypool=%d",
            self.config.issuer_id,
            *self.address,
            self.config.key_bits,
            self.config.keypool,
        )

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
        if self.pool is not None:
            self.pool.stop()

    # -- connection handling

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
        fsm = HomeServerConn(self.env, Rng(), time.time())
        stream = FrameStream(conn, self.wire_version)
        conn.settimeout(self.config.handshake_timeout)
        outcome, reason = "eof", ""
        try:
            while not self._stop.is_set():
                msg = stream.read_msg()
                if msg is None:
                    break
                is_m3 = isinstance(msg, Enroll)
                t0 = time.perf_counter()
                for out in fsm.on_message(msg, time.time()):
                    stream.write_msg(out)
                if is_m3 and fsm.state == HomeServerConn.DONE:
                    issuance_s = time.perf_counter() - t0
                    self.counters.record_issuance(
                        issuance_s, fsm.keygen_seconds, fsm.keygen_pooled
                    )
                    self.counters.incr("handshakes_completed")
                    outcome, reason = "ok", ""
                    log.info(
                        "handshake outcome=ok user=%s dur_ms=%.1f keygen_ms=%.1f pooled=%s",
                        fsm.username,
                        issuance_s * 1e3,
                        fsm.keygen_seconds * 1e3,
                        fsm.keygen_pooled,
                    )
        except Refusal as exc:
            outcome, reason = "refused", exc.reason
            self.counters.count_refusal(exc.reason)
        except ProtocolError as exc:
            outcome, reason = "failed", exc.reason
            self.counters.count_failure(exc.reason)
        except (SsoError, WireError) as exc:
            outcome, reason = "failed", type(exc).__name__
            self.counters.count_failure(reason)
        except socket.timeout:
            outcome, reason = "timeout", "handshake-timeout"
            self.counters.count_failure(reason)
        except OSError:
            outcome, reason = "failed", "io-error"
        finally:
            if outcome != "ok":
                log.info("handshake outcome=%s reason=%s", outcome, reason)
            try:
                conn.close()
            except OSError:
                pass
            with self._active_lock:
                self._active -= 1
            self._workers.discard(threading.current_thread())


# ---------- CLI


def _setup_logging(log_file: str = "") -> None:
    handlers = [logging.StreamHandler(sys.stderr)]
    if log_file:
        handlers.append(logging.FileHandler(log_file))
    logging.basicConfig(
        level=logging.INFO,
        format="%(asctime)s %(name)s %(message)s",
        handlers=handlers,
        force=True,
    )


def _cmd_serve(args) -> int:
    try:
        config = HomeConfig.from_file(args.config)
        _setup_logging(config.log_file)
        server = HomeServer(config)
    except (ConfigError, SsoError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    try:
        server.start()
    except OSError as exc:
        print(f"error: cannot bind {config.host}:{config.port}: {exc}", file=sys.stderr)
        return 3
    print(f"home-server listening on {server.address[0]}:{server.address[1]}",
          file=sys.stderr)
    try:
        while True:
            time.sleep(0.5)
    except KeyboardInterrupt:
        pass
    finally:
        server.stop()
    return 0


def _read_new_password(args) -> str:
    if args.password is not None:
        return args.password
    if args.password_file:
        return Path(args.password_file).read_text().splitlines()[0]
    import getpass

    return getpass.getpass("password: ")


def _cmd_useradd(args) -> int:
    db_path = Path(args.db)
    try:
        directory = UserDirectory.load(db_path) if db_path.exists() else UserDirectory()
        subject = cert_mod.SubjectInfo(
            username=args.name,
            location=args.location,
            organization=args.organization,
            email=args.email,
        )
        roles = [r for r in args.roles.split(",") if r]
        directory.add_user(args.name, _read_new_password(args), roles, subject)
        directory.save(db_path)
    except SsoError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    print(f"added {args.name!r} with roles {roles} ({len(directory)} users total)",
          file=sys.stderr)
    return 0


def _cmd_keygen(args) -> int:
    if args.bits not in crypto.RSA_BITS_ALLOWED:
        print(f"error: --bits must be one of {crypto.RSA_BITS_ALLOWED}", file=sys.stderr)
        return 2
    pair = crypto.gen_keypair(args.bits, Rng())
    cert_mod.write_secret_key_file(args.out, pair.secret)
    anchor = str(args.out) + ".anchor"
    cert_mod.write_trust_anchor(anchor, args.issuer_id, pair.public)
    print(f"wrote {args.out} (secret key) and {anchor} (trust anchor)", file=sys.stderr)
    return 0


def _cmd_certify(args) -> int:
    try:
        issuer_sk = cert_mod.load_secret_key_file(args.key)
    except (OSError, SsoError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    rng = Rng()
    pair = crypto.gen_keypair(args.bits, rng)
    roles = [r for r in args.roles.split(",") if r]
    cert = cert_mod.issue(
        issuer_sk=issuer_sk,
        issuer_id=args.issuer_id,
        subject=cert_mod.SubjectInfo(username=args.name),
        roles=roles,
        subject_pk=pair.public,
        validity_seconds=args.validity,
        now=time.time(),
        rng=rng,
    )
    cert_mod.write_credential_file(
        args.out, cert_mod.encode_certificate(cert), pair.secret
    )
    print(f"wrote {args.out} (certificate + secret key for {args.name!r})",
          file=sys.stderr)
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="home-server", description="enrollment and certificate issuance daemon"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_serve = sub.add_parser("serve", help="run the daemon")
    p_serve.add_argument("--config", required=True, help="key = value config file")
    p_serve.set_defaults(func=_cmd_serve)

    p_user = sub.add_parser("useradd", help="register a user in the directory file")
    p_user.add_argument("name")
    p_user.add_argument("--db", required=True, help="user directory file")
    p_user.add_argument("--roles", default="", help="comma-separated role names")
    p_user.add_argument("--password", default=None,
                        help="password (scripting; prompts when omitted)")
    p_user.add_argument("--password-file", default=None)
    p_user.add_argument("--email", default="")
    p_user.add_argument("--location", default="")
    p_user.add_argument("--organization", default="")
    p_user.set_defaults(func=_cmd_useradd)

    p_key = sub.add_parser("keygen", help="generate the server keypair + trust anchor")
    p_key.add_argument("--bits", type=int, default=2048)
    p_key.add_argument("--out", required=True)
    p_key.add_argument("--issuer-id", default="home")
    p_key.set_defaults(func=_cmd_keygen)

    p_cert = sub.add_parser(
        "certify", help="issue a certificate + keypair for a resource server"
    )
    p_cert.add_argument("--key", required=True, help="home server secret key file")
    p_cert.add_argument("--issuer-id", default="home")
    p_cert.add_argument("--name", required=True, help="server name (cert subject)")
    p_cert.add_argument("--bits", type=int, default=2048)
    p_cert.add_argument("--roles", default="")
    p_cert.add_argument("--validity", type=int, default=30 * 86400)
    p_cert.add_argument("--out", required=True)
    p_cert.set_defaults(func=_cmd_certify)

    args = parser.parse_args(argv)
    return args.func(args)


def console_main() -> None:
    sys.exit(main())
