"""`sso` command-line client.

    sso signon  --home host:port --user NAME --anchor FILE --cache FILE
    sso access  --server host:port --resource NAME [--body TEXT]
                --cache FILE --anchor FILE [--auto-renew --home ... --user ...]
    sso inspect --cache FILE

The password is requested exactly once, during signon, and is never written
anywhere; access uses only the cached certificate and key. stdout carries
only response bodies; everything else goes to stderr.

Exit codes: 0 ok, 2 config/cache error, 4 authentication failed,
5 network failure, 6 re-enrollment needed (certificate expired), 7 denied.
"""

from __future__ import annotations

import argparse
import datetime
import getpass
import os
import sys
import time

from . import client
from . import certificate as cert_mod
from .errors import (
    CacheError,
    MalformedData,
    ProtocolError,
    ReEnrollNeeded,
    SsoError,
)
from .resource_server import STATUS_OK

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_AUTH = 4
EXIT_NETWORK = 5
EXIT_REENROLL = 6
EXIT_DENIED = 7


def read_password(prompt: str = "password: ") -> str:
    """Single seam for password entry; tests monkeypatch this to count prompts."""
    if sys.stdin is not None and not sys.stdin.isatty():
        line = sys.stdin.readline()
        if line:
            return line.rstrip("\n")
    return getpass.getpass(prompt)


def _parse_address(text: str) -> tuple[str, int]:
    host, _, port = text.rpartition(":")
    if not host or not port.isdigit():
        raise ValueError(f"address must be host:port, got {text!r}")
    return host, int(port)


def _load_anchor(path):
    try:
        issuer_id, pk = cert_mod.load_trust_anchor(path)
    except (OSError, MalformedData) as exc:
        raise CacheError(f"cannot read trust anchor {path}: {exc}") from None
    store = cert_mod.TrustStore()
    store.add(issuer_id, pk)
    return store, pk


def _signon(address, username, anchor_path, cache_path, password=None) -> int:
    try:
        _, home_pk = _load_anchor(anchor_path)
    except CacheError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if password is None:
        password = read_password(f"password for {username}: ")
    try:
        result = client.enroll(address, username, password, home_pk)
    except client.HandshakeRejected as exc:
        print(f"error: enrollment refused: {exc}", file=sys.stderr)
        return EXIT_AUTH
    except client.NetworkFailure as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NETWORK
    except (ProtocolError, SsoError) as exc:
        print(f"error: enrollment failed: {exc}", file=sys.stderr)
        return EXIT_AUTH
    client.save_cache(cache_path, result)
    cert = result.certificate
    print(
        f"enrolled {cert.subject.username!r}; certificate valid until "
        f"{_fmt_time(cert.not_after)}; cached in {cache_path}",
        file=sys.stderr,
    )
    return EXIT_OK


def cmd_signon(args) -> int:
    try:
        address = _parse_address(args.home)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return _signon(address, args.user, args.anchor, args.cache)


def cmd_access(args) -> int:
    try:
        address = _parse_address(args.server)
        trust, _ = _load_anchor(args.anchor)
    except (ValueError, CacheError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        cert, cert_bytes, sk = client.load_cache(args.cache)
    except (OSError, MalformedData, SsoError) as exc:
        print(f"error: cannot read credential cache {args.cache}: {exc}",
              file=sys.stderr)
        return EXIT_CONFIG

    if time.time() > cert.not_after:
        if not args.auto_renew:
            print(
                "error: cached certificate has expired; run `sso signon` to "
                "obtain a new one",
                file=sys.stderr,
            )
            return EXIT_REENROLL
        # renewal never uses stored credentials (none exist): prompt again
        if not args.home or not args.user:
            print("error: --auto-renew needs --home and --user", file=sys.stderr)
            return EXIT_CONFIG
        try:
            home_address = _parse_address(args.home)
        except ValueError as exc:
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_CONFIG
        rc = _signon(home_address, args.user, args.anchor, args.cache)
        if rc != EXIT_OK:
            return rc
        cert, cert_bytes, sk = client.load_cache(args.cache)

    body = args.body.encode("utf-8")
    try:
        _, status, response = client.access(
            address, cert, cert_bytes, sk, trust, args.resource, body
        )
    except ReEnrollNeeded:
        print("error: certificate expired; run `sso signon`", file=sys.stderr)
        return EXIT_REENROLL
    except client.HandshakeRejected as exc:
        print(f"error: access refused: {exc}", file=sys.stderr)
        return EXIT_AUTH
    except client.NetworkFailure as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NETWORK
    except (ProtocolError, SsoError) as exc:
        print(f"error: access handshake failed: {exc}", file=sys.stderr)
        return EXIT_AUTH
    if status != STATUS_OK:
        print(f"denied: {status}", file=sys.stderr)
        return EXIT_DENIED
    sys.stdout.write(response.decode("utf-8", errors="replace"))
    sys.stdout.write("\n")
    return EXIT_OK


def _fmt_time(ts: int) -> str:
    return datetime.datetime.fromtimestamp(ts, datetime.timezone.utc).strftime(
        "%Y-%m-%d %H:%M:%SZ"
    )


def cmd_inspect(args) -> int:
    try:
        cert, _, _ = client.load_cache(args.cache)
    except (OSError, MalformedData, SsoError) as exc:
        print(f"error: cannot read credential cache {args.cache}: {exc}",
              file=sys.stderr)
        return EXIT_CONFIG
    mode = os.stat(args.cache).st_mode & 0o777
    print(f"subject:      {cert.subject.username}")
    if cert.subject.email:
        print(f"email:        {cert.subject.email}")
    if cert.subject.location:
        print(f"location:     {cert.subject.location}")
    if cert.subject.organization:
        print(f"organization: {cert.subject.organization}")
    print(f"issuer:       {cert.issuer_id}")
    print(f"serial:       {cert.serial.hex()}")
    print(f"not-before:   {_fmt_time(cert.not_before)}")
    print(f"not-after:    {_fmt_time(cert.not_after)}")
    print(f"roles:        {','.join(cert.roles)}")
    print(f"cache mode:   {mode:o}")
    return EXIT_OK


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="sso", description="single sign-on client"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_signon = sub.add_parser("signon", help="enroll at the home server (the one "
                              "manual login)")
    p_signon.add_argument("--home", required=True, help="home server host:port")
    p_signon.add_argument("--user", required=True)
    p_signon.add_argument("--anchor", required=True, help="trust anchor file")
    p_signon.add_argument("--cache", required=True, help="credential cache to write")
    p_signon.set_defaults(func=cmd_signon)

    p_access = sub.add_parser("access", help="authenticate to a resource server "
                              "and issue one request")
    p_access.add_argument("--server", required=True, help="resource server host:port")
    p_access.add_argument("--resource", required=True)
    p_access.add_argument("--body", default="")
    p_access.add_argument("--cache", required=True)
    p_access.add_argument("--anchor", required=True)
    p_access.add_argument("--auto-renew", action="store_true",
                          help="on expiry, prompt again and re-enroll first "
                          "(passwords are never cached)")
    p_access.add_argument("--home", default=None, help="home server for --auto-renew")
    p_access.add_argument("--user", default=None, help="username for --auto-renew")
    p_access.set_defaults(func=cmd_access)

    p_inspect = sub.add_parser("inspect", help="print the cached certificate")
    p_inspect.add_argument("--cache", required=True)
    p_inspect.set_defaults(func=cmd_inspect)

    args = parser.parse_args(argv)
    return args.func(args)


def console_main() -> None:
    sys.exit(main())
