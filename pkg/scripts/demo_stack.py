#!/usr/bin/env python3
"""Spin up a complete stack in a temp directory and walk the whole flow:
keygen, useradd, certify two resource servers, serve, signon once, access
both servers, show a denial, inspect the cache. Prints every step it
performs. Everything runs on ephemeral loopback ports.
"""

import sys
import tempfile
from pathlib import Path

from certsso import cli
from certsso.home_server import HomeConfig, HomeServer, main as home_main
from certsso.resource_server import ResourceConfig, ResourceServer


def run(label: str, rc: int, want: int = 0) -> None:
    print(f"$ {label}\n  -> exit {rc}")
    if rc != want:
        sys.exit(f"step failed: {label} (exit {rc}, wanted {want})")


def main() -> int:
    with tempfile.TemporaryDirectory(prefix="certsso-demo-") as tmp:
        base = Path(tmp)
        key, db = base / "home.key", base / "users.db"
        run("home-server keygen",
            home_main(["keygen", "--bits", "2048", "--out", str(key)]))
        run("home-server useradd alice (roles admin,staff)",
            home_main(["useradd", "alice", "--db", str(db),
                       "--roles", "admin,staff", "--email", "alice@example.org",
                       "--password", "wonderland"]))
        rules = base / "rules.txt"
        rules.write_text("files = admin\nwiki = staff\nvault = root\n")

        (base / "home.conf").write_text(
            f"user_db = {db}\nserver_key = {key}\nport = 0\n")
        home = HomeServer(HomeConfig.from_file(base / "home.conf"))
        home.start()
        print(f"# home server on {home.address[0]}:{home.address[1]}")

        resource_servers = []
        for name in ("rs1", "rs2"):
            cred = base / f"{name}.cred"
            run(f"home-server certify {name}",
                home_main(["certify", "--key", str(key), "--name", name,
                           "--out", str(cred)]))
            conf = base / f"{name}.conf"
            conf.write_text(
                f"credentials = {cred}\ntrust_anchor = {key}.anchor\n"
                f"rules = {rules}\nport = 0\n")
            rs = ResourceServer(ResourceConfig.from_file(conf))
            rs.start()
            print(f"# {name} on {rs.address[0]}:{rs.address[1]}")
            resource_servers.append(rs)

        cli.read_password = lambda prompt="": "wonderland"
        cache, anchor = base / "alice.cache", f"{key}.anchor"
        addr = lambda s: f"{s.address[0]}:{s.address[1]}"
        try:
            run("sso signon (the one manual login)",
                cli.main(["signon", "--home", addr(home), "--user", "alice",
                          "--anchor", anchor, "--cache", str(cache)]))
            run("sso access rs1 files",
                cli.main(["access", "--server", addr(resource_servers[0]),
                          "--resource", "files", "--body", "hello from rs1",
                          "--cache", str(cache), "--anchor", anchor]))
            run("sso access rs2 wiki",
                cli.main(["access", "--server", addr(resource_servers[1]),
                          "--resource", "wiki", "--body", "hello from rs2",
                          "--cache", str(cache), "--anchor", anchor]))
            run("sso access rs1 vault (insufficient role, expect exit 7)",
                cli.main(["access", "--server", addr(resource_servers[0]),
                          "--resource", "vault", "--cache", str(cache),
                          "--anchor", anchor]),
                want=7)
            run("sso inspect",
                cli.main(["inspect", "--cache", str(cache)]))
        finally:
            home.stop()
            for rs in resource_servers:
                rs.stop()
    print("demo complete: one password prompt, two servers accessed")
    return 0


if __name__ == "__main__":
    sys.exit(main())
