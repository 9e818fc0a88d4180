"""Issuance benchmarks: keypair-generation cost and enrollment latency.

Reproduces the qualitative performance picture of the original system: RSA
key generation dominates certificate issuance, issuance latency grows with
concurrent client count, and a pregenerated key pool removes most of the
cost. Absolute numbers are machine-bound, so the checkable claims are
orderings and shares, not milliseconds.

`bench_issuance` spawns an in-process home server on a loopback socket and
drives full Phase-1 enrollments from concurrent client threads, so measured
latency includes real framing and socket I/O.

CLI (`sso-bench`):
    keygen   --bits 2048 --iterations 20 --csv out.csv
    issuance --levels 1,2,4,8,16,32 --requests 16 --keypool on|off --csv out.csv
    plotdata --csv in.csv --out plot.dat

CSV columns: keygen -> iteration,micros; issuance ->
concurrency,mean_ms,p95_ms,keygen_share.
"""

from __future__ import annotations

import argparse
import csv
import statistics
import sys
import threading
import time
from dataclasses import dataclass

from . import client
from . import crypto
from .home_server import HomeConfig, HomeServer
from .rng import Rng
from .userdb import UserDirectory


def percentile(values, q: float) -> float:
    """Nearest-rank percentile; q in (0, 100]."""
    if not values:
        raise ValueError("no values")
    ordered = sorted(values)
    rank = max(1, -(-len(ordered) * q // 100))  # ceil
    return ordered[int(rank) - 1]


# ---------- keypair generation


@dataclass(frozen=True)
class KeygenSummary:
    bits: int
    iterations: int
    mean_us: float
    median_us: float
    p95_us: float


def bench_keygen(bits: int, iterations: int, rng: Rng | None = None):
    """Per-iteration wall micros plus a mean/median/p95 summary."""
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    rng = rng or Rng()
    rows = []
    for i in range(iterations):
        _, seconds = crypto.timed_gen_keypair(bits, rng)
        rows.append((i, seconds * 1e6))
    micros = [m for _, m in rows]
    summary = KeygenSummary(
        bits=bits,
        iterations=iterations,
        mean_us=statistics.fmean(micros),
        median_us=statistics.median(micros),
        p95_us=percentile(micros, 95),
    )
    return rows, summary


def write_keygen_csv(path, rows, summary: KeygenSummary) -> None:
    with open(path, "w", newline="", encoding="ascii") as fh:
        writer = csv.writer(fh)
        writer.writerow(["iteration", "micros"])
        for i, micros in rows:
            writer.writerow([i, f"{micros:.1f}"])
        fh.write(f"# bits={summary.bits} mean_us={summary.mean_us:.1f} "
                 f"median_us={summary.median_us:.1f} p95_us={summary.p95_us:.1f}\n")


# ---------- issuance under concurrency


@dataclass(frozen=True)
class IssuanceRow:
    concurrency: int
    mean_ms: float
    p95_ms: float
    keygen_share: float


def _spawn_server(bits: int, keypool: int, users: int,
                  keypair: crypto.AsymKeyPair) -> tuple[HomeServer, str]:
    directory = UserDirectory()
    rng = Rng("bench-users")
    password = "bench-password"
    for i in range(users):
        directory.add_user(f"bench{i}", password, ("bench",), rng=rng)
    config = HomeConfig(
        user_db="-",
        server_key="-",
        port=0,
        max_handshakes=max(users, 4) * 2,
        key_bits=bits,
        keypool=keypool,
    )
    server = HomeServer(config, directory=directory, keypair=keypair)
    server.start()
    return server, password


def bench_issuance(
    levels,
    requests_per_level: int,
    keypool: bool,
    bits: int = 2048,
    server_keypair: crypto.AsymKeyPair | None = None,
) -> list[IssuanceRow]:
    """Client-observed enrollment latency per concurrency level.

    Requests are raised to the level when needed so that every worker issues
    at least one (otherwise a level above the request count would silently
    measure a lower concurrency). One fresh in-process home server per
    level; with `keypool` the pool is pre-warmed to the request count and
    background refill is paused during the measurement window so the A/B
    comparison isolates pool hits.
    """
    if server_keypair is None:
        server_keypair = crypto.gen_keypair(bits, Rng("bench-server-key"))
    rows = []
    for level in levels:
        if level < 1:
            raise ValueError("concurrency levels must be >= 1")
        if requests_per_level == 0:
            continue
        requests = max(requests_per_level, level)
        pool_size = requests if keypool else 0
        server, password = _spawn_server(
            bits, pool_size, users=level, keypair=server_keypair
        )
        try:
            if server.pool is not None:
                server.pool.warm(timeout=300.0)
                server.pool.pause()
            address = server.address
            latencies: list[float] = []
            lock = threading.Lock()
            home_pk = server.keypair.public

            share = [requests // level] * level
            for i in range(requests % level):
                share[i] += 1

            def worker(idx: int, count: int) -> None:
                for _ in range(count):
                    t0 = time.perf_counter()
                    client.enroll(address, f"bench{idx}", password, home_pk)
                    dt = time.perf_counter() - t0
                    with lock:
                        latencies.append(dt * 1e3)

            threads = [
                threading.Thread(target=worker, args=(i, n), daemon=True)
                for i, n in enumerate(share)
                if n > 0
            ]
            for t in threads:
                t.start()
            for t in threads:
                t.join()
            rows.append(
                IssuanceRow(
                    concurrency=level,
                    mean_ms=statistics.fmean(latencies),
                    p95_ms=percentile(latencies, 95),
                    keygen_share=server.counters.keygen_share(),
                )
            )
        finally:
            server.stop()
    return rows


def write_issuance_csv(path, rows) -> None:
    with open(path, "w", newline="", encoding="ascii") as fh:
        writer = csv.writer(fh)
        writer.writerow(["concurrency", "mean_ms", "p95_ms", "keygen_share"])
        for row in rows:
            writer.writerow(
                [row.concurrency, f"{row.mean_ms:.2f}", f"{row.p95_ms:.2f}",
                 f"{row.keygen_share:.4f}"]
            )


# ---------- gnuplot-style output


def emit_plotdata(csv_path, out_path) -> None:
    """CSV -> whitespace-separated columns with a '#' header line."""
    with open(csv_path, newline="", encoding="ascii") as fh:
        reader = list(csv.reader(row for row in fh if not row.startswith("#")))
    if not reader:
        raise ValueError(f"{csv_path}: empty CSV")
    header, data = reader[0], reader[1:]
    lines = ["# " + " ".join(header)]
    for rownum, row in enumerate(data, start=2):
        for cell in row:
            try:
                float(cell)
            except ValueError:
                raise ValueError(
                    f"{csv_path}: row {rownum}: non-numeric cell {cell!r}"
                ) from None
        lines.append(" ".join(row))
    with open(out_path, "w", encoding="ascii") as fh:
        fh.write("\n".join(lines) + "\n")


# ---------- CLI


def _cmd_keygen(args) -> int:
    rows, summary = bench_keygen(args.bits, args.iterations)
    write_keygen_csv(args.csv, rows, summary)
    print(
        f"keygen bits={summary.bits} n={summary.iterations} "
        f"mean={summary.mean_us / 1e3:.1f}ms median={summary.median_us / 1e3:.1f}ms "
        f"p95={summary.p95_us / 1e3:.1f}ms -> {args.csv}",
        file=sys.stderr,
    )
    return 0


def _cmd_issuance(args) -> int:
    levels = [int(x) for x in args.levels.split(",") if x]
    rows = bench_issuance(
        levels, args.requests, keypool=args.keypool == "on", bits=args.bits
    )
    write_issuance_csv(args.csv, rows)
    for row in rows:
        print(
            f"concurrency={row.concurrency} mean={row.mean_ms:.1f}ms "
            f"p95={row.p95_ms:.1f}ms keygen_share={row.keygen_share:.2f}",
            file=sys.stderr,
        )
    print(f"wrote {args.csv}", file=sys.stderr)
    return 0


def _cmd_plotdata(args) -> int:
    try:
        emit_plotdata(args.csv, args.out)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="sso-bench", description="certificate issuance benchmarks"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_key = sub.add_parser(
        "keygen", help="RSA keypair generation timing",
        description="Times keypair generation. CSV columns: iteration, "
        "micros; a trailing '#' comment carries mean/median/p95 micros.")
    p_key.add_argument("--bits", type=int, default=2048)
    p_key.add_argument("--iterations", type=int, default=20)
    p_key.add_argument("--csv", required=True)
    p_key.set_defaults(func=_cmd_keygen)

    p_iss = sub.add_parser(
        "issuance", help="enrollment latency vs concurrency",
        description="Drives full enrollments against a local home server. "
        "CSV columns: concurrency, mean_ms, p95_ms (client-observed "
        "enrollment latency), keygen_share (server-side fraction of "
        "issuance time spent generating the subject keypair).")
    p_iss.add_argument("--levels", default="1,2,4,8,16,32",
                       help="comma-separated concurrency levels")
    p_iss.add_argument("--requests", type=int, default=16,
                       help="enrollments per level")
    p_iss.add_argument("--keypool", choices=("on", "off"), default="off")
    p_iss.add_argument("--bits", type=int, default=2048)
    p_iss.add_argument("--csv", required=True)
    p_iss.set_defaults(func=_cmd_issuance)

    p_plot = sub.add_parser("plotdata", help="CSV -> gnuplot-ready columns")
    p_plot.add_argument("--csv", required=True)
    p_plot.add_argument("--out", required=True)
    p_plot.set_defaults(func=_cmd_plotdata)

    args = parser.parse_args(argv)
    return args.func(args)


def console_main() -> None:
    sys.exit(main())
