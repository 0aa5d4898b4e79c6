"""Race the three authentication modes on the same workload.

Uses the single-threaded in-process cluster so the numbers reflect
signing and verification cost rather than thread scheduling. Expect the
domain-optimized policy to lead, MACs everywhere next, and signatures
on every link last.
"""

from pbftkit.bench.inline import compare_modes


def main():
    print("running 600 requests of 512 B under each mode, batch size 1...")
    results = compare_modes(total_requests=600, batch_size=1)
    print()
    print(f"{'mode':<18}{'ops/s':>9}{'mean latency':>15}")
    for name, r in results.items():
        lat = r["latencies"]
        mean_ms = 1e3 * sum(lat) / len(lat)
        print(f"{name:<18}{r['throughput']:>9.1f}{mean_ms:>13.2f}ms")
    d = results["DOMAIN_OPTIMIZED"]["throughput"]
    m = results["MAC_INTER_NODE"]["throughput"]
    p = results["PK_ONLY"]["throughput"]
    print()
    print(f"speedups: domain/mac = {d / m:.2f}x, mac/pk = {m / p:.2f}x")


if __name__ == "__main__":
    main()
