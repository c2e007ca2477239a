"""Per-operation latency with servers in Ohio, London and Sydney and the client in London.

    python scripts/latency_cdf.py --out latency.csv

Runs the same workload once per leader site and writes every latency
sample, so a CDF per (leader, kind) can be drawn from the CSV.
"""

import argparse
import csv

from oacp.consistency import C, T
from oacp.harness import WorkloadSpec, percentile, run_experiment

SITES = {"s0": "ohio", "s1": "london", "s2": "sydney"}


def main() -> None:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--ops", type=int, default=400)
    p.add_argument("--cv-ratio", type=float, default=0.5)
    p.add_argument("--scenario", default="shopping-cart")
    p.add_argument("--protocol", default="oacp")
    p.add_argument("--jitter", type=float, default=0.1)
    p.add_argument("--out", default="latency.csv")
    args = p.parse_args()

    with open(args.out, "w", newline="") as f:
        out = csv.writer(f)
        out.writerow(["leader_site", "kind", "latency_ms"])
        print(f"{'leader':>8} {'kind':>4} {'p50 ms':>8} {'p90 ms':>8} {'max ms':>8}")
        for leader, site in SITES.items():
            spec = WorkloadSpec(scenario=args.scenario, protocol=args.protocol, ops=args.ops,
                                cv_ratio=args.cv_ratio, latency="three-site", client_region="london",
                                leader=leader, jitter=args.jitter)
            lat = run_experiment(spec).report.latencies
            for kind in (C, T):
                samples = lat.get(kind, [])
                out.writerows([site, kind, us / 1000] for us in samples)
                if samples:
                    q = [percentile(samples, x) / 1000 for x in (50, 90, 100)]
                    print(f"{site:>8} {kind:>4} {q[0]:8.1f} {q[1]:8.1f} {q[2]:8.1f}")
    print(f"wrote {args.out}")


if __name__ == "__main__":
    main()
