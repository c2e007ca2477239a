"""Simulated throughput of a fixed cluster as the TOp share goes from 0 to 1.

    python scripts/throughput.py --clients 4 --out throughput.csv
"""

import argparse

from oacp.harness import WorkloadSpec, run_experiment, write_csv


def main() -> None:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--ops", type=int, default=500)
    p.add_argument("--clients", type=int, default=1)
    p.add_argument("--nodes", type=int, default=3)
    p.add_argument("--scenario", default="counter")
    p.add_argument("--protocol", default="oacp")
    p.add_argument("--out", default="throughput.csv")
    args = p.parse_args()

    reports = []
    print(f"{'TOp share':>9} {'ops/s':>9}")
    for k in range(11):
        spec = WorkloadSpec(scenario=args.scenario, protocol=args.protocol, ops=args.ops, clients=args.clients,
                            nodes=args.nodes, cv_ratio=1 - k / 10)
        rep = run_experiment(spec).report
        reports.append(rep)
        print(f"{k / 10:9.1f} {rep.throughput:9.1f}")
    write_csv(reports, args.out)
    print(f"wrote {args.out}")


if __name__ == "__main__":
    main()
