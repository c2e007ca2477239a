"""Protocol messages of OACP and the two comparison protocols against the CvOp share.

    python scripts/coordination.py --ops 10000 --out coordination.csv

One row per (protocol, ratio). Prints a table of message counts and the
baseline's multiple of each other protocol.
"""

import argparse

from oacp.harness import WorkloadSpec, run_experiment, write_csv


def main() -> None:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--ops", type=int, default=10_000)
    p.add_argument("--ratios", default="0.1,0.3,0.5,0.7,0.9")
    p.add_argument("--protocols", default="baseline,batching,oacp,o2acp")
    p.add_argument("--batch-size", type=int, default=5000)
    p.add_argument("--scenario", default="shopping-cart")
    p.add_argument("--out", default="coordination.csv")
    args = p.parse_args()

    ratios = [float(r) for r in args.ratios.split(",")]
    protocols = args.protocols.split(",")
    reports, counts = [], {}
    for r in ratios:
        for proto in protocols:
            spec = WorkloadSpec(scenario=args.scenario, protocol=proto, ops=args.ops, cv_ratio=r,
                                batch_size=args.batch_size)
            rep = run_experiment(spec).report
            reports.append(rep)
            counts[proto, r] = rep.protocol_messages
            print(f"  {proto:9s} cv={r:.2f}  {rep.protocol_messages:8d} messages", flush=True)
    write_csv(reports, args.out)

    print(f"\n{'ratio':>6}" + "".join(f"{proto:>11}" for proto in protocols))
    for r in ratios:
        print(f"{r:6.2f}" + "".join(f"{counts[proto, r]:11d}" for proto in protocols))
    if "baseline" in protocols:
        for proto in protocols:
            if proto != "baseline":
                ratio = [counts["baseline", r] / max(counts[proto, r], 1) for r in ratios]
                print(f"baseline / {proto}: " + ", ".join(f"{x:.2f}" for x in ratio))
    print(f"wrote {args.out}")


if __name__ == "__main__":
    main()
