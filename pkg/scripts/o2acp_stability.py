"""Messages for 100 Twitter operations as the CvOp share grows, OACP against O2ACP.

    python scripts/o2acp_stability.py --out o2acp.csv

With no CvOps every operation is a Tweet, the case where O2ACP skips the
state gather between consecutive TOps.
"""

import argparse
import statistics

from oacp.harness import WorkloadSpec, run_experiment, write_csv


def main() -> None:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--ops", type=int, default=100)
    p.add_argument("--step", type=float, default=0.05)
    p.add_argument("--top", type=float, default=0.95)
    p.add_argument("--nodes", type=int, default=3)
    p.add_argument("--out", default="o2acp.csv")
    args = p.parse_args()

    ratios = [round(k * args.step, 6) for k in range(int(round(args.top / args.step)) + 1)]
    reports, rows = [], {"oacp": [], "o2acp": []}
    for r in ratios:
        for proto in rows:
            spec = WorkloadSpec(scenario="twitter", protocol=proto, ops=args.ops, cv_ratio=r, nodes=args.nodes,
                                t_names=("tweet",))
            rep = run_experiment(spec).report
            reports.append(rep)
            rows[proto].append(rep.protocol_messages)
    write_csv(reports, args.out)

    print(f"{'ratio':>6}{'oacp':>8}{'o2acp':>8}{'share':>8}")
    for r, a, b in zip(ratios, rows["oacp"], rows["o2acp"]):
        print(f"{r:6.2f}{a:8d}{b:8d}{b / a:8.0%}")
    mean = statistics.mean(rows["o2acp"])
    spread = max(abs(x - mean) for x in rows["o2acp"]) / mean
    print(f"oacp falls {rows['oacp'][0] / rows['oacp'][-1]:.2f}x; o2acp mean {mean:.0f}, spread +-{spread:.0%}")
    print(f"wrote {args.out}")


if __name__ == "__main__":
    main()
