"""Alice and Bob share an account; deposits and interest are CvOps, withdrawals TOps.

    python scripts/bank_demo.py --seed 3 --trace bank.jsonl

Both clients run concurrently against a three-node cluster. Each
withdrawal sees every deposit its own client issued before it, so the
reported balances always include them; the trace is checked at the end.
"""

import argparse

from oacp.harness import WorkloadSpec, bank_story, run_ops


def main() -> None:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--jitter", type=float, default=0.3)
    p.add_argument("--protocol", default="oacp")
    p.add_argument("--trace")
    args = p.parse_args()

    story = bank_story()
    res = run_ops(WorkloadSpec(scenario="bank", protocol=args.protocol, seed=args.seed, jitter=args.jitter),
                  story, trace_path=args.trace)
    by_id = {op.id: op for op in story}
    for r in res.trace.records:
        if r["rec"] == "complete":
            op = by_id[r["op"]]
            call = f"{op.name}({','.join(map(str, op.args))})"
            print(f"{r['t'] / 1000:8.1f} ms  {op.client:5s} {call:18s} -> {r['value'] if r['ok'] else 'failed'}")
    print("final balance:", sorted({str(v) for v in res.final_values().values()}))
    verdict = res.check()
    print(verdict.text())


if __name__ == "__main__":
    main()
