"""Print method x scenario accuracy and Gini tables from a sweep's summary.json.

    python3 scripts/sweep_tables.py out/digits/summary.json
"""
import argparse
import json


def table(block: dict, methods, scenarios, fmt="{:.4f}") -> str:
    rows = ["method".ljust(10) + "".join(s.rjust(9) for s in scenarios)]
    for m in methods:
        cells = [block[m].get(s) for s in scenarios]
        rows.append(m.ljust(10) + "".join(("-" if c is None else fmt.format(c)).rjust(9) for c in cells))
    return "\n".join(rows)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("summary")
    args = ap.parse_args()
    with open(args.summary) as fh:
        s = json.load(fh)
    methods = list(s["accuracy"])
    scenarios = list(next(iter(s["accuracy"].values())))
    print(f"{s['dataset']}  N={s['n_clients']}  R={s['rounds']}  repeats={s['seeds']}\n")
    for key in ("accuracy", "gini", "r50", "plateau_sigma"):
        print(f"== {key}")
        print(table(s[key], methods, scenarios, "{:.2f}" if key == "r50" else "{:.4f}"))
        print()
    if s.get("ring_savings"):
        print("== 2-opt ring savings (FibFL++)")
        for scen, v in s["ring_savings"].items():
            print(f"{scen:>8}  {v:.1%}")


if __name__ == "__main__":
    main()
