"""2-opt ring-cost savings per scenario on digits, without any training.

    python3 scripts/ring_savings.py --seeds 10
"""
import argparse

import numpy as np

from firma import cli, data, ring


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, default=5)
    ap.add_argument("--n-clients", type=int, default=5)
    ap.add_argument("--global-seed", type=int, default=0)
    args = ap.parse_args()
    ds = data.load_digits_csv(data.digits_csv_path())
    print(f"{'scenario':>8}  {'mean':>7}  {'min':>7}  {'max':>7}")
    for scen in cli.ALL_SCENARIOS:
        savings = []
        for k in range(args.seeds):
            seed = cli.scenario_seed(args.global_seed, scen, k)
            train, _ = data.train_test_split(ds, 0.2, seed)
            shards = data.partition(train, cli.scenario_spec(scen, args.n_clients, seed))
            savings.append(ring.two_opt(np.stack([s.class_histogram for s in shards])).savings)
        s = np.array(savings)
        print(f"{scen:>8}  {s.mean():7.1%}  {s.min():7.1%}  {s.max():7.1%}")


if __name__ == "__main__":
    main()
