"""Experiment manifests and sweep execution.

A manifest is an INI file with an ``[experiment]`` section and an optional
``[protocol]`` section of overrides::

    [experiment]
    dataset = digits
    methods = fedavg, fibfl++
    scenarios = iid, dir0.1, ls1
    n_clients = 5
    rounds = 10
    seed = 0
    seeds = 0, 1, 2
    out = out

    [protocol]
    lr = 0.01
    batch_size = 64
    tau = 0.35

Scenario names: ``iid``, ``dir<alpha>`` and ``ls<K>``. Each (method,
scenario, seed) triple is one run. Partition and model-init seeds depend
only on (global seed, scenario, repeat) so all methods of a scenario start
from identical shards and weights; batch order uses a per-run seed hashed
from (global seed, method, scenario, repeat).

Output layout: ``<out>/<dataset>/<scenario>/<method>/rounds.csv`` (one file
per repeat, ``rounds_seed<k>.csv`` when several repeats are requested),
``ring.json`` and ``spectrum.json`` next to FibFL++ runs, and
``<out>/<dataset>/summary.json``.
"""
from __future__ import annotations

import argparse
import configparser
import hashlib
import itertools
import json
import logging
import os
import sys
import traceback
from io import StringIO
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from firma import data, ring
from firma.errors import ConfigError
from firma.metrics import METHODS, summarize, write_rounds_csv
from firma.protocols import ProtocolConfig, run_experiment

log = logging.getLogger("firma")

ALL_SCENARIOS = ("iid", "dir0.8", "dir0.5", "dir0.1", "ls1", "ls2", "ls3")


class ManifestError(ConfigError):
    """Raised for an invalid manifest; ``key`` names the offending field."""

    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


@dataclass
class ExperimentManifest:
    dataset: str
    methods: list
    scenarios: list
    n_clients: int = 5
    rounds: int = 10
    seed: int = 0
    seeds: list = field(default_factory=lambda: [0])
    out: str = "out"
    dataset_path: str | None = None
    overrides: dict = field(default_factory=dict)

    def runs(self) -> list[tuple[str, str, int]]:
        """Planned (scenario, method, repeat) triples in execution order."""
        return list(itertools.product(self.scenarios, self.methods, self.seeds))

    def to_ini(self) -> str:
        cp = configparser.ConfigParser()
        cp.optionxform = str
        exp = {
            "dataset": self.dataset,
            "methods": ", ".join(self.methods),
            "scenarios": ", ".join(self.scenarios),
            "n_clients": str(self.n_clients),
            "rounds": str(self.rounds),
            "seed": str(self.seed),
            "seeds": ", ".join(str(s) for s in self.seeds),
            "out": self.out,
        }
        if self.dataset_path:
            exp["dataset_path"] = self.dataset_path
        cp["experiment"] = exp
        if self.overrides:
            cp["protocol"] = {k: str(v) for k, v in self.overrides.items()}
        buf = StringIO()
        cp.write(buf)
        return buf.getvalue()


def scenario_spec(name: str, n_clients: int, seed: int) -> data.PartitionSpec:
    name = name.lower()
    if name == "iid":
        return data.PartitionSpec.iid(n_clients, seed)
    if name.startswith("dir"):
        return data.PartitionSpec.dirichlet(float(name[3:]), n_clients, seed)
    if name.startswith("ls"):
        return data.PartitionSpec.label_skew(int(name[2:]), n_clients, seed)
    raise ValueError(name)


def _valid_scenario(name: str) -> bool:
    try:
        scenario_spec(name, 2, 0)
    except ValueError:
        return False
    return True


_INT_OVERRIDES = {"E", "E_h", "E_e", "k_g", "warmup", "batch_size"}
_FLOAT_OVERRIDES = {"lr", "momentum", "gamma", "gamma_start", "gamma_end", "tau", "eps", "mix",
                    "test_frac"}
_STR_OVERRIDES = {"eval_split"}


def _split_list(value: str) -> list:
    return [v.strip() for v in value.split(",") if v.strip()]


def parse_manifest(path) -> ExperimentManifest:
    cp = configparser.ConfigParser()
    cp.optionxform = str  # keep E_h etc. case-sensitive
    if not cp.read(path):
        raise ManifestError("file", f"cannot read {path}")
    return manifest_from_config(cp)


def parse_manifest_text(text: str) -> ExperimentManifest:
    cp = configparser.ConfigParser()
    cp.optionxform = str
    cp.read_string(text)
    return manifest_from_config(cp)


def manifest_from_config(cp: configparser.ConfigParser) -> ExperimentManifest:
    if "experiment" not in cp:
        raise ManifestError("experiment", "missing [experiment] section")
    exp = cp["experiment"]
    known = {"dataset", "methods", "scenarios", "n_clients", "rounds", "seed", "seeds", "out",
             "dataset_path"}
    for key in exp:
        if key not in known:
            raise ManifestError(key, "unknown experiment key")
    if "dataset" not in exp:
        raise ManifestError("dataset", "required")
    methods = [m.lower() for m in _split_list(exp.get("methods", ", ".join(METHODS)))]
    for m in methods:
        if m not in METHODS:
            raise ManifestError("methods", f"unknown method {m!r}")
    scenarios = [s.lower() for s in _split_list(exp.get("scenarios", ", ".join(ALL_SCENARIOS)))]
    for s in scenarios:
        if not _valid_scenario(s):
            raise ManifestError("scenarios", f"unknown scenario {s!r}")
    if not methods or not scenarios:
        raise ManifestError("methods" if not methods else "scenarios", "must not be empty")
    try:
        n_clients = exp.getint("n_clients", 5)
        rounds = exp.getint("rounds", 10)
        seed = exp.getint("seed", 0)
        seeds = [int(s) for s in _split_list(exp.get("seeds", "0"))]
    except ValueError as err:
        raise ManifestError("experiment", str(err)) from None
    if n_clients < 2:
        raise ManifestError("n_clients", "must be >= 2")
    if rounds < 0:
        raise ManifestError("rounds", "must be >= 0")

    overrides = {}
    if "protocol" in cp:
        for key, value in cp["protocol"].items():
            if key not in _INT_OVERRIDES | _FLOAT_OVERRIDES | _STR_OVERRIDES:
                raise ManifestError(key, "unknown protocol key")
            try:
                if key in _INT_OVERRIDES:
                    overrides[key] = int(value)
                elif key in _FLOAT_OVERRIDES:
                    overrides[key] = float(value)
                else:
                    overrides[key] = value.strip()
            except ValueError as err:
                raise ManifestError(key, str(err)) from None
    man = ExperimentManifest(exp["dataset"], methods, scenarios, n_clients, rounds, seed, seeds,
                             exp.get("out", "out"), exp.get("dataset_path"), overrides)
    for m in methods:  # surface config errors before any run starts
        try:
            protocol_config(man, m, scenarios[0], seeds[0])
        except ConfigError as err:
            raise ManifestError("protocol", str(err)) from None
    return man


# ----------------------------------------------------------------- seeding


def stable_seed(*parts) -> int:
    """64-bit seed from a stable hash of ``parts``."""
    key = "\x1f".join(str(p) for p in parts).encode()
    return int.from_bytes(hashlib.blake2b(key, digest_size=8).digest(), "little")


def scenario_seed(global_seed: int, scenario: str, repeat: int) -> int:
    return stable_seed(global_seed, "scenario", scenario, repeat)


def run_seed(global_seed: int, method: str, scenario: str, repeat: int) -> int:
    return stable_seed(global_seed, "run", method, scenario, repeat)


def protocol_config(man: ExperimentManifest, method: str, scenario: str, repeat: int) -> ProtocolConfig:
    return ProtocolConfig(
        method, n_clients=man.n_clients, rounds=man.rounds,
        seed=scenario_seed(man.seed, scenario, repeat),
        shuffle_seed=run_seed(man.seed, method, scenario, repeat),
        **man.overrides,
    )


# ----------------------------------------------------------------- datasets


def load_dataset(name: str, path: str | None = None) -> data.LabeledDataset:
    """Resolve a dataset by name; files come from ``path`` or ``$FIRMA_DATA_DIR``."""
    name = name.lower()
    base = Path(path or os.environ.get(data.DATA_DIR_ENV, "."))
    if name == "digits":
        return data.load_digits_csv(Path(path) if path else data.digits_csv_path())
    if name in ("mnist", "fashion", "fashion-mnist"):
        def pick(stem):
            for cand in (base / stem, base / (stem + ".gz")):
                if cand.exists():
                    return cand
            raise FileNotFoundError(base / stem)
        return data.load_idx(pick("train-images-idx3-ubyte"), pick("train-labels-idx1-ubyte"), name)
    if name == "cifar10":
        return data.load_cifar10_batches(sorted(base.glob("data_batch_*.bin")), name)
    if name.startswith("blobs"):
        return data.synth_blobs(600, 16, 10, 0.1, 0)
    raise FileNotFoundError(f"unknown dataset {name!r}")


# -------------------------------------------------------------------- sweep


def _run_dir(out: Path, man: ExperimentManifest, scenario: str, method: str) -> Path:
    return out / man.dataset / scenario / method


def _csv_name(man: ExperimentManifest, repeat: int) -> str:
    return "rounds.csv" if len(man.seeds) == 1 else f"rounds_seed{repeat}.csv"


def execute_run(man: ExperimentManifest, scenario: str, method: str, repeat: int, out: Path,
                dataset: data.LabeledDataset | None = None) -> dict:
    """Run one (scenario, method, repeat) and write its artifacts."""
    run_dir = _run_dir(out, man, scenario, method)
    run_dir.mkdir(parents=True, exist_ok=True)
    marker = run_dir / f"ERROR_seed{repeat}"
    try:
        ds = dataset if dataset is not None else load_dataset(man.dataset, man.dataset_path)
        cfg = protocol_config(man, method, scenario, repeat)
        spec = scenario_spec(scenario, man.n_clients, cfg.seed)
        res = run_experiment(ds, spec, cfg)
        write_rounds_csv(run_dir / _csv_name(man, repeat), res.records, method, scenario)
        row = {"scenario": scenario, "method": method, "repeat": repeat, **summarize(res.records),
               "params_tx": int(sum(r.params_tx for r in res.records)),
               "head_tx_count": int(sum(r.head_tx_count for r in res.records))}
        if res.ring_order is not None:
            (run_dir / "ring.json").write_text(res.ring_order.to_json())
            gamma = cfg.gamma_start if 0 < cfg.gamma_start < 1 else 0.5
            mix = ring.mixing_matrix(man.n_clients, gamma)
            (run_dir / "spectrum.json").write_text(mix.spectrum_json())
            row["ring_savings"] = res.ring_order.savings
        if marker.exists():
            marker.unlink()
        log.info("%s/%s seed%d acc=%.4f gini=%.4f", scenario, method, repeat,
                 row["accuracy"] or 0.0, row["gini"] or 0.0)
        return row
    except Exception as err:  # keep the sweep going; the marker records the failure
        marker.write_text(traceback.format_exc())
        log.error("%s/%s seed%d failed: %s", scenario, method, repeat, err)
        return {"scenario": scenario, "method": method, "repeat": repeat, "error": str(err)}


def _execute_star(args):
    return execute_run(*args)


def build_summary(man: ExperimentManifest, rows: list) -> dict:
    """Method x scenario tables averaged over repeats."""
    tables = {k: {m: {} for m in man.methods} for k in ("accuracy", "gini", "r50", "plateau_sigma")}
    savings = {}
    for m in man.methods:
        for s in man.scenarios:
            ok = [r for r in rows if r["method"] == m and r["scenario"] == s and "error" not in r]
            for k in tables:
                vals = [r[k] for r in ok if r.get(k) is not None]
                tables[k][m][s] = float(np.mean(vals)) if vals else None
            sv = [r["ring_savings"] for r in ok if "ring_savings" in r]
            if sv:
                savings[s] = float(np.mean(sv))
    return {"dataset": man.dataset, "n_clients": man.n_clients, "rounds": man.rounds,
            "seeds": man.seeds, **tables, "ring_savings": savings, "runs": rows}


def run_sweep(man: ExperimentManifest, out: Path | None = None, jobs: int = 1,
              dry_run: bool = False) -> int:
    """Execute every planned run. Returns the process exit status."""
    out = Path(out or man.out)
    plan = man.runs()
    if dry_run:
        for s, m, k in plan:
            print(f"{s}\t{m}\tseed{k}\t{_run_dir(out, man, s, m) / _csv_name(man, k)}")
        print(f"{len(plan)} runs planned")
        return 0
    if jobs <= 1:
        try:
            ds = load_dataset(man.dataset, man.dataset_path)
        except Exception:  # each run will retry and leave its own error marker
            ds = None
        rows = [execute_run(man, s, m, k, out, ds) for s, m, k in plan]
    else:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(_execute_star, [(man, s, m, k, out) for s, m, k in plan]))
    summary = build_summary(man, rows)
    (out / man.dataset).mkdir(parents=True, exist_ok=True)
    (out / man.dataset / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    return 1 if any("error" in r for r in rows) else 0


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="firma", description="Run a ring federated-learning sweep.")
    ap.add_argument("manifest", help="INI manifest path")
    ap.add_argument("--out", help="output directory (overrides the manifest)")
    ap.add_argument("--jobs", type=int, default=1, help="parallel runs (default 1)")
    ap.add_argument("--dry-run", action="store_true", help="list planned runs and exit")
    ap.add_argument("--deterministic", action="store_true",
                    help="force --jobs 1 so logs come out in plan order")
    ap.add_argument("-v", "--verbose", action="store_true")
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(message)s")
    try:
        man = parse_manifest(args.manifest)
    except ManifestError as err:
        print(f"manifest error: {err}", file=sys.stderr)
        return 2
    jobs = 1 if args.deterministic else args.jobs
    return run_sweep(man, args.out, jobs, args.dry_run)


if __name__ == "__main__":
    sys.exit(main())
