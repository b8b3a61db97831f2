"""Command-line entry point: ``swat-gda {prepare,train,grid,analyze,report,verify}``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

import yaml

from . import data_streams as ds
from . import harness
from .analysis import a_distance, export_embeddings
from .baselines import GSTConfig
from .nets import ModelBundle, PretrainConfig
from .swat_trainer import TrainConfig

log = logging.getLogger("swat_gda")


def _load_config(path: str | None) -> dict:
    if not path:
        return {}
    text = Path(path).read_text()
    return (yaml.safe_load(text) if path.endswith((".yaml", ".yml")) else json.loads(text)) or {}


def _profile_defaults(profile: str) -> dict:
    return harness.PROFILES[profile]


def cmd_prepare(args) -> int:
    prof = _profile_defaults(args.profile)
    samples = args.samples if args.samples is not None else prof["samples_per_domain"]
    ref = harness.StreamRef(args.dataset, args.n_domains, args.given or args.n_domains, samples, args.seed)
    stream = harness.materialize(ref, args.root)
    path = Path(args.root) / "streams" / ref.key()
    print(json.dumps({"stream": str(path), "name": stream.name, "domains": len(stream.domains),
                      "rows": [len(d) for d in stream.domains]}))
    return 0


def cmd_train(args) -> int:
    cfg = _load_config(args.config)
    method = args.method or cfg.get("method", "swat")
    seed = args.seed if args.seed is not None else int(cfg.get("seed", 0))
    prof = _profile_defaults(args.profile)
    train = dict(cfg.get("train", {}))
    if method == "swat":
        train.setdefault("epochs_per_phase", prof["epochs"])
        train_cfg = TrainConfig.from_dict({**train, "seed": seed})
    elif method == "gst":
        train.setdefault("epochs_per_domain", prof["epochs"])
        train_cfg = GSTConfig(**{**train, "seed": seed})
    else:
        train_cfg = None
    pretrain = PretrainConfig(**cfg.get("pretrain", {}))
    stream = ds.load_stream(args.stream)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps({
        "stream_path": str(Path(args.stream).resolve()), "method": method, "seed": seed,
        "train": asdict(train_cfg) if train_cfg else {}, "pretrain": asdict(pretrain),
    }, indent=2, default=list))
    key = stream.manifest().checksums()
    result = harness.execute_method(stream, harness._digest(key)[:16], method, train_cfg, pretrain,
                                    seed, out, args.root)
    print(json.dumps({k: result[k] for k in ("method", "seed", "final_accuracy", "per_domain_accuracy")}))
    return 0


def _grid_specs(cfg: dict, profile: str) -> list[harness.ExperimentSpec]:
    """Expand ``{stream: {...}, given: [...], methods: {...}, K: [...], seeds: [...]}``."""
    prof = _profile_defaults(profile)
    stream = dict(cfg["stream"])
    stream.setdefault("samples_per_domain", prof["samples_per_domain"])
    seeds = tuple(cfg.get("seeds", prof["seeds"]))
    specs = []
    for given in cfg.get("given", [stream.get("given", stream["n_domains"])]):
        ref = harness.StreamRef(**{**stream, "given": given})
        for method in cfg.get("methods", ["swat"]):
            train = dict(cfg.get("train", {}).get(method, {}))
            if method == "swat":
                train.setdefault("epochs_per_phase", prof["epochs"])
                for K in cfg.get("K", [train.get("inter_steps", 4)]):
                    specs.append(harness.ExperimentSpec(ref, "swat", {**train, "inter_steps": K},
                                                        cfg.get("pretrain", {}), seeds))
            else:
                if method == "gst":
                    train.setdefault("epochs_per_domain", prof["epochs"])
                specs.append(harness.ExperimentSpec(ref, method, train, cfg.get("pretrain", {}), seeds))
    return specs


def cmd_grid(args) -> int:
    specs = _grid_specs(_load_config(args.config), args.profile)
    result = harness.run_grid(specs, args.root)
    print(json.dumps({"records": len(result), "executed_runs": result.executed}))
    for rec in result:
        exp = rec.experiment
        print(f"{exp.stream.dataset} given={exp.stream.given} {exp.method} K={exp.inter_steps}: "
              f"{100 * rec.mean:.1f} ± {100 * rec.band:.1f}")
    return 0


def cmd_analyze(args) -> int:
    run = Path(args.run)
    stream = harness.stream_for_run(run, args.root)
    bundle = ModelBundle.load(run / ("pretrained.pt" if args.pretrained else "final.pt"))
    if args.what == "export-embeddings":
        dumps = export_embeddings(bundle, stream, args.out or run / "embeddings")
        print(json.dumps([d.record() for d in dumps]))
        return 0
    pairs = args.pairs or ["0:-1"]
    out = run / "a_distance.jsonl"
    with out.open("a") as fh:
        for pair in pairs:
            a, b = (int(v) for v in pair.split(":"))
            da, db = stream.domains[a], stream.domains[b]
            rep = a_distance(bundle.latents(da.X), bundle.latents(db.X), seed=args.seed or 0,
                             pair=(str(da.index), str(db.index)))
            row = {**rep.to_record(), "encoder": "pretrained" if args.pretrained else "final"}
            fh.write(json.dumps(row) + "\n")
            print(json.dumps(row))
    return 0


def cmd_report(args) -> int:
    records = harness.read_records(args.root)
    if args.dataset:
        records = [r for r in records if r.experiment.stream.dataset == args.dataset]
    if not records:
        print("no records", file=sys.stderr)
        return 1
    table = harness.report_tables(records, args.layout)
    print(table.to_text(), end="")
    if args.csv:
        Path(args.csv).write_text(table.to_csv())
    return 0


def cmd_verify(args) -> int:
    if args.config:
        cfg = _load_config(args.config)
        spec = harness.ExperimentSpec.from_dict(cfg)
    else:
        spec = harness.ExperimentSpec(
            harness.StreamRef("gaussian_drift", 3, 3, 300, 0), "swat",
            {"epochs_per_phase": 1, "inter_steps": 1}, {"epochs": 1},
        )
    seed = args.seed if args.seed is not None else 0
    same = harness.verify_determinism(spec, seed, args.root)
    print(json.dumps({"deterministic": same, "seed": seed}))
    return 0 if same else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="swat-gda", description=__doc__)
    parser.add_argument("--root", default="runs", help="artifact root (streams, pretrain cache, runs, records)")
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--profile", choices=sorted(harness.PROFILES), default="desk")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", help="build and cache a domain stream")
    p.add_argument("--dataset", choices=harness.DATASETS, required=True)
    p.add_argument("--n-domains", type=int, default=6)
    p.add_argument("--given", type=int, default=None)
    p.add_argument("--samples", type=int, default=None)
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("train", help="adapt a model on a prepared stream")
    p.add_argument("--stream", required=True, help="stream directory (contains manifest.json)")
    p.add_argument("--config", help="YAML/JSON with method, train, pretrain sections")
    p.add_argument("--method", choices=harness.METHODS)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("grid", help="run a resumable experiment grid")
    p.add_argument("--config", required=True)
    p.set_defaults(func=cmd_grid)

    p = sub.add_parser("analyze", help="probes on a finished run")
    p.add_argument("what", choices=["a-distance", "export-embeddings"])
    p.add_argument("--run", required=True)
    p.add_argument("--pairs", nargs="*", help="domain position pairs like 0:-1")
    p.add_argument("--pretrained", action="store_true", help="use the source-pretrained encoder")
    p.add_argument("--out")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("report", help="render tables from records.jsonl")
    p.add_argument("--layout", choices=harness.LAYOUTS, default="given_by_K")
    p.add_argument("--dataset")
    p.add_argument("--csv")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("verify", help="check that a run is bit-reproducible")
    p.add_argument("--config", help="ExperimentSpec as YAML/JSON; default is a toy stream")
    p.set_defaults(func=cmd_verify)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    if args.command == "prepare" and args.seed is None:
        args.seed = 0
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
