"""
Command-line entry point.

    batle run --config exp.json --out results/ [--jobs N] [--save-checkpoints]
    batle gen-gwas [--config gwas.json] --out data/gwas
    batle gen-hcmnist --mnist data/mnist [--config hcmnist.json] --out data/hcmnist
    batle aipw --data target.csv [--folds 2] [--seed 0]
    batle fetch {ihdp,mnist} --out data/<name>
    batle serve [--checkpoint model.json] [--port 8000]

Exit codes: 0 success, 1 other error, 2 configuration error, 3 at least one run failed.
"""
import argparse
import asyncio
import json
import logging
import os
import sys
from pathlib import Path
from typing import List, Optional, Type, TypeVar

from pydantic import BaseModel, ValidationError

from batle.config import GwasConfig, HcmnistConfig
from batle.errors import BatleError, ConfigError
from batle.services.baselines import aipw_estimate
from batle.services.datasets import read_domain_csv, write_domain_csv
from batle.services.estimation import mae
from batle.services.fetcher import fetch_dataset
from batle.services.generators import generate_hcmnist, simulate_gwas
from batle.services.harness import EXIT_CONFIG, EXIT_OK, parse_config, run_experiment
from batle.services.idx import load_mnist
from batle.services.numeric import RngStream

logger = logging.getLogger("batle")

EXIT_ERROR = 1
Model = TypeVar("Model", bound=BaseModel)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="batle", description="ATE estimation with target/source domain transfer")
    parser.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    commands = parser.add_subparsers(dest="command", required=True)

    run = commands.add_parser("run", help="run an experiment sweep")
    run.add_argument("--config", type=Path, required=True)
    run.add_argument("--out", type=Path, required=True)
    run.add_argument("--jobs", type=int, default=1)
    run.add_argument("--save-checkpoints", action="store_true")

    gwas = commands.add_parser("gen-gwas", help="generate a semi-synthetic GWAS dataset")
    gwas.add_argument("--config", type=Path)
    gwas.add_argument("--out", type=Path, required=True)

    hcmnist = commands.add_parser("gen-hcmnist", help="generate the HCMNIST target/source datasets")
    hcmnist.add_argument("--mnist", type=Path, required=True)
    hcmnist.add_argument("--config", type=Path)
    hcmnist.add_argument("--out", type=Path, required=True)
    hcmnist.add_argument("--split", default="train", choices=["train", "test"])

    aipw = commands.add_parser("aipw", help="AIPW estimate on a target-domain CSV")
    aipw.add_argument("--data", type=Path, required=True)
    aipw.add_argument("--folds", type=int, default=2)
    aipw.add_argument("--seed", type=int, default=0)

    fetch = commands.add_parser("fetch", help="download a benchmark dataset")
    fetch.add_argument("dataset", choices=["ihdp", "mnist"])
    fetch.add_argument("--out", type=Path, required=True)
    fetch.add_argument("--replications", type=int, default=10)

    serve = commands.add_parser("serve", help="serve a checkpoint over HTTP")
    serve.add_argument("--checkpoint", type=Path)
    serve.add_argument("--host", default="0.0.0.0")
    serve.add_argument("--port", type=int, default=8000)
    return parser


def load_model(path: Optional[Path], model: Type[Model]) -> Model:
    if path is None:
        return model()
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        return model.model_validate(json.loads(path.read_text()))
    except (json.JSONDecodeError, ValidationError) as e:
        raise ConfigError(f"{path}: {e}") from e


def cmd_run(args: argparse.Namespace) -> int:
    config = parse_config(args.config)
    result = run_experiment(config, out_dir=args.out, jobs=args.jobs, save_checkpoints=args.save_checkpoints)
    print(result.aggregate_frame().to_string(index=False))
    return result.exit_code


def cmd_gen_gwas(args: argparse.Namespace) -> int:
    config = load_model(args.config, GwasConfig)
    simulation = simulate_gwas(config, RngStream(config.seed))
    path = write_domain_csv(simulation.dataset, args.out / "gwas_target.csv", config.model_dump(mode="json"))
    print(json.dumps({"target": str(path), "true_ate": simulation.dataset.ground_truth.true_ate}))
    return EXIT_OK


def cmd_gen_hcmnist(args: argparse.Namespace) -> int:
    config = load_model(args.config, HcmnistConfig)
    target, source = generate_hcmnist(load_mnist(args.mnist, args.split), config, RngStream(config.seed))
    meta = config.model_dump(mode="json")
    paths = {
        "target": str(write_domain_csv(target, args.out / "hcmnist_target.csv", meta)),
        "source": str(write_domain_csv(source, args.out / "hcmnist_source.csv", meta)),
    }
    print(json.dumps({**paths, "true_ate": target.ground_truth.true_ate}))
    return EXIT_OK


def cmd_aipw(args: argparse.Namespace) -> int:
    data = read_domain_csv(args.data)
    if not data.is_labeled:
        raise ConfigError(f"{args.data} holds unlabeled source rows; AIPW needs a target-domain file")
    estimate = aipw_estimate(data.covariates, data.treatments, data.outcomes, folds=args.folds, rng=RngStream(args.seed))
    report = {"tau_hat": estimate.tau_hat, "n": estimate.n, "folds": args.folds}
    if data.ground_truth is not None:
        report["tau_true"] = data.ground_truth.true_ate
        report["mae"] = mae(estimate.tau_hat, data.ground_truth.true_ate)
    print(json.dumps(report))
    return EXIT_OK


def cmd_fetch(args: argparse.Namespace) -> int:
    paths = asyncio.run(fetch_dataset(args.dataset, args.out, args.replications))
    for path in paths:
        print(path)
    return EXIT_OK


def cmd_serve(args: argparse.Namespace) -> int:
    import uvicorn

    if args.checkpoint is not None:
        os.environ["BATLE_CHECKPOINT"] = str(args.checkpoint)
    uvicorn.run("batle.main:app", host=args.host, port=args.port)
    return EXIT_OK


COMMANDS = {
    "run": cmd_run,
    "gen-gwas": cmd_gen_gwas,
    "gen-hcmnist": cmd_gen_hcmnist,
    "aipw": cmd_aipw,
    "fetch": cmd_fetch,
    "serve": cmd_serve,
}


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=args.log_level, format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except ConfigError as e:
        logger.error("Configuration error: %s", e)
        return EXIT_CONFIG
    except BatleError as e:
        logger.error("%s: %s", type(e).__name__, e)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
