"""``moexda`` command line entry point.

Exit codes: 0 success, 1 failed gradient check, 2 invalid config or missing
manifest, 3 non-finite training loss, 4 I/O error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import bias, data, edges, gradcheck, training
from .config import ConfigError, ExperimentConfig, config_from_dict, config_to_dict, load_config
from .vit import TwoStreamViT, load_checkpoint

log = logging.getLogger("moexda")

EXIT_GRADCHECK = 1
EXIT_CONFIG = 2
EXIT_DIVERGED = 3
EXIT_IO = 4


def build_model(cfg: ExperimentConfig) -> TwoStreamViT:
    training.seed_everything(cfg.train.seed)
    return TwoStreamViT(cfg.vit, cfg.moex)


def load_model(path: str | Path) -> tuple[TwoStreamViT, ExperimentConfig]:
    state, raw = load_checkpoint(path)
    cfg = config_from_dict(raw)
    model = TwoStreamViT(cfg.vit, cfg.moex)
    model.load_state_dict(state)
    model.eval()
    return model, cfg


def cmd_stats(args, cfg: ExperimentConfig) -> int:
    corpus = Path(args.corpus) if args.corpus else cfg.data.train_dir
    if not (corpus / data.MANIFEST).is_file():
        print(f"error: manifest not found: {corpus / data.MANIFEST}", file=sys.stderr)
        return EXIT_CONFIG
    out = Path(args.out) if args.out else corpus / "edge_stats.json"
    _, acc = edges.compute_corpus_stats(data.iter_corpus(corpus), return_accumulator=True)
    record = edges.write_stats(out, acc)
    print(f"mean={record['mean'][0]:.6f} std={record['std'][0]:.6f} pixels={record['num_pixels']}")
    return 0


def cmd_gen_data(args, cfg: ExperimentConfig) -> int:
    for split, root in (("train", cfg.data.train_dir), ("test", cfg.data.test_dir)):
        rows = data.generate_dataset(cfg.data.scene_spec(split), root)
        print(f"{split}: {len(rows)} videos -> {root}")
    return 0


def cmd_train(args, cfg: ExperimentConfig) -> int:
    model = build_model(cfg)
    clips, labels, _ = data.load_split(cfg.data.train_dir, cfg.train.frames_per_clip)
    history = training.train(model, (clips, labels), cfg.train, cfg.loss,
                             config_record=config_to_dict(cfg))
    if history:
        last = history[-1]
        print(f"epoch {last['epoch']}: loss {last['loss_total']:.4f} "
              f"acc_rgb {last['acc_rgb']:.3f} acc_edge {last['acc_edge']:.3f}")
    print(f"checkpoint -> {cfg.train.checkpoint_path}")
    return 0


def _checkpoint_path(args, cfg: ExperimentConfig) -> str:
    return args.checkpoint or cfg.train.checkpoint_path


def cmd_eval(args, cfg: ExperimentConfig) -> int:
    model, _ = load_model(_checkpoint_path(args, cfg))
    acc = bias.top1_accuracy(bias.vit_predictor(model), cfg.data.test_dir,
                             cfg.train.frames_per_clip, cfg.eval.batch_size)
    print(json.dumps({f"top1_{k}": v for k, v in acc.items()}, sort_keys=True))
    return 0


def cmd_bias_eval(args, cfg: ExperimentConfig) -> int:
    model, model_cfg = load_model(_checkpoint_path(args, cfg))
    for p in (cfg.eval.report_path, cfg.eval.log_path):
        Path(p).parent.mkdir(parents=True, exist_ok=True)
    report = bias.evaluate(
        bias.vit_predictor(model), cfg.data.test_dir, cfg.train.frames_per_clip,
        cfg.eval.batch_size, fingerprint=model_cfg.fingerprint(), log_path=cfg.eval.log_path,
    )
    report.save(cfg.eval.report_path)
    print(bias.compare_runs([report]), end="")
    print(f"report -> {cfg.eval.report_path}")
    return 0


def cmd_gradcheck(args, cfg: ExperimentConfig) -> int:
    results = [gradcheck.check_moexda(c) for c in gradcheck.all_moex_configs()]
    for c in gradcheck.all_moex_configs(layers=(1, 2)):
        model_results = gradcheck.check_model(c, max_coords=None if args.full else 8)
        worst = max(model_results, key=lambda r: r.rel_error)
        results.append(gradcheck.GradCheckResult(
            f"model {gradcheck.config_name(c)} (worst: {worst.name.split()[-1]})",
            worst.rel_error, worst.tol,
        ))
    failed = 0
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        failed += not r.passed
        print(f"{status} {r.name}: rel_err={r.rel_error:.3e} (tol {r.tol:g})")
    return EXIT_GRADCHECK if failed else 0


def cmd_compare(args, cfg: ExperimentConfig) -> int:
    reports = [bias.MetricsReport.load(p) for p in args.reports]
    print(bias.compare_runs(reports, args.out), end="")
    return 0


COMMANDS = {
    "stats": cmd_stats,
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "bias-eval": cmd_bias_eval,
    "gradcheck": cmd_gradcheck,
    "compare": cmd_compare,
}


def make_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="experiment config JSON")
    common.add_argument("--set", dest="overrides", action="append", default=[],
                        metavar="PATH=VALUE", help="override a config key (repeatable)")
    common.add_argument("--seed", type=int, help="override train.seed")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="moexda", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("stats", parents=[common], help="edge statistics of a frame corpus")
    p.add_argument("--corpus", help="corpus directory (default: training split)")
    p.add_argument("--out", help="stats JSON path (default: <corpus>/edge_stats.json)")
    sub.add_parser("gen-data", parents=[common], help="render synthetic train/test splits")
    sub.add_parser("train", parents=[common], help="train the two-stream model")
    for name in ("eval", "bias-eval"):
        p = sub.add_parser(name, parents=[common])
        p.add_argument("--checkpoint", help="checkpoint path (default: train.checkpoint_path)")
    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient checks")
    p.add_argument("--full", action="store_true", help="check every parameter entry")
    p = sub.add_parser("compare", parents=[common], help="tabulate bias reports as CSV")
    p.add_argument("reports", nargs="+")
    p.add_argument("--out", help="CSV output path")
    return parser


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, args.overrides, args.seed)
        return COMMANDS[args.command](args, cfg)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except training.TrainingDiverged as err:
        print(f"training diverged: {err}", file=sys.stderr)
        return EXIT_DIVERGED
    except OSError as err:
        print(f"I/O error: {err}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
