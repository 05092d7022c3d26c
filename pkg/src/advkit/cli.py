"""Command-line entry points.

Subcommands: train-zoo, attack, score, serve-annotations, aggregate, report,
and run (full attack + score pipeline from one config file).
"""

from __future__ import annotations

import argparse
import json
import sys

from advkit.pipeline import METHODS, RunConfig, combined_report, run_pipeline


def _cmd_train_zoo(args):
    from advkit.zoo import train_zoo

    manifest = train_zoo(args.out, seed=args.seed, epochs=args.epochs,
                         n_train=args.n_train, image_size=args.image_size)
    print(json.dumps({"out": args.out, "models": [m["model_id"] for m in manifest["models"]],
                      "seed": manifest["seed"]}, indent=2))


def _cmd_attack(args):
    import dataclasses

    if args.config:
        cfg = RunConfig.from_yaml(args.config, out_dir=args.out,
                                  data_dir=args.data, zoo_dir=args.zoo)
        if args.method and args.method != cfg.method:
            cfg = dataclasses.replace(cfg, method=args.method)
    else:
        if not args.method:
            raise SystemExit("attack requires --method or --config")
        from advkit.data import AttackConfig

        presets = {
            "tdmi": AttackConfig.tdmi_default,
            "eps-search": AttackConfig.tdmi_default,
            "perceptual": AttackConfig.perceptual_default,
            "rdti": AttackConfig.rdti_default,
            "rotation": AttackConfig.rotation_default,
            "frequency": AttackConfig.tdmi_default,
        }
        cfg = RunConfig(method=args.method, attack=presets[args.method](),
                        zoo_dir=args.zoo, out_dir=args.out, data_dir=args.data)
    report, artifacts = run_pipeline(cfg)
    print(json.dumps({"config_hash": artifacts["config_hash"],
                      "adv_dir": artifacts["adv_dir"],
                      "s_sub": report.s_sub, "asr": report.asr}, indent=2))


def _cmd_score(args):
    from advkit.data import load_dataset
    from advkit.scoring import score_batches
    from advkit.zoo import load_zoo
    import os

    zoo = load_zoo(args.zoo)
    clean = load_dataset(args.clean, os.path.join(args.clean, "manifest.csv"))
    adv = load_dataset(args.adv, os.path.join(args.adv, "manifest.csv"))
    target = zoo.models[args.target_id or zoo.meta["target_id"]]
    report = score_batches(target, zoo.defense, zoo.fid_extractor,
                           zoo.lpips_extractor, clean, adv)
    print(report.to_json())


def _cmd_serve(args):
    from advkit.service import serve_annotations

    serve_annotations(args.store, host=args.host, port=args.port)


def _cmd_aggregate(args):
    from advkit.annotations import read_annotation_log
    from advkit.scoring import aggregate_records

    records = read_annotation_log(args.log)
    success = {}
    asr = None
    if args.tasks:
        with open(args.tasks, encoding="utf-8") as fh:
            meta = json.load(fh)
        success = {t["image_id"]: t["attacked_successfully"] for t in meta["tasks"]}
        asr = meta["asr"]
    else:
        # without task metadata every annotated image counts as a success
        success = {rec.image_id: True for rec in records}
    report = aggregate_records(records, success, asr=asr)
    print(json.dumps(report.to_dict(), indent=2))


def _cmd_report(args):
    print(json.dumps(combined_report(args.run), indent=2))


def _cmd_run(args):
    cfg = RunConfig.from_yaml(args.config, out_dir=args.out,
                              data_dir=args.data, zoo_dir=args.zoo)
    report, artifacts = run_pipeline(cfg)
    print(json.dumps({"config_hash": artifacts["config_hash"],
                      "out_dir": artifacts["out_dir"],
                      "score": report.to_dict()}, indent=2))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="advkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train-zoo", help="train all zoo networks deterministically")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--epochs", type=int, default=6)
    p.add_argument("--n-train", type=int, default=4096)
    p.add_argument("--image-size", type=int, default=32)
    p.set_defaults(func=_cmd_train_zoo)

    p = sub.add_parser("attack", help="run one attack and write artifacts")
    p.add_argument("--method", choices=METHODS)
    p.add_argument("--config", help="YAML run config")
    p.add_argument("--data", help="dataset dir with manifest.csv (default: synth fixture)")
    p.add_argument("--out", required=True)
    p.add_argument("--zoo", default="zoo")
    p.set_defaults(func=_cmd_attack)

    p = sub.add_parser("score", help="score an adversarial dir against its clean dir")
    p.add_argument("--clean", required=True)
    p.add_argument("--adv", required=True)
    p.add_argument("--zoo", required=True)
    p.add_argument("--target-id")
    p.set_defaults(func=_cmd_score)

    p = sub.add_parser("serve-annotations", help="serve the annotation HTTP API")
    p.add_argument("--store", required=True)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8750)
    p.set_defaults(func=_cmd_serve)

    p = sub.add_parser("aggregate", help="aggregate an annotation log")
    p.add_argument("--log", required=True)
    p.add_argument("--tasks", help="tasks.json with per-image success flags")
    p.set_defaults(func=_cmd_aggregate)

    p = sub.add_parser("report", help="combined machine + subjective report for a run dir")
    p.add_argument("--run", required=True)
    p.set_defaults(func=_cmd_report)

    p = sub.add_parser("run", help="full pipeline from a YAML config")
    p.add_argument("--config", required=True)
    p.add_argument("--data")
    p.add_argument("--out")
    p.add_argument("--zoo")
    p.set_defaults(func=_cmd_run)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    args.func(args)
    return 0


if __name__ == "__main__":
    sys.exit(main())
