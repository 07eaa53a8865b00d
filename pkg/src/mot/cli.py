"""Command line entry point: ``mot <subcommand> <config> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .checkpoint import load_model, save_experts
from .harness.config import RunConfig, dump_config, load_config
from .harness.experiments import (EXPERIMENTS, ExperimentReport, build_pool, build_tasks, evaluate, run_experiment,
                                  specialist_accuracy, specialists)
from .harness.params import params_report
from .inference import generate

log = logging.getLogger("mot")

TRAIN_DIR = "train"
MODEL_FILE = "main.safetensors"


def _emit(records: list[dict], table: str) -> None:
    for r in records:
        print(json.dumps(r))
    print(table, end="")


def _default_checkpoint(cfg: RunConfig) -> Path:
    return cfg.output_dir / TRAIN_DIR / MODEL_FILE


def cmd_pretrain(cfg: RunConfig, args) -> int:
    out = cfg.output_dir
    out.mkdir(parents=True, exist_ok=True)
    tasks = build_tasks(cfg)
    experts = build_pool(cfg, tasks, log_dir=out)
    save_experts(out / "experts.safetensors", experts, {"pool_key": cfg.pool_key()})
    accs = specialist_accuracy(experts, tasks, cfg, cfg.eval_max)
    rows = [{"label": f"expert {m}", "task": spec.task, "table": spec.table, "layers": spec.layers,
             "hidden": spec.hidden, "own_task_accuracy": a}
            for m, (spec, a) in enumerate(zip(cfg.pool, accs))]
    rep = ExperimentReport("pretrain-experts", cfg.to_dict(), rows)
    rep.write(out)
    _emit(rows, "\n".join(f"expert {r['label'][7:]:>3}  {r['task']:<20} acc {r['own_task_accuracy']:.3f}"
                          for r in rows) + "\n")
    return 0


def _run(cfg: RunConfig, experiment: str, out_dir: Path) -> int:
    dump_config(cfg, out_dir / "config.yaml")
    rep = run_experiment(cfg, experiment, out_dir=out_dir)
    rows = [{k: v for k, v in r.items() if not k.startswith("_")} for r in rep.rows]
    _emit(rows, rep.summary_table())
    return 1 if any("error" in r for r in rows) else 0


def cmd_train(cfg: RunConfig, args) -> int:
    return _run(cfg, "main", cfg.output_dir / TRAIN_DIR)


def cmd_ablate(cfg: RunConfig, args) -> int:
    return _run(cfg, args.experiment, cfg.output_dir / args.experiment)


def _load(cfg: RunConfig, checkpoint: str | None):
    path = Path(checkpoint) if checkpoint else _default_checkpoint(cfg)
    if not path.exists():
        raise SystemExit(f"checkpoint {path} not found; run `mot train` first or pass --checkpoint")
    model, _ = load_model(path)
    return model


def cmd_generate(cfg: RunConfig, args) -> int:
    model = _load(cfg, args.checkpoint)
    prompt = [int(t) for t in args.prompt.replace(",", " ").split()]
    dead = set(args.drop_expert or [])
    stream = sys.stdout

    def show(tok: int) -> None:
        stream.write(f"{tok} ")
        stream.flush()

    state = generate(model, prompt, max_len=args.max_len, dead=dead, temperature=args.temperature,
                     top_p=args.top_p, seed=cfg.seed, on_token=show, return_state=True)
    stream.write("\n")
    print(json.dumps({"prompt": prompt, "tokens": state.y, "active": state.active, "primary": state.primary,
                      "dropped": sorted(dead)}))
    return 0


def cmd_eval(cfg: RunConfig, args) -> int:
    model = _load(cfg, args.checkpoint)
    tasks = build_tasks(cfg)
    res = evaluate(model, tasks, specialists(cfg), cfg.eval_max, dead=set(args.drop_expert or []) or None)
    rep = ExperimentReport("eval", cfg.to_dict(), [{"label": "eval", "checkpoint": str(args.checkpoint),
                                                    **res.record()}])
    rep.write(cfg.output_dir / "eval")
    _emit(rep.rows, rep.summary_table())
    return 0


def cmd_params(cfg: RunConfig, args) -> int:
    m = cfg.mot
    dims = [e.hidden for e in cfg.pool]
    rep = params_report(dims, m.Q, m.d_s, m.d_z, m.h_r, m.cross_attn, heads=m.heads)
    rec = {"label": "params", "dims": dims, **rep.record()}
    table = "".join(f"{k:<7} {rec[k]:>10}\n" for k in ("router", "proj", "attn", "total"))
    _emit([rec], table)
    return 0


COMMANDS = {"pretrain-experts": cmd_pretrain, "train": cmd_train, "generate": cmd_generate, "eval": cmd_eval,
            "params": cmd_params, "ablate": cmd_ablate}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mot", description="Desk-scale mixture of thoughts over frozen toy experts.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("config", help="YAML run configuration")
        if name in ("generate", "eval"):
            sp.add_argument("--checkpoint", help="trained model (default: <output>/train/main.safetensors)")
            sp.add_argument("--drop-expert", type=int, action="append", metavar="ID",
                            help="treat this expert as unavailable (repeatable)")
        if name == "generate":
            sp.add_argument("--prompt", required=True, help="token ids, space or comma separated")
            sp.add_argument("--max-len", type=int, default=16)
            sp.add_argument("--temperature", type=float, default=0.0)
            sp.add_argument("--top-p", type=float, default=1.0)
        if name == "ablate":
            sp.add_argument("--experiment", required=True, choices=EXPERIMENTS)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s", stream=sys.stderr)
    cfg = load_config(args.config)
    return COMMANDS[args.command](cfg, args)


if __name__ == "__main__":
    sys.exit(main())
