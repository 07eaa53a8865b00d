"""Pool construction, MoT training/evaluation runs and the desk-scale ablations."""

from __future__ import annotations

import csv
import hashlib
import io
import itertools
import json
import logging
import os
import time
import traceback
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .. import numerics as nx
from ..checkpoint import load_experts, save_experts, save_model
from ..expert import ExpertBackbone, ExpertConfig, pretrain_specialist
from ..inference import generate_batch
from ..model import MoTConfig, MoTModel
from ..training import LossWeights, TrainConfig, train
from .config import OUTPUT_ROOT_ENV, RunConfig
from .params import model_params_report
from .tasks import TaskData, batchify, exact_match, make_tasks, score

log = logging.getLogger(__name__)

EXPERIMENTS = ("main", "vary-Q", "placement", "small", "no-crossattn", "loss-ablation", "pool-scaling", "dropout")
POOL_CACHE_ENV = "MOT_POOL_CACHE"


# ---------------------------------------------------------------------------
# Data and pool
# ---------------------------------------------------------------------------


def build_tasks(cfg: RunConfig) -> dict[str, TaskData]:
    return make_tasks(cfg.tasks, seed=cfg.data_seed)


def specialists(cfg: RunConfig) -> dict[str, set[int]]:
    out: dict[str, set[int]] = {t.kind: set() for t in cfg.tasks}
    for m, e in enumerate(cfg.pool):
        out[e.task].add(m)
    return out


def _pool_cache_path(cfg: RunConfig) -> Path:
    root = os.environ.get(POOL_CACHE_ENV) or Path(os.environ.get(OUTPUT_ROOT_ENV, "runs")) / "pools"
    key = hashlib.sha256(json.dumps(cfg.pool_key(), sort_keys=True).encode()).hexdigest()[:16]
    return Path(root) / f"pool-{key}.safetensors"


def build_pool(cfg: RunConfig, tasks: dict[str, TaskData] | None = None, use_cache: bool = True,
               log_dir: Path | None = None) -> list[ExpertBackbone]:
    """Pretrain one specialist per pool entry (or load the cached pool)."""
    path = _pool_cache_path(cfg)
    if use_cache and path.exists():
        experts, meta = load_experts(path)
        for e, rec in zip(experts, meta.get("pretrain_logs", [])):
            e.pretrain_log = rec
        log.info("loaded cached pool %s", path)
        return experts
    tasks = tasks or build_tasks(cfg)
    experts = []
    for m, spec in enumerate(cfg.pool):
        task = tasks[spec.task]
        if spec.task == "fact-lookup":
            task = task.for_table(spec.table)
        seed = spec.seed if spec.seed is not None else 1000 + m
        ecfg = ExpertConfig(m, spec.layers, spec.hidden, spec.heads, vocab=cfg.vocab)
        lp = log_dir / f"pretrain-expert{m}.jsonl" if log_dir else None
        pc = cfg.pretrain
        t0 = time.time()
        e = pretrain_specialist(ExpertBackbone(ecfg, seed=seed), task, steps=pc.steps, batch_size=pc.batch_size,
                                lr=pc.lr, seed=seed, eval_every=pc.eval_every, target=pc.target, log_path=lp)
        log.info("expert %d (%s) pretrained in %.1fs: %s", m, spec.task, time.time() - t0, e.pretrain_log[-1])
        experts.append(e)
    if use_cache:
        save_experts(path, experts, {"pool_key": cfg.pool_key(),
                                     "pretrain_logs": [e.pretrain_log for e in experts]})
    return experts


def make_sampler(tasks: dict[str, TaskData], mix: dict[str, float] | None = None):
    """``sampler(rng, B)``: each row picks a task by ``mix`` weight, then a training example."""
    kinds = list(tasks)
    w = np.array([(mix or {}).get(k, 0.0 if mix else 1.0) for k in kinds], dtype=float)
    if w.sum() <= 0:
        raise ValueError("task mix has no positive weight")
    w /= w.sum()

    def sample(rng: np.random.Generator, B: int):
        ks = rng.choice(len(kinds), size=B, p=w)
        exs = []
        for k in ks:
            pool = tasks[kinds[k]].train
            exs.append(pool[int(rng.integers(len(pool)))])
        return batchify(exs)

    return sample


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------


@dataclass
class EvalResult:
    accuracy: dict[str, float]
    routing: dict[str, float]  # a specialist of the query's task is among the active experts
    primary_routing: dict[str, float]  # the primary itself is a specialist
    frequencies: list[float]

    @property
    def mean_accuracy(self) -> float:
        return float(np.mean(list(self.accuracy.values())))

    @property
    def routing_accuracy(self) -> float:
        return float(np.mean(list(self.routing.values())))

    def record(self) -> dict:
        return {"accuracy": self.accuracy, "mean_accuracy": self.mean_accuracy, "routing": self.routing,
                "routing_accuracy": self.routing_accuracy, "primary_routing": self.primary_routing,
                "frequencies": self.frequencies}


def evaluate(model: MoTModel, tasks: dict[str, TaskData], spec_map: dict[str, set[int]], max_per_task: int = 200,
             dead=None, K: int | None = None) -> EvalResult:
    """Held-out exact match (greedy MoT generation) and routing accuracy per task."""
    acc, rout, prim = {}, {}, {}
    counts = np.zeros(model.M)
    total = 0
    for kind, data in tasks.items():
        exs = data.heldout[:max_per_task]
        prompts = [ex.prompt for ex in exs]
        preds = generate_batch(model, prompts, [len(ex.answer) for ex in exs], K=K, dead=dead)
        acc[kind] = float(np.mean([score(p, ex) for p, ex in zip(preds, exs)])) if exs else 0.0
        with nx.no_grad():
            d = model.route(prompts, dead=set(dead) if dead else None, K=K)
        want = spec_map.get(kind, set())
        rout[kind] = float(np.mean([bool(want & set(row.tolist())) for row in d.active]))
        prim[kind] = float(np.mean([int(p) in want for p in d.primary]))
        counts += d.active_mask.sum(axis=0)
        total += len(exs)
    return EvalResult(acc, rout, prim, (counts / max(total, 1)).tolist())


def specialist_accuracy(experts: list[ExpertBackbone], tasks: dict[str, TaskData], cfg: RunConfig,
                        max_per_task: int = 200) -> list[float]:
    """Each specialist alone on its own task (own-table view for fact lookup)."""
    out = []
    for spec, e in zip(cfg.pool, experts):
        t = tasks[spec.task]
        if spec.task == "fact-lookup":
            t = t.for_table(spec.table)
        out.append(exact_match(e, t.heldout[:max_per_task]))
    return out


# ---------------------------------------------------------------------------
# Sub-runs
# ---------------------------------------------------------------------------


def small_variant(mc: MoTConfig) -> MoTConfig:
    """Fewer stacks, half the shared width, a quarter of the router width."""
    return replace(mc, Q=max(1, round(0.75 * mc.Q)), d_s=max(mc.heads, mc.d_s // 2), h_r=max(4, mc.h_r // 4))


def train_and_evaluate(cfg: RunConfig, experts: list[ExpertBackbone], tasks: dict[str, TaskData], label: str,
                       mot: MoTConfig | None = None, weights: LossWeights | None = None, out_dir: Path | None = None,
                       keep_model: bool = False) -> dict:
    mot = mot or cfg.mot
    tc = cfg.train if weights is None else replace(cfg.train, weights=weights)
    model = MoTModel(experts, mot)
    params = model_params_report(model).record()
    t0 = time.time()
    log_path = out_dir / f"{label}.train.jsonl" if out_dir else None
    hist = train(model, make_sampler(tasks, cfg.mix), tc, log_path)
    t1 = time.time()
    res = evaluate(model, tasks, specialists(cfg), cfg.eval_max)
    t2 = time.time()
    if out_dir:
        save_model(out_dir / f"{label}.safetensors", model, {"label": label})
    every = max(1, tc.log_every)
    row = {
        "label": label, "mot": asdict(mot), "weights": asdict(tc.weights), **res.record(),
        "params": params,
        "loss_curve": [round(h.total, 6) for h in hist[::every]],
        "f_trajectory": [h.f for h in hist[::every]],
        "train_seconds": round(t1 - t0, 3), "eval_seconds": round(t2 - t1, 3),
        "log": str(log_path) if log_path else None,
    }
    if keep_model:
        row["_model"] = model
    return row


@dataclass
class ExperimentReport:
    experiment: str
    config: dict
    rows: list[dict] = field(default_factory=list)
    seconds: float = 0.0

    def to_jsonl(self) -> str:
        head = {"kind": "header", "experiment": self.experiment, "config": self.config, "seconds": self.seconds}
        lines = [json.dumps(head)] + [json.dumps({"kind": "row", **r}) for r in self.rows]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_jsonl(cls, text: str) -> ExperimentReport:
        recs = [json.loads(line) for line in text.splitlines() if line.strip()]
        head = recs[0]
        if head.get("kind") != "header":
            raise ValueError("report does not start with a header record")
        rows = [{k: v for k, v in r.items() if k != "kind"} for r in recs[1:]]
        return cls(head["experiment"], head["config"], rows, head["seconds"])

    def write(self, out_dir: Path) -> Path:
        out_dir.mkdir(parents=True, exist_ok=True)
        path = out_dir / f"{self.experiment}.report.jsonl"
        path.write_text(self.to_jsonl())
        (out_dir / f"{self.experiment}.summary.txt").write_text(self.summary_table())
        (out_dir / f"{self.experiment}.csv").write_text(self.csv())
        return path

    def _flat(self) -> list[dict]:
        flat = []
        for r in self.rows:
            d = {"label": r.get("label")}
            if "error" in r:
                d["error"] = r["error"].splitlines()[-1]
            for k in ("mean_accuracy", "routing_accuracy"):
                if k in r:
                    d[k] = r[k]
            for task, v in r.get("accuracy", {}).items():
                d[f"acc:{task}"] = v
            if "params" in r:
                d["trainable"] = r["params"]["total"]
            flat.append(d)
        return flat

    def csv(self) -> str:
        flat = self._flat()
        cols = list(dict.fromkeys(k for d in flat for k in d))
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=cols)
        w.writeheader()
        w.writerows(flat)
        return buf.getvalue()

    def summary_table(self) -> str:
        flat = self._flat()
        cols = list(dict.fromkeys(k for d in flat for k in d))
        fmt = lambda v: f"{v:.3f}" if isinstance(v, float) else str(v)  # noqa: E731
        cells = [[fmt(d.get(c, "")) for c in cols] for d in flat]
        widths = [max([len(c)] + [len(row[i]) for row in cells]) for i, c in enumerate(cols)]
        lines = ["  ".join(c.ljust(w) for c, w in zip(cols, widths))]
        lines.append("  ".join("-" * w for w in widths))
        lines += ["  ".join(v.ljust(w) for v, w in zip(row, widths)) for row in cells]
        return f"{self.experiment}\n" + "\n".join(lines) + "\n"


def _subsets(M: int, k: int, rng: np.random.Generator, cap: int = 8) -> list[tuple[int, ...]]:
    combos = list(itertools.combinations(range(M), k))
    if len(combos) <= cap:
        return combos
    return [combos[i] for i in sorted(rng.choice(len(combos), cap, replace=False))]


def run_experiment(cfg: RunConfig, experiment: str = "main", experts: list[ExpertBackbone] | None = None,
                   tasks: dict[str, TaskData] | None = None, out_dir: Path | None = None,
                   keep_models: bool = False) -> ExperimentReport:
    """Run one desk-scale experiment; failing sub-runs are recorded and the rest continue."""
    if experiment not in EXPERIMENTS:
        raise ValueError(f"unknown experiment {experiment!r}; expected one of {EXPERIMENTS}")
    t_start = time.time()
    out_dir = Path(out_dir) if out_dir else cfg.output_dir / experiment
    out_dir.mkdir(parents=True, exist_ok=True)
    tasks = tasks or build_tasks(cfg)
    experts = experts or build_pool(cfg, tasks, log_dir=out_dir)
    report = ExperimentReport(experiment, cfg.to_dict())
    base = cfg.mot

    def sub(label, keep=False, **kw):
        try:
            row = train_and_evaluate(cfg, experts, tasks, label, out_dir=out_dir, keep_model=keep or keep_models,
                                     **kw)
        except Exception as exc:  # noqa: BLE001 -- recorded, remaining sub-runs continue
            log.exception("sub-run %s failed", label)
            row = {"label": label, "error": "".join(traceback.format_exception(exc))}
        report.rows.append(row)
        return row

    if experiment == "main":
        sub("main")
    elif experiment == "vary-Q":
        for Q in (1, 2, 4):
            sub(f"Q={Q}", mot=replace(base, Q=Q))
    elif experiment == "placement":
        for p in ("shallow", "intermediate", "deep", "uniform"):
            sub(f"placement={p}", mot=replace(base, placement=p))
    elif experiment == "small":
        sub("base")
        sub("small", mot=small_variant(base))
    elif experiment == "no-crossattn":
        sub("full")
        sub("no-crossattn", mot=replace(base, cross_attn=False))
    elif experiment == "loss-ablation":
        w = cfg.train.weights
        d = LossWeights()
        ent, bal, con = w.ent or d.ent, w.bal or d.bal, w.con or d.con
        for label, lw in (("LM", LossWeights(0, 0, 0)), ("+ent", LossWeights(ent, 0, 0)),
                          ("+bal", LossWeights(ent, bal, 0)), ("+con", LossWeights(ent, bal, con))):
            sub(label, weights=lw)
    elif experiment in ("pool-scaling", "dropout"):
        row = sub("full", keep=True)
        model = row.get("_model")
        if model is not None:
            if not keep_models:
                del row["_model"]
            M = model.M
            rng = np.random.default_rng(cfg.seed)
            if experiment == "dropout":
                variants = [(f"without expert {m}", {m}) for m in range(M)]
            else:
                variants = [(f"experts={list(s)}", set(range(M)) - set(s))
                            for k in range(1, M) for s in _subsets(M, k, rng)]
            for label, dead in variants:
                try:
                    res = evaluate(model, tasks, specialists(cfg), cfg.eval_max, dead=dead)
                    report.rows.append({"label": label, "dead": sorted(dead), **res.record()})
                except Exception as exc:  # noqa: BLE001
                    report.rows.append({"label": label, "dead": sorted(dead),
                                        "error": "".join(traceback.format_exception(exc))})
    report.seconds = round(time.time() - t_start, 3)
    persisted = ExperimentReport(report.experiment, report.config,
                                 [{k: v for k, v in r.items() if not k.startswith("_")} for r in report.rows],
                                 report.seconds)
    persisted.write(out_dir)
    return report
