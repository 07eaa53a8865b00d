"""Run configuration: pool composition, MoT shape, loss weights, optimizer, seeds."""

from __future__ import annotations

import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import yaml

from ..model import MoTConfig
from ..training import LossWeights, TrainConfig
from .tasks import TASK_KINDS, SyntheticTaskSpec

OUTPUT_ROOT_ENV = "MOT_OUTPUT_ROOT"
# bump when specialist pretraining changes meaning, to invalidate cached pools
PRETRAIN_FORMAT = 2


@dataclass
class ExpertSpec:
    task: str
    layers: int = 4
    hidden: int = 32
    heads: int = 4
    table: int | None = None  # fact-lookup: which table this expert memorises
    seed: int | None = None


@dataclass
class PretrainConfig:
    steps: int = 3000
    batch_size: int = 32
    lr: float = 3e-3
    target: float = 0.97
    eval_every: int = 250


@dataclass
class RunConfig:
    tasks: list[SyntheticTaskSpec]
    pool: list[ExpertSpec]
    mot: MoTConfig = field(default_factory=MoTConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    seed: int = 0
    data_seed: int = 0
    vocab: int = 64
    mix: dict[str, float] | None = None  # task sampling weights during MoT training
    eval_max: int = 200
    gen_max_len: int = 16
    output: str = "run"

    def __post_init__(self):
        kinds = [t.kind for t in self.tasks]
        if len(set(kinds)) != len(kinds):
            raise ValueError(f"duplicate task kinds in {kinds}")
        for i, e in enumerate(self.pool):
            if e.task not in kinds:
                raise ValueError(f"expert {i} is assigned undeclared task {e.task!r}")
            if e.task == "fact-lookup" and e.table is None:
                raise ValueError(f"fact-lookup expert {i} needs a table index")
        for t in self.tasks:
            top = max(t.vocab_slice[1], t.key_slice[1], t.value_slice[1]) if t.kind == "fact-lookup" \
                else t.vocab_slice[1]
            if top > self.vocab:
                raise ValueError(f"task {t.kind!r} uses tokens up to {top - 1} but vocab is {self.vocab}")
        if self.mix:
            unknown = set(self.mix) - set(kinds)
            if unknown:
                raise ValueError(f"mix references undeclared tasks {sorted(unknown)}")
        if not 1 <= self.mot.K <= len(self.pool):
            raise ValueError(f"K={self.mot.K} outside 1..{len(self.pool)}")

    @property
    def output_dir(self) -> Path:
        return Path(os.environ.get(OUTPUT_ROOT_ENV, "runs")) / self.output

    def pool_key(self) -> dict:
        """Everything the pretrained pool depends on (for caching)."""
        return {"tasks": [asdict(t) for t in self.tasks], "pool": [asdict(e) for e in self.pool],
                "pretrain": asdict(self.pretrain), "data_seed": self.data_seed, "vocab": self.vocab,
                "format": PRETRAIN_FORMAT}

    def to_dict(self) -> dict:
        d = asdict(self)
        d["tasks"] = [_task_dict(t) for t in self.tasks]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> RunConfig:
        d = dict(d)
        tasks = [_task_spec(t) for t in d.pop("tasks")]
        pool = [ExpertSpec(**e) for e in d.pop("pool")]
        mot = MoTConfig(**d.pop("mot", {}))
        tr = dict(d.pop("train", {}))
        weights = LossWeights(**tr.pop("weights", {}))
        train = TrainConfig(**tr, weights=weights)
        pre = PretrainConfig(**d.pop("pretrain", {}))
        known = {f.name for f in fields(cls)}
        extra = set(d) - known
        if extra:
            raise ValueError(f"unknown config keys {sorted(extra)}")
        return cls(tasks=tasks, pool=pool, mot=mot, train=train, pretrain=pre, **d)


def _task_spec(t: dict | str) -> SyntheticTaskSpec:
    if isinstance(t, str):
        t = {"kind": t}
    if t.get("kind") not in TASK_KINDS:
        raise ValueError(f"unknown task kind {t.get('kind')!r}")
    t = {k: tuple(v) if isinstance(v, list) else v for k, v in t.items()}
    return SyntheticTaskSpec(**t)


def _task_dict(t: SyntheticTaskSpec) -> dict:
    return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(t).items()}


def load_config(path) -> RunConfig:
    with open(path) as fh:
        return RunConfig.from_dict(yaml.safe_load(fh))


def dump_config(cfg: RunConfig, path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        yaml.safe_dump(cfg.to_dict(), fh, sort_keys=False)
