import time

import numpy as np
import pytest

from mot.harness.config import ExpertSpec, PretrainConfig, RunConfig
from mot.harness.experiments import POOL_CACHE_ENV, build_pool, build_tasks
from mot.harness.tasks import SyntheticTaskSpec
from mot.model import MoTConfig
from mot.training import TrainConfig


ACCEPTANCE: dict[int, str] = {}
POOL_SECONDS: dict[str, float] = {}


def criterion(n: int, ok: bool, detail: str) -> None:
    """Record one acceptance line; all of them are printed at the end of the run."""
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {n:>2}: {detail}"
    ACCEPTANCE[n] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.write_sep("=", "acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])


def timed_pool(name: str, cfg: RunConfig, tasks):
    """Build (or load) a pool and remember how long it took."""
    t0 = time.time()
    experts = build_pool(cfg, tasks)
    POOL_SECONDS.setdefault(name, time.time() - t0)
    return experts


@pytest.fixture(scope="session", autouse=True)
def isolated_output(tmp_path_factory):
    """Route every run directory and pool cache of the session into a temp dir."""
    mp = pytest.MonkeyPatch()
    root = tmp_path_factory.mktemp("runs")
    mp.setenv("MOT_OUTPUT_ROOT", str(root))
    mp.setenv(POOL_CACHE_ENV, str(root / "pools"))
    yield root
    mp.undo()


def main_config(**kw) -> RunConfig:
    """Copy / reverse / modular arithmetic, one specialist each."""
    base = dict(
        tasks=[SyntheticTaskSpec("copy"), SyntheticTaskSpec("reverse"),
               SyntheticTaskSpec("modular-arithmetic", shifts=3)],
        pool=[ExpertSpec("copy", 4, 32), ExpertSpec("reverse", 4, 48), ExpertSpec("modular-arithmetic", 4, 48)],
        mot=MoTConfig(Q=2, d_s=32, heads=8, K=2),
        train=TrainConfig(steps=300),
        pretrain=PretrainConfig(),
    )
    base.update(kw)
    return RunConfig(**base)


@pytest.fixture(scope="session")
def main_setup():
    cfg = main_config()
    tasks = build_tasks(cfg)
    return cfg, tasks, timed_pool("main", cfg, tasks)


def tiny_experts(dims=(8, 12), layers=(2, 3), vocab=16, max_seq=12, seed=0, dtype=np.float64, scale=1.0):
    """Random (untrained) backbones; ``scale`` inflates weights so outputs are far from uniform."""
    from mot.expert import ExpertBackbone, ExpertConfig

    out = []
    for m, (d, L) in enumerate(zip(dims, layers)):
        e = ExpertBackbone(ExpertConfig(m, L, d, heads=2, vocab=vocab, max_seq=max_seq), seed=seed + m, dtype=dtype)
        if scale != 1.0:
            rng = np.random.default_rng(seed + 100 + m)
            for k, p in e.params.items():
                if not k.endswith((".g", ".b")):
                    p.data[...] = rng.normal(0, scale, p.shape)
        out.append(e.freeze())
    return out
