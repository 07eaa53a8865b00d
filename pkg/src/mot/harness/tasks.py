"""Synthetic skill tasks over a shared toy vocabulary."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

PAD, EOS, SEP = 0, 1, 2
MARKERS = {"copy": 3, "reverse": 4, "modular-arithmetic": 5, "fact-lookup": 6}
FIRST_SYMBOL = 8
VOCAB = 64

TASK_KINDS = tuple(MARKERS)


@dataclass(frozen=True)
class SyntheticTaskSpec:
    kind: str
    vocab_slice: tuple[int, int] = (8, 24)
    length: tuple[int, int] = (3, 6)
    n_train: int = 2000
    n_heldout: int = 200
    seed: int = 0
    # modular-arithmetic
    modulus: int = 10
    shifts: int | None = None  # distinct keys drawn from 0..shifts-1 (default: modulus)
    # fact-lookup
    tables: int = 2
    facts_per_table: int = 120
    key_slice: tuple[int, int] = (24, 48)
    value_slice: tuple[int, int] = (48, 64)
    # give every table its own contiguous block of key symbols, so which
    # expert owns a key is visible from the key itself
    partition_keys: bool = True
    # fraction of each table's keys kept out of the training split; held-out
    # queries then involve facts only the owning specialist has seen
    withheld: float = 0.0

    def __post_init__(self):
        if self.kind not in MARKERS:
            raise ValueError(f"unknown task kind {self.kind!r}; expected one of {TASK_KINDS}")
        lo, hi = self.length
        if not 1 <= lo <= hi:
            raise ValueError(f"bad length range {self.length}")
        if not 0.0 <= self.withheld < 1.0:
            raise ValueError(f"withheld fraction must lie in [0, 1), got {self.withheld}")
        if self.shifts is not None and not 1 <= self.shifts <= self.modulus:
            raise ValueError(f"shifts must lie in 1..{self.modulus}")


@dataclass
class Example:
    prompt: list[int]
    answer: list[int]
    # which answer tokens are scored; False marks a slot this learner cannot know
    answer_mask: list[bool] = None
    task: str = ""

    def __post_init__(self):
        if self.answer_mask is None:
            self.answer_mask = [True] * len(self.answer)


@dataclass
class TaskData:
    spec: SyntheticTaskSpec
    train: list[Example]
    heldout: list[Example]
    tables: list[dict[tuple[int, int], int]] = field(default_factory=list)
    # specialist pretraining pool (fact lookup); disjoint from ``heldout``
    pretrain: list[Example] | None = None
    # token range for slots a learner cannot know: during pretraining those
    # slots get a fresh random target from this range, so the learner ends up
    # uncertain there instead of confidently wrong
    unknown_targets: tuple[int, int] | None = None

    def for_table(self, j: int) -> TaskData:
        """View of a fact-lookup task as seen by the holder of table ``j``."""
        if self.spec.kind != "fact-lookup":
            raise ValueError("for_table only applies to fact-lookup tasks")
        keys = self.tables[j]

        def restrict(ex: Example) -> Example:
            k1, k2 = tuple(ex.prompt[1:3]), tuple(ex.prompt[3:5])
            mask = [k1 in keys, k2 in keys, True]
            return Example(ex.prompt, ex.answer, mask, ex.task)

        source = self.pretrain if self.pretrain is not None else self.train
        train = [restrict(e) for e in source if any(restrict(e).answer_mask[:2])]
        held = [restrict(e) for e in self.heldout if any(restrict(e).answer_mask[:2])]
        return TaskData(self.spec, train, held, self.tables, unknown_targets=self.spec.value_slice)


def _payload(rng, spec: SyntheticTaskSpec, lo: int, hi: int) -> list[int]:
    n = int(rng.integers(spec.length[0], spec.length[1] + 1))
    return [int(t) for t in rng.integers(lo, hi, n)]


def _make_example(kind: str, spec: SyntheticTaskSpec, rng) -> Example:
    marker = MARKERS[kind]
    if kind == "copy":
        x = _payload(rng, spec, *spec.vocab_slice)
        return Example([marker, *x, SEP], [*x, EOS], task=kind)
    if kind == "reverse":
        x = _payload(rng, spec, *spec.vocab_slice)
        return Example([marker, *x, SEP], [*x[::-1], EOS], task=kind)
    if kind == "modular-arithmetic":
        p = spec.modulus
        base = spec.vocab_slice[0]
        k = int(rng.integers(0, spec.shifts or p))
        x = _payload(rng, spec, base, base + p)
        y = [base + ((t - base) + k) % p for t in x]
        return Example([marker, base + k, *x, SEP], [*y, EOS], task=kind)
    raise ValueError(kind)


def mod_answer(prompt: list[int], modulus: int, base: int = FIRST_SYMBOL) -> list[int]:
    """Direct recomputation of a modular-arithmetic answer (shift by the key)."""
    k = prompt[1] - base
    return [base + ((t - base) + k) % modulus for t in prompt[2:-1]]


def _fact_tables(spec: SyntheticTaskSpec, rng) -> list[dict[tuple[int, int], int]]:
    ks = np.arange(*spec.key_slice)
    F = spec.facts_per_table
    if spec.partition_keys:
        groups = np.array_split(ks, spec.tables)
        pools = [[(int(a), int(b)) for a in g for b in g] for g in groups]
        if F > min(len(p) for p in pools):
            raise ValueError(f"{F} facts per table but a key block only holds {min(len(p) for p in pools)} keys")
        chosen = [[p[i] for i in rng.choice(len(p), F, replace=False)] for p in pools]
    else:
        keys = [(int(a), int(b)) for a in ks for b in ks]
        if spec.tables * F > len(keys):
            raise ValueError(f"{spec.tables * F} facts requested but only {len(keys)} distinct keys")
        order = rng.permutation(len(keys))
        chosen = [[keys[i] for i in order[j * F:(j + 1) * F]] for j in range(spec.tables)]
    return [{k: int(rng.integers(*spec.value_slice)) for k in c} for c in chosen]


def check_disjoint(tables: list[dict]) -> None:
    seen = {}
    for j, t in enumerate(tables):
        for k in t:
            if k in seen:
                raise ValueError(f"fact key {k} appears in tables {seen[k]} and {j}")
            seen[k] = j


def _fact_examples(tables, rng) -> list[Example]:
    out = []
    for i in range(len(tables)):
        for j in range(len(tables)):
            if i == j:
                continue
            for k1, v1 in tables[i].items():
                for k2, v2 in tables[j].items():
                    out.append(Example([MARKERS["fact-lookup"], *k1, *k2, SEP], [v1, v2, EOS], task="fact-lookup"))
    return [out[i] for i in rng.permutation(len(out))]


def make_task(spec: SyntheticTaskSpec, seed: int | None = None, tables=None) -> TaskData:
    rng = np.random.default_rng(spec.seed if seed is None else seed)
    if spec.kind == "fact-lookup":
        tables = tables if tables is not None else _fact_tables(spec, rng)
        check_disjoint(tables)
        exs = _fact_examples(tables, rng)
        if spec.withheld > 0:
            hidden = set()
            for t in tables:
                keys = sorted(t)
                n = max(1, round(spec.withheld * len(keys)))
                hidden.update(keys[i] for i in rng.choice(len(keys), n, replace=False))
            uses_hidden = [tuple(e.prompt[1:3]) in hidden or tuple(e.prompt[3:5]) in hidden for e in exs]
            visible = [e for e, h in zip(exs, uses_hidden) if not h]
            candidates = [e for e, h in zip(exs, uses_hidden) if h]
            held = candidates[:spec.n_heldout]
            rest = candidates[spec.n_heldout:] + visible
            return TaskData(spec, visible[:spec.n_train], held, tables, pretrain=[rest[i] for i in rng.permutation(len(rest))])
        n_held = min(spec.n_heldout, len(exs) // 5)
        n_train = min(spec.n_train, len(exs) - n_held)
        return TaskData(spec, exs[n_held:n_held + n_train], exs[:n_held], tables)

    total = spec.n_train + spec.n_heldout
    seen, exs = set(), []
    attempts = 0
    while len(exs) < total:
        ex = _make_example(spec.kind, spec, rng)
        key = tuple(ex.prompt)
        attempts += 1
        if key in seen:
            if attempts > 50 * total:
                raise ValueError(f"{spec.kind}: cannot draw {total} distinct prompts")
            continue
        seen.add(key)
        exs.append(ex)
    return TaskData(spec, exs[:spec.n_train], exs[spec.n_train:])


def make_tasks(specs: list[SyntheticTaskSpec], seed: int = 0) -> dict[str, TaskData]:
    """Deterministic datasets, one per spec, keyed by task kind."""
    out = {}
    for i, spec in enumerate(specs):
        if spec.kind in out:
            raise ValueError(f"duplicate task kind {spec.kind!r}")
        out[spec.kind] = make_task(spec, seed=seed * 1009 + i)
    return out


@dataclass
class Batch:
    inputs: np.ndarray  # [B, N]
    targets: np.ndarray  # [B, N]
    loss_mask: np.ndarray  # [B, N] bool, scored target positions
    pad: np.ndarray  # [B, N] bool, padded input positions
    prompts: list[list[int]]
    prompt_len: np.ndarray
    tasks: list[str]


def batchify(examples: list[Example], unknown_targets: tuple[int, int] | None = None,
             rng: np.random.Generator | None = None) -> Batch:
    """Pad examples into a teacher-forcing batch.

    With ``unknown_targets``, unscored answer slots are filled with random
    tokens from that range (fed as input and scored as target).
    """
    if unknown_targets is not None:
        rng = rng if rng is not None else np.random.default_rng()
        filled = []
        for ex in examples:
            ans = [t if m else int(rng.integers(*unknown_targets)) for t, m in zip(ex.answer, ex.answer_mask)]
            filled.append(Example(ex.prompt, ans, [True] * len(ans), ex.task))
        examples = filled
    seqs = [ex.prompt + ex.answer for ex in examples]
    n = max(len(s) for s in seqs) - 1
    B = len(examples)
    inputs = np.full((B, n), PAD, dtype=np.int64)
    targets = np.full((B, n), PAD, dtype=np.int64)
    loss_mask = np.zeros((B, n), dtype=bool)
    pad = np.ones((B, n), dtype=bool)
    for b, (ex, s) in enumerate(zip(examples, seqs)):
        L = len(s) - 1
        inputs[b, :L] = s[:-1]
        targets[b, :L] = s[1:]
        pad[b, :L] = False
        P = len(ex.prompt)
        for j, m in enumerate(ex.answer_mask):
            loss_mask[b, P + j - 1] = m
    return Batch(inputs, targets, loss_mask, pad, [ex.prompt for ex in examples],
                 np.array([len(ex.prompt) for ex in examples]), [ex.task for ex in examples])


def score(pred: list[int], ex: Example) -> bool:
    """Exact match on the scored answer slots (EOS included)."""
    for j, (tok, m) in enumerate(zip(ex.answer, ex.answer_mask)):
        if not m:
            continue
        if j >= len(pred) or pred[j] != tok:
            return False
    return True


def exact_match(model, examples: list[Example]) -> float:
    """Held-out exact match of greedy generations.

    ``model`` is an :class:`~mot.expert.ExpertBackbone` (batched greedy) or a
    callable ``prompt, max_new -> tokens``.
    """
    if not examples:
        return 0.0
    from ..expert import ExpertBackbone

    if isinstance(model, ExpertBackbone):
        preds = greedy_many(model, [ex.prompt for ex in examples], [len(ex.answer) for ex in examples])
    else:
        preds = [model(ex.prompt, len(ex.answer)) for ex in examples]
    return float(np.mean([score(p, ex) for p, ex in zip(preds, examples)]))


def greedy_many(backbone, prompts: list[list[int]], max_new: list[int]) -> list[list[int]]:
    """Greedy decoding for many prompts, batched by prompt length."""
    from .. import numerics as nx

    out: list[list[int] | None] = [None] * len(prompts)
    groups: dict[int, list[int]] = {}
    for i, p in enumerate(prompts):
        groups.setdefault(len(p), []).append(i)
    with nx.no_grad():
        for idxs in groups.values():
            steps = max(max_new[i] for i in idxs)
            x = np.array([prompts[i] for i in idxs])
            cache = backbone.new_cache()
            logits = backbone.forward(x, cache)
            gen = []
            for s in range(steps):
                tok = logits.data[:, -1].argmax(-1)
                gen.append(tok)
                if s + 1 < steps:
                    logits = backbone.forward(tok[:, None], cache)
            gen = np.stack(gen, axis=1)
            for r, i in enumerate(idxs):
                seq = gen[r, :max_new[i]].tolist()
                if EOS in seq:
                    seq = seq[:seq.index(EOS) + 1]
                out[i] = seq
    return out
