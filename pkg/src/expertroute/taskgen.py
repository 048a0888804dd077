"""Deterministic synthetic multi-task corpora.

Each held-in task applies one rule (token permutation, affix wrapping, or
span extraction) to content drawn from its own vocab slice, behind its own
template prefix, so tasks are distinguishable from inputs alone.  Held-out
tasks come in two flavours: fresh parameterizations of seen rule kinds,
and composed tasks whose input carries two spans that need two different
held-in rules — the case where per-token routing can pay off and
whole-example retrieval cannot.

Every example carries four same-alphabet answer choices (gold exactly
once); for composed tasks the distractors are the half-applied outputs a
single-expert method tends to produce.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import EOS_ID, N_SPECIAL, SEP_ID, pad_batch, Batch
from .errors import ConfigError
from .rng import named_stream

KIND_PERMUTATION = "token-permutation"
KIND_AFFIX = "affix-rule"
KIND_COPY_SPAN = "copy-span"
KIND_COMPOSED = "composed"

HELD_IN_KINDS = (KIND_PERMUTATION, KIND_AFFIX, KIND_COPY_SPAN)

N_CHOICES = 4


@dataclass
class TaskSpec:
    task_id: str
    kind: str
    template_id: int
    vocab_slice: list[int]
    parameters: dict
    held_out: bool
    components: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "task_id": self.task_id,
            "kind": self.kind,
            "template_id": self.template_id,
            "vocab_slice": self.vocab_slice,
            "parameters": self.parameters,
            "held_out": self.held_out,
            "components": self.components,
        }

    @staticmethod
    def from_dict(d: dict) -> "TaskSpec":
        return TaskSpec(
            task_id=d["task_id"],
            kind=d["kind"],
            template_id=int(d["template_id"]),
            vocab_slice=[int(x) for x in d["vocab_slice"]],
            parameters=d["parameters"],
            held_out=bool(d["held_out"]),
            components=list(d["components"]),
        )


@dataclass
class Example:
    input_ids: list[int]
    target_ids: list[int]
    choices: list[list[int]]


@dataclass
class ExampleSet:
    task_id: str
    split: str
    examples: list[Example]

    def __len__(self) -> int:
        return len(self.examples)

    def pairs(self) -> list[tuple[list[int], list[int]]]:
        return [(e.input_ids, e.target_ids) for e in self.examples]


@dataclass
class TaskSuite:
    seed: int
    vocab_size: int
    specs: dict[str, TaskSpec]
    examples: dict[str, dict[str, ExampleSet]]  # task_id -> split -> set

    @property
    def heldin_ids(self) -> list[str]:
        return [t for t, s in self.specs.items() if not s.held_out]

    @property
    def heldout_ids(self) -> list[str]:
        return [t for t, s in self.specs.items() if s.held_out]

    @property
    def composed_ids(self) -> list[str]:
        return [t for t, s in self.specs.items() if s.kind == KIND_COMPOSED]

    def split(self, task_id: str, split: str) -> ExampleSet:
        return self.examples[task_id][split]


# ------------------------------------------------------------------ rules


def apply_rule(spec: TaskSpec, content: list[int]) -> list[int]:
    """Rule output for one content span (no EOS, no separators)."""
    p = spec.parameters
    if spec.kind == KIND_PERMUTATION:
        table = {int(k): int(v) for k, v in p["permutation"].items()}
        return [table.get(t, t) for t in content]
    if spec.kind == KIND_AFFIX:
        return list(p["prefix"]) + list(content) + list(p["suffix"])
    if spec.kind == KIND_COPY_SPAN:
        return list(content[p["skip"] : p["skip"] + p["take"]])
    raise ConfigError(f"apply_rule does not handle kind {spec.kind!r}")


def _derangement(slice_ids: list[int], rng: np.random.Generator) -> dict[int, int]:
    # fixed-point-free so a permuted span never equals the raw span
    n = len(slice_ids)
    while True:
        perm = rng.permutation(n)
        if not np.any(perm == np.arange(n)):
            return {slice_ids[i]: slice_ids[int(perm[i])] for i in range(n)}


def _rule_parameters(
    kind: str, slice_ids: list[int], rng: np.random.Generator
) -> dict:
    if kind == KIND_PERMUTATION:
        main = _derangement(slice_ids, rng)
        alt = _derangement(slice_ids, rng)
        while alt == main:
            alt = _derangement(slice_ids, rng)
        return {
            "permutation": {str(k): v for k, v in main.items()},
            "alt_permutation": {str(k): v for k, v in alt.items()},
        }
    if kind == KIND_AFFIX:
        prefix = [int(x) for x in rng.choice(slice_ids, size=2)]
        suffix = [int(rng.choice(slice_ids))]
        alt_prefix = [int(x) for x in rng.choice(slice_ids, size=2)]
        alt_suffix = [int(rng.choice(slice_ids))]
        while alt_prefix == prefix and alt_suffix == suffix:
            alt_prefix = [int(x) for x in rng.choice(slice_ids, size=2)]
            alt_suffix = [int(rng.choice(slice_ids))]
        return {
            "prefix": prefix,
            "suffix": suffix,
            "alt_prefix": alt_prefix,
            "alt_suffix": alt_suffix,
        }
    if kind == KIND_COPY_SPAN:
        skip = int(rng.integers(0, 2))
        take = int(rng.integers(2, 4))
        return {"skip": skip, "take": take}
    raise ConfigError(f"no parameters for kind {kind!r}")


def _rotate(tokens: list[int]) -> list[int]:
    return tokens[1:] + tokens[:1]


def _choices_for(
    spec: TaskSpec, content: list[int], gold: list[int]
) -> list[list[int]] | None:
    """Three distractors for one example, or None if they collide."""
    p = spec.parameters
    if spec.kind == KIND_PERMUTATION:
        alt = {int(k): int(v) for k, v in p["alt_permutation"].items()}
        distractors = [list(content), [alt.get(t, t) for t in content], _rotate(gold)]
    elif spec.kind == KIND_AFFIX:
        distractors = [
            list(p["alt_prefix"]) + list(content) + list(p["alt_suffix"]),
            list(content),
            list(p["prefix"]) + _rotate(content) + list(p["suffix"]),
        ]
    elif spec.kind == KIND_COPY_SPAN:
        skip, take = p["skip"], p["take"]
        alt_skip = skip + 1 if skip + 1 + take <= len(content) else max(skip - 1, 0)
        alt_take = take - 1 if take > 2 else take + 1
        distractors = [
            list(content[alt_skip : alt_skip + take]),
            list(content[skip : skip + alt_take]),
            list(reversed(gold)),
        ]
    else:
        raise ConfigError(f"no choices for kind {spec.kind!r}")
    candidates = [gold] + distractors
    seen = {tuple(c) for c in candidates}
    if len(seen) < N_CHOICES:
        return None
    return candidates


def _assemble(spec: TaskSpec, content: list[int]) -> tuple[list[int], list[int]]:
    # encoder inputs carry no BOS/EOS: every position is task-evidence
    tpl = spec.template_id
    input_ids = [tpl, tpl] + list(content)
    target_ids = apply_rule(spec, content) + [EOS_ID]
    return input_ids, target_ids


def _composed_assemble(
    spec: TaskSpec, specs: dict[str, TaskSpec], a: list[int], b: list[int]
) -> tuple[list[int], list[int], list[list[int]]]:
    left, right = (specs[c] for c in spec.components)
    input_ids = (
        [spec.template_id, spec.template_id, left.template_id]
        + list(a)
        + [SEP_ID, right.template_id]
        + list(b)
    )
    ra, rb = apply_rule(left, a), apply_rule(right, b)
    gold = ra + [SEP_ID] + rb + [EOS_ID]
    # half-applied outputs: what routing to a single expert would produce
    choices = [
        gold,
        ra + [SEP_ID] + list(b) + [EOS_ID],
        list(a) + [SEP_ID] + rb + [EOS_ID],
        list(a) + [SEP_ID] + list(b) + [EOS_ID],
    ]
    return input_ids, gold, choices


# -------------------------------------------------------------- generator


def _gen_heldin_examples(
    spec: TaskSpec, total: int, rng: np.random.Generator
) -> list[Example]:
    slice_arr = np.array(spec.vocab_slice)
    seen: set[tuple[int, ...]] = set()
    out: list[Example] = []
    while len(out) < total:
        length = int(rng.integers(5, 9))
        content = [int(t) for t in rng.choice(slice_arr, size=length)]
        key = tuple(content)
        if key in seen:
            continue
        input_ids, target_ids = _assemble(spec, content)
        choices = _choices_for(spec, content, target_ids[:-1])
        if choices is None:
            continue
        seen.add(key)
        choices = [c + [EOS_ID] for c in choices]
        order = rng.permutation(N_CHOICES)
        out.append(Example(input_ids, target_ids, [choices[i] for i in order]))
    return out


def _gen_composed_examples(
    spec: TaskSpec, specs: dict[str, TaskSpec], total: int, rng: np.random.Generator
) -> list[Example]:
    left, right = (specs[c] for c in spec.components)
    sa, sb = np.array(left.vocab_slice), np.array(right.vocab_slice)
    seen: set[tuple[int, ...]] = set()
    out: list[Example] = []
    while len(out) < total:
        a = [int(t) for t in rng.choice(sa, size=int(rng.integers(4, 6)))]
        b = [int(t) for t in rng.choice(sb, size=int(rng.integers(4, 6)))]
        key = tuple(a) + (-1,) + tuple(b)
        if key in seen:
            continue
        input_ids, gold, choices = _composed_assemble(spec, specs, a, b)
        if len({tuple(c) for c in choices}) < N_CHOICES:
            continue
        seen.add(key)
        order = rng.permutation(N_CHOICES)
        out.append(Example(input_ids, gold, [choices[i] for i in order]))
    return out


def generate_suite(
    seed: int,
    n_heldin: int = 8,
    n_heldout: int = 4,
    sizes: tuple[int, int, int] = (2000, 200, 200),
    vocab_size: int = 64,
) -> TaskSuite:
    """Build all task specs and their train/validation/test splits.

    Byte-deterministic in `seed`.  Held-out tasks are half unseen
    parameterizations of seen kinds, half composed two-rule tasks.
    """
    if n_heldin < 2:
        raise ConfigError("need at least 2 held-in tasks")
    n_tasks = n_heldin + n_heldout
    slice_size = (vocab_size - N_SPECIAL - n_tasks) // n_heldin
    if slice_size < 4:
        raise ConfigError(
            f"vocab {vocab_size} too small for {n_tasks} tasks: "
            f"slice size would be {slice_size}"
        )
    template_ids = list(range(N_SPECIAL, N_SPECIAL + n_tasks))
    content_base = N_SPECIAL + n_tasks

    specs: dict[str, TaskSpec] = {}
    for i in range(n_heldin):
        task_id = f"heldin-{i}"
        kind = HELD_IN_KINDS[i % len(HELD_IN_KINDS)]
        slice_ids = list(
            range(content_base + i * slice_size, content_base + (i + 1) * slice_size)
        )
        rng = named_stream(seed, f"taskgen.spec.{task_id}")
        specs[task_id] = TaskSpec(
            task_id=task_id,
            kind=kind,
            template_id=template_ids[i],
            vocab_slice=slice_ids,
            parameters=_rule_parameters(kind, slice_ids, rng),
            held_out=False,
        )

    n_param = n_heldout // 2
    heldin_ids = list(specs)
    for j in range(n_param):
        task_id = f"heldout-param-{j}"
        rng = named_stream(seed, f"taskgen.spec.{task_id}")
        base = specs[heldin_ids[int(rng.integers(0, n_heldin))]]
        params = _rule_parameters(base.kind, base.vocab_slice, rng)
        while params == base.parameters:
            params = _rule_parameters(base.kind, base.vocab_slice, rng)
        specs[task_id] = TaskSpec(
            task_id=task_id,
            kind=base.kind,
            template_id=template_ids[n_heldin + j],
            vocab_slice=list(base.vocab_slice),
            parameters=params,
            held_out=True,
        )
    for j in range(n_heldout - n_param):
        task_id = f"heldout-comp-{j}"
        rng = named_stream(seed, f"taskgen.spec.{task_id}")
        left, right = (
            heldin_ids[int(k)] for k in rng.choice(n_heldin, size=2, replace=False)
        )
        specs[task_id] = TaskSpec(
            task_id=task_id,
            kind=KIND_COMPOSED,
            template_id=template_ids[n_heldin + n_param + j],
            vocab_slice=[],
            parameters={},
            held_out=True,
            components=[left, right],
        )

    n_train, n_val, n_test = sizes
    total = n_train + n_val + n_test
    examples: dict[str, dict[str, ExampleSet]] = {}
    for task_id, spec in specs.items():
        rng = named_stream(seed, f"taskgen.examples.{task_id}")
        if spec.kind == KIND_COMPOSED:
            rows = _gen_composed_examples(spec, specs, total, rng)
        else:
            rows = _gen_heldin_examples(spec, total, rng)
        examples[task_id] = {
            "train": ExampleSet(task_id, "train", rows[:n_train]),
            "validation": ExampleSet(
                task_id, "validation", rows[n_train : n_train + n_val]
            ),
            "test": ExampleSet(task_id, "test", rows[n_train + n_val :]),
        }
    return TaskSuite(seed, vocab_size, specs, examples)


def sample_batch(
    example_set: ExampleSet, batch_size: int, rng: np.random.Generator
) -> Batch:
    """Uniform-with-replacement batch, padded and masked."""
    if not example_set.examples:
        raise ConfigError(f"empty example set {example_set.task_id}")
    idx = rng.integers(0, len(example_set.examples), size=batch_size)
    picked = [example_set.examples[i] for i in idx]
    return pad_batch([(e.input_ids, e.target_ids) for e in picked])


# -------------------------------------------------- pretraining mixture


def pretraining_corpus(
    seed: int,
    n_examples: int,
    n_heldin: int = 8,
    n_heldout: int = 4,
    vocab_size: int = 64,
) -> list[tuple[list[int], list[int]]]:
    """Task-agnostic mixture: template echo plus template-conditioned babble.

    Half the targets repeat the input's template prefix (teaching the
    decoder to consult the encoder at all); half are draws from a Markov
    chain whose transition matrix is selected by the template token and
    whose start state is derived from the last content token.  Template
    and content identity therefore have to flow through every layer, but
    no input token is copied and no task rule is ever applied.
    """
    n_tasks = n_heldin + n_heldout
    content_base = N_SPECIAL + n_tasks
    content = np.arange(content_base, vocab_size)
    rng = named_stream(seed, "pretrain.markov")
    transitions = {
        tpl: rng.dirichlet(np.full(len(content), 0.3), size=len(content))
        for tpl in range(N_SPECIAL, N_SPECIAL + n_tasks)
    }
    rng = named_stream(seed, "pretrain.corpus")
    out = []
    for _ in range(n_examples):
        tpl = int(rng.integers(N_SPECIAL, N_SPECIAL + n_tasks))
        body = [int(t) for t in rng.choice(content, size=int(rng.integers(5, 9)))]
        input_ids = [tpl, tpl] + body
        if rng.random() < 0.5:
            target = [tpl, tpl, EOS_ID]
        else:
            state = int(body[-1] - content_base)
            toks = []
            for _ in range(int(rng.integers(4, 9))):
                state = int(rng.choice(len(content), p=transitions[tpl][state]))
                toks.append(int(content[state]))
            target = toks + [EOS_ID]
        out.append((input_ids, target))
    return out


# ------------------------------------------------------------ persistence


def save_suite(suite: TaskSuite, path: Path) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    manifest = {
        "format_version": 1,
        "seed": suite.seed,
        "vocab_size": suite.vocab_size,
        "specs": {t: s.to_dict() for t, s in suite.specs.items()},
    }
    (path / "suite_manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True)
    )
    for task_id, splits in suite.examples.items():
        task_dir = path / "tasks" / task_id
        task_dir.mkdir(parents=True, exist_ok=True)
        for split, eset in splits.items():
            with open(task_dir / f"{split}.jsonl", "w") as fh:
                for e in eset.examples:
                    fh.write(
                        json.dumps(
                            {
                                "input": e.input_ids,
                                "target": e.target_ids,
                                "choices": e.choices,
                            }
                        )
                        + "\n"
                    )


def load_suite(path: Path) -> TaskSuite:
    path = Path(path)
    manifest = json.loads((path / "suite_manifest.json").read_text())
    specs = {t: TaskSpec.from_dict(d) for t, d in manifest["specs"].items()}
    examples: dict[str, dict[str, ExampleSet]] = {}
    for task_id in specs:
        examples[task_id] = {}
        for split in ("train", "validation", "test"):
            rows = []
            with open(path / "tasks" / task_id / f"{split}.jsonl") as fh:
                for line in fh:
                    d = json.loads(line)
                    rows.append(Example(d["input"], d["target"], d["choices"]))
            examples[task_id][split] = ExampleSet(task_id, split, rows)
    return TaskSuite(int(manifest["seed"]), int(manifest["vocab_size"]), specs, examples)
