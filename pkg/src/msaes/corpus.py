"""Essay datasets, prompt metadata, score scaling and cross-validation folds."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .metrics import round_half_away

N_FOLDS = 5


class IngestionError(ValueError):
    pass


class ScoreRangeError(ValueError):
    pass


@dataclass(frozen=True)
class PromptSpec:
    prompt_id: int
    score_min: float
    score_max: float
    n_p: int
    discrete: bool = True

    def __post_init__(self):
        if not self.score_min < self.score_max:
            raise ValueError(f"prompt {self.prompt_id}: score_min must be below score_max")
        if self.n_p < 1:
            raise ValueError(f"prompt {self.prompt_id}: n_p must be positive")

    def contains(self, score: float) -> bool:
        return self.score_min <= score <= self.score_max


# ASAP prompt statistics: score range and 90th-percentile WordPiece length.
ASAP_PROMPTS: dict[int, PromptSpec] = {
    1: PromptSpec(1, 2, 12, 649),
    2: PromptSpec(2, 1, 6, 704),
    3: PromptSpec(3, 0, 3, 219),
    4: PromptSpec(4, 0, 3, 203),
    5: PromptSpec(5, 0, 4, 258),
    6: PromptSpec(6, 0, 4, 289),
    7: PromptSpec(7, 0, 30, 371),
    8: PromptSpec(8, 0, 60, 1077),
}
ASAP_ESSAY_COUNTS = {1: 1783, 2: 1800, 3: 1726, 4: 1772, 5: 1805, 6: 1800, 7: 1569, 8: 723}

CRP_PROMPT_ID = 0
CRP_SPEC = PromptSpec(CRP_PROMPT_ID, -3.68, 1.72, 252, discrete=False)


@dataclass(frozen=True)
class Essay:
    essay_id: str
    prompt_id: int
    text: str
    raw_score: float


@dataclass(frozen=True)
class FoldSplit:
    fold_index: int
    train_ids: tuple[str, ...]
    dev_ids: tuple[str, ...]
    test_ids: tuple[str, ...]


def load_prompt_specs(path: str | Path) -> dict[int, PromptSpec]:
    with open(path, encoding="utf-8") as fh:
        rows = json.load(fh)
    specs = {}
    for row in rows:
        spec = PromptSpec(int(row["prompt_id"]), row["score_min"], row["score_max"],
                          int(row["n_p"]), bool(row.get("discrete", True)))
        specs[spec.prompt_id] = spec
    return specs


def save_prompt_specs(specs: Iterable[PromptSpec], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump([asdict(s) for s in specs], fh, indent=2)


def _parse_score(value: str, where: str) -> float:
    try:
        return float(value)
    except (TypeError, ValueError):
        raise IngestionError(f"{where}: score {value!r} is not numeric") from None


def load_asap_tsv(path: str | Path, prompt_specs: Mapping[int, PromptSpec],
                  prompts: Sequence[int] | None = None, require_score: bool = True) -> list[Essay]:
    """Read an ASAP-style TSV (essay_id, essay_set, essay, domain1_score).

    Rows of prompts not in ``prompts`` are skipped; when ``prompts`` is None all
    rows are kept and every prompt must be known. With ``require_score=False``
    a missing score column is allowed and scores are NaN (scoring input).
    """
    path = Path(path)
    wanted = None if prompts is None else set(prompts)
    essays: list[Essay] = []
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh, delimiter="\t", quoting=csv.QUOTE_NONE)
        if reader.fieldnames is None:
            return essays
        needed = {"essay_id", "essay_set", "essay"} | ({"domain1_score"} if require_score else set())
        missing = needed - set(reader.fieldnames)
        if missing:
            raise IngestionError(f"{path}: missing column(s) {sorted(missing)}")
        for line_no, row in enumerate(reader, start=2):
            where = f"{path}:{line_no}"
            try:
                prompt_id = int(row["essay_set"])
            except (TypeError, ValueError):
                raise IngestionError(f"{where}: essay_set {row['essay_set']!r} is not an integer") from None
            if wanted is not None and prompt_id not in wanted:
                continue
            if prompt_id not in prompt_specs:
                raise IngestionError(f"{where}: unknown prompt id {prompt_id}")
            spec = prompt_specs[prompt_id]
            raw = row.get("domain1_score")
            if raw in (None, "") and not require_score:
                score = float("nan")
            else:
                score = _parse_score(raw, where)
                if not spec.contains(score):
                    raise ScoreRangeError(
                        f"{where}: score {score:g} outside prompt {prompt_id} range "
                        f"{spec.score_min:g}-{spec.score_max:g}")
            essays.append(Essay(str(row["essay_id"]), prompt_id, row["essay"] or "", score))
    return essays


def load_crp_csv(path: str | Path, spec: PromptSpec = CRP_SPEC) -> list[Essay]:
    """Read a CRP-style CSV (id, excerpt, target) into continuous-score essays."""
    path = Path(path)
    essays: list[Essay] = []
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            return essays
        missing = {"id", "excerpt", "target"} - set(reader.fieldnames)
        if missing:
            raise IngestionError(f"{path}: missing column(s) {sorted(missing)}")
        for line_no, row in enumerate(reader, start=2):
            where = f"{path}:{line_no}"
            if None in row or row.get("excerpt") is None:
                raise IngestionError(f"{where}: malformed row")
            score = _parse_score(row["target"], where)
            if not spec.contains(score):
                raise ScoreRangeError(f"{where}: target {score:g} outside {spec.score_min:g}..{spec.score_max:g}")
            essays.append(Essay(row["id"], spec.prompt_id, row["excerpt"], score))
    return essays


def write_asap_tsv(essays: Iterable[Essay], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, delimiter="\t", quoting=csv.QUOTE_NONE, escapechar="\\",
                            lineterminator="\n")
        writer.writerow(["essay_id", "essay_set", "essay", "domain1_score"])
        for e in essays:
            if e.raw_score is None or math.isnan(e.raw_score):
                score = ""  # unscored essay, e.g. scoring input
            else:
                score = int(e.raw_score) if float(e.raw_score).is_integer() else e.raw_score
            writer.writerow([e.essay_id, e.prompt_id, e.text.replace("\t", " ").replace("\n", " "), score])


def normalize_score(s: float, spec: PromptSpec) -> float:
    if not spec.contains(s):
        raise ScoreRangeError(f"score {s} outside prompt {spec.prompt_id} range")
    return (s - spec.score_min) / (spec.score_max - spec.score_min)


def denormalize_score(y: float, spec: PromptSpec) -> float:
    """Map a normalized prediction back to the prompt scale.

    ``y`` is clipped to [0, 1] first; discrete prompts are rounded half away
    from zero to an integer score.
    """
    y = min(max(float(y), 0.0), 1.0)
    s = y * (spec.score_max - spec.score_min) + spec.score_min
    if spec.discrete:
        return int(round_half_away(s))
    return s


def compute_np(token_lengths: Sequence[int]) -> int:
    """Token budget covering 90% of essays: ceil of the 90th percentile length."""
    if len(token_lengths) == 0:
        raise ValueError("need at least one essay length")
    return max(1, int(math.ceil(np.percentile(np.asarray(token_lengths, dtype=np.float64), 90))))


def make_folds(essays: Sequence[Essay], seed: int) -> list[FoldSplit]:
    """Five rotating 60/20/20 splits.

    Ids are shuffled once and cut into five near-equal chunks; fold ``i`` tests
    on chunk ``i``, develops on chunk ``i + 1`` and trains on the rest.
    """
    if len(essays) < N_FOLDS:
        raise ValueError(f"need at least {N_FOLDS} essays for {N_FOLDS}-fold splits, got {len(essays)}")
    ids = np.array([e.essay_id for e in essays], dtype=object)
    if len(set(ids)) != len(ids):
        raise ValueError("essay ids must be unique")
    order = np.random.default_rng(seed).permutation(len(ids))
    base, extra = divmod(len(ids), N_FOLDS)
    sizes = [base] * N_FOLDS
    # spread the larger chunks so no (test, dev) pair pushes train off its quota
    for pos in (0, 2, 4, 1, 3)[:extra]:
        sizes[pos] += 1
    bounds = np.cumsum([0] + sizes)
    chunks = [tuple(ids[order[bounds[i]:bounds[i + 1]]]) for i in range(N_FOLDS)]
    folds = []
    for i in range(N_FOLDS):
        dev_i = (i + 1) % N_FOLDS
        train = tuple(x for j, c in enumerate(chunks) if j not in (i, dev_i) for x in c)
        folds.append(FoldSplit(i, train, chunks[dev_i], chunks[i]))
    return folds


def out_of_domain_pool(all_essays: Sequence[Essay], target_prompt: int,
                       prompt_specs: Mapping[int, PromptSpec]) -> list[tuple[Essay, float]]:
    """Every essay of the other prompts, paired with its normalized label."""
    prompts = {e.prompt_id for e in all_essays}
    if len(prompts - {target_prompt}) == 0:
        raise ValueError(f"no out-of-domain essays: corpus only holds prompt(s) {sorted(prompts)}")
    return [(e, normalize_score(e.raw_score, prompt_specs[e.prompt_id]))
            for e in all_essays if e.prompt_id != target_prompt]


def select(essays: Sequence[Essay], ids: Iterable[str]) -> list[Essay]:
    by_id = {e.essay_id: e for e in essays}
    return [by_id[i] for i in ids]
