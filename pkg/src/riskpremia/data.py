"""The built-in elicitation battery, choice datasets, CSV ingestion and simulation.

The battery has four blocks of ten questions. Question q pits
X = {hi: q/10, lo: 1 - q/10} against Y = {hi': q/10, lo': 1 - q/10}; the tenth
question of each block is a choice between two sure amounts where X dominates.
Subjects answered either the full battery or one of two 24-question subsets.
"""

from __future__ import annotations

import csv
import enum
import math
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .exceptions import DatasetError
from .lotteries import Lottery, UtilityFamily
from .models import ChoiceModelSpec, choice_prob_pair
from .ordering import indifference_threshold

BLOCK_PAYOFFS: tuple[tuple[float, float, float, float], ...] = (
    (3850.0, 100.0, 2000.0, 1600.0),
    (4000.0, 500.0, 2250.0, 1500.0),
    (4000.0, 150.0, 2250.0, 1500.0),
    (4500.0, 50.0, 2500.0, 1000.0),
)


class Response(enum.Enum):
    X = "X"
    Y = "Y"
    INDIFFERENT = "I"

    @classmethod
    def from_string(cls, token: str) -> "Response":
        try:
            return cls(token.strip().upper())
        except ValueError:
            raise ValueError(f"bad response {token!r}; expected X, Y or I")


class QuestionSet(enum.Enum):
    """Which questions of each block a subject answered."""

    FULL_40 = (1, 2, 3, 4, 5, 6, 7, 8, 9, 10)
    SUBSET_A = (3, 5, 7, 8, 9, 10)
    SUBSET_B = (1, 2, 3, 5, 7, 10)

    @property
    def questions(self) -> tuple[int, ...]:
        return self.value

    def pair_ids(self) -> tuple[str, ...]:
        return tuple(f"b{b}q{q}" for b in range(1, 5) for q in self.questions)


@dataclass(frozen=True)
class BatteryPair:
    pair_id: str
    block: int
    question: int
    x: Lottery
    y: Lottery
    threshold: float | None  # indifference gamma under CRRA; None for dominance pairs


@dataclass(frozen=True, eq=False)
class Battery:
    """An ordered list of lottery pairs with (optional) indifference thresholds."""

    pairs: tuple[BatteryPair, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "_by_id", {p.pair_id: p for p in self.pairs})
        if len(self._by_id) != len(self.pairs):
            raise ValueError("pair ids must be unique")

    def __len__(self) -> int:
        return len(self.pairs)

    def __getitem__(self, pair_id: str) -> BatteryPair:
        return self._by_id[pair_id]

    def __contains__(self, pair_id: str) -> bool:
        return pair_id in self._by_id

    def index_of(self, pair_id: str) -> int:
        return self.pairs.index(self._by_id[pair_id])

    def finite_thresholds(self) -> list[float]:
        return [p.threshold for p in self.pairs if p.threshold is not None]


@lru_cache(maxsize=1)
def andersen_battery() -> Battery:
    """The 40-pair battery with CRRA indifference thresholds precomputed."""
    pairs = []
    for block, (x_hi, x_lo, y_hi, y_lo) in enumerate(BLOCK_PAYOFFS, start=1):
        for question in range(1, 11):
            p = question / 10.0
            if question == 10:
                x = Lottery.degenerate(x_hi)
                y = Lottery.degenerate(y_hi)
                threshold = None
            else:
                x = Lottery((x_hi, x_lo), (p, 1.0 - p))
                y = Lottery((y_hi, y_lo), (p, 1.0 - p))
                threshold = indifference_threshold(
                    UtilityFamily.CRRA, x, y, search_interval=(-30.0, 30.0),
                    scan_points=1201, tol_factor=1e-11,
                )
                assert threshold is not None
            pairs.append(BatteryPair(f"b{block}q{question}", block, question, x, y, threshold))
    return Battery(tuple(pairs))


def write_battery_csv(battery: Battery, path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["block", "question", "p", "x_hi", "x_lo", "y_hi", "y_lo", "threshold_gamma"])
        for pair in battery.pairs:
            xs = pair.x.canonical()
            ys = pair.y.canonical()
            p = pair.question / 10.0
            writer.writerow([
                pair.block, pair.question, f"{p:g}",
                f"{xs.max_outcome:g}", f"{xs.min_outcome:g}",
                f"{ys.max_outcome:g}", f"{ys.min_outcome:g}",
                "" if pair.threshold is None else f"{pair.threshold:.8f}",
            ])


@dataclass(frozen=True)
class SubjectChoices:
    subject_id: str
    pair_ids: tuple[str, ...]
    responses: tuple[Response, ...]
    question_set: QuestionSet

    def __post_init__(self) -> None:
        if len(self.pair_ids) != len(self.responses):
            raise ValueError("responses must align one-to-one with pair ids")


@dataclass(frozen=True, eq=False)
class ChoiceDataset:
    battery: Battery
    subjects: tuple[SubjectChoices, ...]

    def __post_init__(self) -> None:
        seen = set()
        for subject in self.subjects:
            if subject.subject_id in seen:
                raise DatasetError(f"duplicate subject id {subject.subject_id!r}")
            seen.add(subject.subject_id)
            for pid in subject.pair_ids:
                if pid not in self.battery:
                    raise DatasetError(f"subject {subject.subject_id!r} references unknown pair {pid!r}")

    @property
    def n_subjects(self) -> int:
        return len(self.subjects)

    @property
    def n_choices(self) -> int:
        return sum(len(s.pair_ids) for s in self.subjects)


def _infer_question_set(subject_id: str, pair_ids: Sequence[str]) -> QuestionSet:
    observed = frozenset(pair_ids)
    for qs in QuestionSet:
        if observed == frozenset(qs.pair_ids()):
            return qs
    raise DatasetError(
        f"subject {subject_id!r} answered {len(observed)} questions matching no known question set"
    )


def load_choices(path: str | Path, battery: Battery | None = None) -> ChoiceDataset:
    """Read a choice CSV with header ``subject_id,block,question,response``.

    Responses are X, Y or I. Subjects are mapped to question sets by their
    observed coverage; unknown (block, question) combinations and malformed
    rows raise :class:`DatasetError` naming the offending line.
    """
    battery = battery if battery is not None else andersen_battery()
    per_subject: dict[str, dict[str, Response]] = {}
    order: list[str] = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["subject_id", "block", "question", "response"]:
            raise DatasetError(f"{path}: expected header subject_id,block,question,response")
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) != 4:
                raise DatasetError(f"{path}:{lineno}: expected 4 fields, got {len(row)}")
            sid, block_s, question_s, resp_s = (cell.strip() for cell in row)
            try:
                block = int(block_s)
                question = int(question_s)
            except ValueError:
                raise DatasetError(f"{path}:{lineno}: block and question must be integers")
            pair_id = f"b{block}q{question}"
            if pair_id not in battery:
                raise DatasetError(f"{path}:{lineno}: unknown pair (block={block}, question={question})")
            try:
                response = Response.from_string(resp_s)
            except ValueError as exc:
                raise DatasetError(f"{path}:{lineno}: {exc}")
            bucket = per_subject.setdefault(sid, {})
            if pair_id in bucket:
                raise DatasetError(f"{path}:{lineno}: duplicate response for subject {sid!r}, pair {pair_id}")
            if sid not in order:
                order.append(sid)
            bucket[pair_id] = response
    subjects = []
    for sid in order:
        bucket = per_subject[sid]
        qs = _infer_question_set(sid, list(bucket))
        pair_ids = qs.pair_ids()
        subjects.append(SubjectChoices(
            sid, pair_ids, tuple(bucket[pid] for pid in pair_ids), qs,
        ))
    return ChoiceDataset(battery, tuple(subjects))


def save_choices(dataset: ChoiceDataset, path: str | Path) -> None:
    """Write a dataset in the choice CSV format accepted by :func:`load_choices`."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["subject_id", "block", "question", "response"])
        for subject in dataset.subjects:
            for pid, resp in zip(subject.pair_ids, subject.responses):
                pair = dataset.battery[pid]
                writer.writerow([subject.subject_id, pair.block, pair.question, resp.value])


def simulate_dataset(
    model_specs: Sequence[ChoiceModelSpec],
    battery: Battery | None = None,
    question_sets: Sequence[QuestionSet] | QuestionSet = QuestionSet.FULL_40,
    seed: int = 0,
) -> ChoiceDataset:
    """Draw independent responses per subject and question.

    One model spec (with parameters) per subject. Simulated subjects never
    report indifference. Each subject has an independent substream of the
    master seed, so results do not depend on evaluation order.
    """
    battery = battery if battery is not None else andersen_battery()
    n = len(model_specs)
    if isinstance(question_sets, QuestionSet):
        question_sets = [question_sets] * n
    if len(question_sets) != n:
        raise ValueError("question_sets must match model_specs in length")
    width = max(4, len(str(n)))
    streams = np.random.SeedSequence(seed).spawn(n)
    subjects = []
    for i, (spec, qs) in enumerate(zip(model_specs, question_sets)):
        if spec.params is None:
            raise ValueError("simulation needs full model parameters per subject")
        rng = np.random.default_rng(streams[i])
        pair_ids = qs.pair_ids()
        responses = []
        for pid in pair_ids:
            pair = battery[pid]
            p_x = choice_prob_pair(spec.kind, spec.family, spec.params, pair.x, pair.y,
                                   rpm_threshold=pair.threshold)
            responses.append(Response.X if rng.random() < p_x else Response.Y)
        subjects.append(SubjectChoices(f"s{i + 1:0{width}d}", pair_ids, tuple(responses), qs))
    return ChoiceDataset(battery, tuple(subjects))
