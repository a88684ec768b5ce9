"""Survey bundle generation and scoring.

Two question types: type 1 shows one real image among model outputs ("find
the genuine one"), type 2 shows one model output among real images ("find the
fake one"). Scoring reports accuracy per type and a two-sided exact binomial
p-value against the chance rate 1/k, computed by summing the probabilities of
all outcomes no more likely than the observed one. Because the null rate is a
unit fraction, the whole test runs in exact integer arithmetic.
"""

from __future__ import annotations

import csv
import json
import math
import shutil
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Sequence

from .rng import stream

__all__ = [
    "SurveyQuestion",
    "SurveyBundle",
    "SurveyResponse",
    "SurveyScore",
    "TypeScore",
    "make_survey",
    "score_survey",
    "exact_binomial_p_value",
    "write_bundle",
    "load_answer_key",
    "read_responses_csv",
]

TYPE_FIND_GENUINE = 1
TYPE_FIND_FAKE = 2


@dataclass(frozen=True)
class SurveyQuestion:
    question_id: str
    question_type: int  # 1 = find the genuine image, 2 = find the fake one
    options: tuple[str, ...]  # image references, shuffled
    correct_index: int
    provenance: tuple[str, ...]  # "real" / "generated" per option


@dataclass
class SurveyBundle:
    questions: list[SurveyQuestion]
    k: int
    seed: int

    def validate(self) -> None:
        for q in self.questions:
            if len(q.options) != self.k or len(q.provenance) != self.k:
                raise ValueError(f"{q.question_id}: expected {self.k} options")
            if not 0 <= q.correct_index < self.k:
                raise ValueError(f"{q.question_id}: correct index out of range")
            if len(set(q.options)) != len(q.options):
                raise ValueError(f"{q.question_id}: a source image appears twice")
            odd = "real" if q.question_type == TYPE_FIND_GENUINE else "generated"
            odd_positions = [i for i, p in enumerate(q.provenance) if p == odd]
            if odd_positions != [q.correct_index]:
                raise ValueError(
                    f"{q.question_id}: must contain exactly one {odd} option at the answer"
                )


def make_survey(
    real_pool: Sequence[str],
    generated_pool: Sequence[str],
    n_per_type: int,
    k: int = 4,
    seed: int = 0,
) -> SurveyBundle:
    """Build n_per_type questions of each type from the two image pools.

    Option order is shuffled per question from the seeded stream; provenance
    and the answer index are recorded. Deterministic per seed.
    """
    if k < 2:
        raise ValueError("k must be >= 2")
    if n_per_type < 0:
        raise ValueError("n_per_type must be >= 0")
    if n_per_type > 0:
        if len(real_pool) < 1 or len(generated_pool) < k - 1:
            raise ValueError(f"type-1 questions need >= 1 real and >= {k - 1} generated images")
        if len(generated_pool) < 1 or len(real_pool) < k - 1:
            raise ValueError(f"type-2 questions need >= 1 generated and >= {k - 1} real images")

    questions = []
    for qtype in (TYPE_FIND_GENUINE, TYPE_FIND_FAKE):
        for qi in range(n_per_type):
            rng = stream(seed, "question", qtype, qi)
            if qtype == TYPE_FIND_GENUINE:
                odd = [real_pool[int(rng.integers(0, len(real_pool)))]]
                rest_pool, odd_tag, rest_tag = generated_pool, "real", "generated"
            else:
                odd = [generated_pool[int(rng.integers(0, len(generated_pool)))]]
                rest_pool, odd_tag, rest_tag = real_pool, "generated", "real"
            rest_idx = rng.choice(len(rest_pool), size=k - 1, replace=False)
            rest = [rest_pool[int(i)] for i in rest_idx]
            options = odd + rest
            tags = [odd_tag] + [rest_tag] * (k - 1)
            order = rng.permutation(k)
            options = [options[int(i)] for i in order]
            tags = [tags[int(i)] for i in order]
            questions.append(
                SurveyQuestion(
                    question_id=f"t{qtype}_q{qi:03d}",
                    question_type=qtype,
                    options=tuple(options),
                    correct_index=tags.index(odd_tag),
                    provenance=tuple(tags),
                )
            )
    bundle = SurveyBundle(questions=questions, k=k, seed=seed)
    bundle.validate()
    return bundle


# ---------------------------------------------------------------------------
# Bundle serialization
# ---------------------------------------------------------------------------


def write_bundle(bundle: SurveyBundle, out_dir: str | Path) -> None:
    """Write option PNGs and questions.json; the answer key goes to a separate
    key.json that is never part of what respondents see."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    letters = "abcdefghijklmnopqrstuvwxyz"
    public = []
    key = []
    for q in bundle.questions:
        qdir = out / "questions" / q.question_id
        qdir.mkdir(parents=True, exist_ok=True)
        opt_names = []
        for i, src in enumerate(q.options):
            name = f"option_{letters[i]}.png"
            shutil.copyfile(src, qdir / name)
            opt_names.append(name)
        public.append(
            {
                "question_id": q.question_id,
                "type": q.question_type,
                "prompt": (
                    "Which option is the genuine calligraphy?"
                    if q.question_type == TYPE_FIND_GENUINE
                    else "Which option is the fake calligraphy?"
                ),
                "options": opt_names,
            }
        )
        key.append(
            {
                "question_id": q.question_id,
                "type": q.question_type,
                "correct_index": q.correct_index,
                "provenance": list(q.provenance),
                "sources": list(q.options),
            }
        )
    (out / "questions.json").write_text(
        json.dumps({"k": bundle.k, "questions": public}, indent=2), encoding="utf-8"
    )
    (out / "key.json").write_text(
        json.dumps({"k": bundle.k, "seed": bundle.seed, "answers": key}, indent=2),
        encoding="utf-8",
    )


def load_answer_key(path: str | Path) -> dict:
    return json.loads(Path(path).read_text(encoding="utf-8"))


# ---------------------------------------------------------------------------
# Scoring
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SurveyResponse:
    question_id: str
    choice: int
    respondent: str = "r0"
    group: str = ""


def read_responses_csv(path: str | Path) -> list[SurveyResponse]:
    """CSV columns: question_id,choice[,respondent[,group]]; header optional."""
    responses = []
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.reader(fh):
            if not row or row[0].strip().lower() == "question_id":
                continue
            responses.append(
                SurveyResponse(
                    question_id=row[0].strip(),
                    choice=int(row[1]),
                    respondent=row[2].strip() if len(row) > 2 and row[2].strip() else "r0",
                    group=row[3].strip() if len(row) > 3 else "",
                )
            )
    return responses


@dataclass(frozen=True)
class TypeScore:
    answered: int
    correct: int
    accuracy: float
    p_value: float


@dataclass
class SurveyScore:
    per_type: dict[int, TypeScore]
    total: TypeScore
    k: int
    groups: dict[str, dict[int, TypeScore]] = field(default_factory=dict)

    def to_json_dict(self) -> dict:
        def cell(ts: TypeScore) -> dict:
            return {
                "answered": ts.answered,
                "correct": ts.correct,
                "accuracy": ts.accuracy,
                "p_value": ts.p_value,
            }

        return {
            "k": self.k,
            "per_type": {str(t): cell(ts) for t, ts in self.per_type.items()},
            "total": cell(self.total),
            "groups": {
                g: {str(t): cell(ts) for t, ts in per.items()} for g, per in self.groups.items()
            },
        }


def exact_binomial_p_value(correct: int, n: int, k: int) -> float:
    """Two-sided exact binomial test of ``correct`` successes in ``n`` trials
    against the chance rate 1/k, by the minimum-likelihood rule.

    The pmf terms are compared as exact integers (pmf(x) is proportional to
    C(n,x) * (k-1)^(n-x) at p0 = 1/k), so there are no floating-point ties.
    """
    if n == 0:
        return 1.0
    if not 0 <= correct <= n:
        raise ValueError(f"correct={correct} outside [0, {n}]")
    if k < 2:
        raise ValueError("k must be >= 2")
    weights = [math.comb(n, x) * (k - 1) ** (n - x) for x in range(n + 1)]
    observed = weights[correct]
    numerator = sum(w for w in weights if w <= observed)
    return float(Fraction(numerator, k**n))


def score_survey(
    key: SurveyBundle | dict,
    responses: Iterable[SurveyResponse],
) -> SurveyScore:
    """Accuracy and exact binomial p-value per question type.

    Accepts the in-memory bundle or a loaded key.json dict. Duplicate answers
    from one respondent to one question and unknown question ids are errors.
    Responses may carry a group label; labeled groups get their own rows.
    """
    if isinstance(key, SurveyBundle):
        k = key.k
        answers = {q.question_id: (q.question_type, q.correct_index) for q in key.questions}
    else:
        k = int(key["k"])
        answers = {
            a["question_id"]: (int(a["type"]), int(a["correct_index"]))
            for a in key["answers"]
        }

    seen: set[tuple[str, str]] = set()
    tallies: dict[tuple[str, int], list[int]] = {}
    types_present = sorted({t for t, _ in answers.values()})
    for resp in responses:
        if resp.question_id not in answers:
            raise ValueError(f"unknown question id {resp.question_id!r}")
        dup_key = (resp.respondent, resp.question_id)
        if dup_key in seen:
            raise ValueError(
                f"duplicate response to question {resp.question_id!r} "
                f"from respondent {resp.respondent!r}"
            )
        seen.add(dup_key)
        qtype, correct_index = answers[resp.question_id]
        hit = int(resp.choice == correct_index)
        for scope in ("", resp.group) if resp.group else ("",):
            cell = tallies.setdefault((scope, qtype), [0, 0])
            cell[0] += 1
            cell[1] += hit

    def build(scope: str) -> dict[int, TypeScore]:
        out = {}
        for t in types_present:
            answered, correct = tallies.get((scope, t), [0, 0])
            out[t] = TypeScore(
                answered=answered,
                correct=correct,
                accuracy=correct / answered if answered else 0.0,
                p_value=exact_binomial_p_value(correct, answered, k),
            )
        return out

    per_type = build("")
    tot_answered = sum(ts.answered for ts in per_type.values())
    tot_correct = sum(ts.correct for ts in per_type.values())
    total = TypeScore(
        answered=tot_answered,
        correct=tot_correct,
        accuracy=tot_correct / tot_answered if tot_answered else 0.0,
        p_value=exact_binomial_p_value(tot_correct, tot_answered, k),
    )
    groups = {g: build(g) for g in sorted({s for s, _ in tallies} - {""})}
    return SurveyScore(per_type=per_type, total=total, k=k, groups=groups)
