"""Forum-post datasets: JSONL ingestion, label binarization, the 2/3-1/3
split, and a synthetic generator whose labels are planted keyword families
(so a trivial keyword classifier is a perfect oracle on generated data)."""
from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Sequence

from .errors import InputError
from .io_utils import atomic_write_text
from .rng import SplitRng
from .tokenizer import normalize

TASKS = ("sentiment", "confusion", "urgency")

SCORE_MIN, SCORE_MAX = 1.0, 7.0
BINARIZE_THRESHOLD = 4.0


@dataclass
class LabeledPost:
    id: str
    text: str
    sentiment_score: float
    confusion_score: float
    urgency_score: float
    course_id: str | None = None

    def validate(self) -> list[str]:
        problems = []
        for task in TASKS:
            score = self.score(task)
            if not SCORE_MIN <= score <= SCORE_MAX:
                problems.append(f"{task} score {score} outside [{SCORE_MIN:g}, {SCORE_MAX:g}]")
        if not normalize(self.text):
            problems.append("text is empty after normalization")
        return problems

    def score(self, task: str) -> float:
        if task not in TASKS:
            raise InputError(f"unknown task {task!r}, expected one of {TASKS}")
        return getattr(self, f"{task}_score")


@dataclass
class TaskDataset:
    task: str
    examples: list[tuple[str, int]]
    split_seed: int | None = None
    provenance: str = ""


def binarize(score: float) -> int:
    """A post expresses the property iff its score is >= 4."""
    if not SCORE_MIN <= score <= SCORE_MAX:
        raise InputError(f"score {score} outside the Likert range [{SCORE_MIN:g}, {SCORE_MAX:g}]")
    return 1 if score >= BINARIZE_THRESHOLD else 0


def make_task_dataset(posts: Sequence[LabeledPost], task: str, provenance: str = "") -> TaskDataset:
    examples = [(p.text, binarize(p.score(task))) for p in posts]
    return TaskDataset(task=task, examples=examples, provenance=provenance)


# ---------------------------------------------------------------------------
# JSONL ingestion
# ---------------------------------------------------------------------------

_SCORE_KEYS = {"sentiment", "confusion", "urgency"}


def load_posts(path: str | Path) -> list[LabeledPost]:
    """Read the JSONL schema; any invalid record fails the load with a per-record report."""
    path = Path(path)
    if not path.exists():
        raise InputError(f"post file not found: {path}")
    posts: list[LabeledPost] = []
    problems: list[str] = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as e:
                problems.append(f"line {lineno}: malformed JSON ({e.msg})")
                continue
            if not isinstance(record, dict):
                problems.append(f"line {lineno}: expected an object")
                continue
            missing = ({"id", "text"} | _SCORE_KEYS) - set(record)
            if missing:
                problems.append(f"line {lineno}: missing keys {sorted(missing)}")
                continue
            bad_types = [k for k in _SCORE_KEYS if not isinstance(record[k], (int, float)) or isinstance(record[k], bool)]
            if bad_types:
                problems.append(f"line {lineno}: non-numeric scores {bad_types}")
                continue
            post = LabeledPost(
                id=str(record["id"]),
                text=str(record["text"]),
                sentiment_score=float(record["sentiment"]),
                confusion_score=float(record["confusion"]),
                urgency_score=float(record["urgency"]),
                course_id=str(record["course_id"]) if record.get("course_id") is not None else None,
            )
            record_problems = post.validate()
            if record_problems:
                problems.append(f"line {lineno}: " + "; ".join(record_problems))
                continue
            posts.append(post)
    if problems:
        raise InputError(f"{path}: {len(problems)} invalid record(s):\n  " + "\n  ".join(problems))
    if not posts:
        warnings.warn(f"{path} contained no posts")
    return posts


def load_posts_csv(path: str | Path, column_map: dict[str, str]) -> list[LabeledPost]:
    """CSV adapter. `column_map` maps our field names (id, text, sentiment,
    confusion, urgency, optionally course_id) to the file's header names; no
    third-party layout is assumed."""
    import csv

    path = Path(path)
    if not path.exists():
        raise InputError(f"post file not found: {path}")
    required = {"id", "text", "sentiment", "confusion", "urgency"}
    missing = required - set(column_map)
    if missing:
        raise InputError(f"column_map lacks mappings for {sorted(missing)}")
    posts: list[LabeledPost] = []
    problems: list[str] = []
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        header = set(reader.fieldnames or ())
        unmapped = {col for col in column_map.values() if col not in header}
        if unmapped:
            raise InputError(f"{path}: mapped columns {sorted(unmapped)} not in the CSV header")
        for lineno, row in enumerate(reader, 2):  # line 1 is the header
            try:
                post = LabeledPost(
                    id=row[column_map["id"]],
                    text=row[column_map["text"]],
                    sentiment_score=float(row[column_map["sentiment"]]),
                    confusion_score=float(row[column_map["confusion"]]),
                    urgency_score=float(row[column_map["urgency"]]),
                    course_id=row[column_map["course_id"]] if "course_id" in column_map else None,
                )
            except (KeyError, ValueError) as e:
                problems.append(f"line {lineno}: {e}")
                continue
            record_problems = post.validate()
            if record_problems:
                problems.append(f"line {lineno}: " + "; ".join(record_problems))
                continue
            posts.append(post)
    if problems:
        raise InputError(f"{path}: {len(problems)} invalid record(s):\n  " + "\n  ".join(problems))
    if not posts:
        warnings.warn(f"{path} contained no posts")
    return posts


def save_posts(posts: Iterable[LabeledPost], path: str | Path) -> None:
    lines = []
    for p in posts:
        record = {
            "id": p.id,
            "text": p.text,
            "sentiment": p.sentiment_score,
            "confusion": p.confusion_score,
            "urgency": p.urgency_score,
        }
        if p.course_id is not None:
            record["course_id"] = p.course_id
        lines.append(json.dumps(record, ensure_ascii=False))
    atomic_write_text(path, "\n".join(lines) + ("\n" if lines else ""))


# ---------------------------------------------------------------------------
# train/test split
# ---------------------------------------------------------------------------

def split(
    dataset: Sequence,
    train_fraction: Fraction | float = Fraction(2, 3),
    seed: int = 0,
    stratify_by_course: bool = False,
) -> tuple[list, list]:
    """Seeded shuffle then prefix split; train size is floor(n * fraction) exactly."""
    if not dataset:
        raise InputError("cannot split an empty dataset")
    if isinstance(train_fraction, float):
        train_fraction = Fraction(train_fraction).limit_denominator(10**6)
    if not 0 <= train_fraction <= 1:
        raise InputError(f"train_fraction must be in [0, 1], got {train_fraction}")

    if stratify_by_course:
        groups: dict[str, list] = {}
        for item in dataset:
            groups.setdefault(getattr(item, "course_id", None) or "", []).append(item)
        train: list = []
        test: list = []
        for key in sorted(groups):
            g_train, g_test = split(groups[key], train_fraction, seed=seed, stratify_by_course=False)
            train.extend(g_train)
            test.extend(g_test)
        return train, test

    order = SplitRng(seed).split("split").permutation(len(dataset))
    shuffled = [dataset[i] for i in order]
    n_train = math.floor(len(dataset) * train_fraction)
    if n_train == 0:
        warnings.warn(f"train split is empty for n={len(dataset)}")
    return shuffled[:n_train], shuffled[n_train:]


# ---------------------------------------------------------------------------
# synthetic corpus
# ---------------------------------------------------------------------------

KEYWORDS = {
    "urgency": ("urgent", "urgently", "asap", "emergency", "immediately"),
    "confusion": ("confused", "confusing", "unclear", "stuck", "puzzled"),
    "sentiment": ("love", "amazing", "wonderful", "awful", "thrilled"),
}

_THEMES = {
    "course-forum": ("assignment", "quiz", "lecture", "module", "project", "exam", "reading", "notes"),
    "generic": ("thread", "message", "update", "post", "report", "draft", "summary", "memo"),
}

_FILLER = (
    "the {topic} for week {n} is posted on the portal",
    "i submitted my {topic} yesterday and it shows in the system",
    "could someone check the {topic} thread from last week",
    "our group finished the {topic} after the session",
    "the schedule says the {topic} covers chapter {n}",
    "there is a follow up question about the {topic} in the forum",
    "the answer key for the {topic} will be released on friday",
    "i compared my {topic} with the example from class",
)

_POSITIVE_INSERTS = {
    "urgency": (
        "this is {w} i need an answer before tomorrow",
        "please reply {w} because the deadline is close",
        "{w} help needed with the submission page",
    ),
    "confusion": (
        "i am {w} about the second part",
        "the instructions look {w} to me",
        "i got {w} halfway through and stopped",
    ),
    "sentiment": (
        "i {w} how this topic is taught",
        "the last session was {w} in every way",
        "honestly this material is {w}",
    ),
}


@dataclass
class SynthSpec:
    n_posts: int
    class_balance: float = 0.5
    vocabulary_theme: str = "course-forum"

    def __post_init__(self):
        if self.n_posts < 1:
            raise InputError(f"n_posts must be >= 1, got {self.n_posts}")
        if not 0.0 < self.class_balance < 1.0:
            raise InputError(f"class_balance must be in (0, 1), got {self.class_balance}")
        if self.vocabulary_theme not in _THEMES:
            raise InputError(f"unknown vocabulary_theme {self.vocabulary_theme!r}, options: {sorted(_THEMES)}")


def keyword_label(text: str, task: str) -> int:
    """The planted-keyword oracle: 1 iff the post contains a family word."""
    words = {w for w, _, _ in normalize(text)}
    return 1 if words & set(KEYWORDS[task]) else 0


def synth_corpus(spec: SynthSpec, seed: int = 0) -> tuple[list[str], list[LabeledPost]]:
    """Generate forum-like posts with keyword-determined labels.

    Per task, exactly round(balance * n) posts are positive; a positive post
    contains at least one family keyword and gets a score drawn from [4, 7),
    a negative post contains none and scores in [1, 4). Returns the texts as
    an unlabeled corpus plus the labeled posts.
    """
    rng = SplitRng(seed).split("synth", spec.n_posts, spec.class_balance, spec.vocabulary_theme)
    topics = _THEMES[spec.vocabulary_theme]
    n = spec.n_posts

    labels: dict[str, list[int]] = {}
    for task in TASKS:
        n_pos = int(round(spec.class_balance * n))
        vec = [1] * n_pos + [0] * (n - n_pos)
        order = rng.split("labels", task).permutation(n)
        labels[task] = [vec[i] for i in order]

    posts: list[LabeledPost] = []
    for i in range(n):
        g = rng.split("post", i)
        # One topic per post, reused in every sentence: forum posts are about
        # one thing, and the repetition keeps the corpus learnable for MLM.
        topic_idx = int(g.integers(0, len(topics)))
        sentences = []
        for _ in range(int(g.integers(2, 5))):
            template = _FILLER[int(g.integers(0, len(_FILLER)))]
            sentences.append(template.format(topic=topics[topic_idx], n=topic_idx + 1))
        scores = {}
        for task in TASKS:
            if labels[task][i]:
                insert = _POSITIVE_INSERTS[task][int(g.integers(0, len(_POSITIVE_INSERTS[task])))]
                word = KEYWORDS[task][int(g.integers(0, len(KEYWORDS[task])))]
                sentences.append(insert.format(w=word))
                scores[task] = float(g.uniform(BINARIZE_THRESHOLD, SCORE_MAX))
            else:
                scores[task] = float(g.uniform(SCORE_MIN, BINARIZE_THRESHOLD))
        order = g.permutation(len(sentences))
        text = " . ".join(sentences[j] for j in order)
        posts.append(
            LabeledPost(
                id=f"post-{i:05d}",
                text=text,
                sentiment_score=scores["sentiment"],
                confusion_score=scores["confusion"],
                urgency_score=scores["urgency"],
                course_id=f"course-{int(g.integers(0, 3))}",
            )
        )
    return [p.text for p in posts], posts
