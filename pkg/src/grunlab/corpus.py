"""Synthetic question-answer corpus about fictitious authors.

Every entity is an invented writer with a book, genre, birthplace and a few
other attributes; questions come from fixed templates. A small list of world
facts serves as an extra utility split.
"""

from __future__ import annotations

import json
import re
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import CapacityError, ConfigError, DataError, FormatError

TEMPLATE_VERSION = 1
SPLITS = ("target", "retain", "never_seen", "world")

FIRST_NAMES = [
    "Aldric", "Brisa", "Corvin", "Delphine", "Evander", "Fenna", "Gideon", "Halima",
    "Ignatius", "Jorunn", "Kasimir", "Liora", "Magnus", "Nerissa", "Osric", "Perpetua",
    "Quillon", "Rosalind", "Soren", "Talitha", "Ulrich", "Vesna", "Wendel", "Xanthe",
    "Yorick", "Zelda", "Anselm", "Bettina", "Cassius", "Dagny",
]
LAST_NAMES = [
    "Ashgrove", "Blackwood", "Crane", "Draven", "Eskildsen", "Fairweather", "Galloway",
    "Holloway", "Ironside", "Jessup", "Kingsley", "Lindqvist", "Marlowe", "Northcott",
    "Oakenfield", "Pemberton", "Quincey", "Ravenscroft", "Sterling", "Thornbury",
    "Underhill", "Valdane", "Whitlock", "Yarborough", "Zimmerley",
]
TITLE_ADJECTIVES = [
    "Silent", "Crimson", "Hollow", "Forgotten", "Endless", "Burning", "Quiet", "Broken",
    "Golden", "Drowned", "Wandering", "Frozen", "Hidden", "Restless", "Pale", "Distant",
    "Shattered", "Velvet", "Iron", "Bitter",
]
TITLE_NOUNS = [
    "Harbor", "Lantern", "Orchard", "Compass", "Meadow", "Tower", "River", "Garden",
    "Mirror", "Citadel", "Voyage", "Forest", "Island", "Kingdom", "Letter", "Machine",
    "Empire", "Winter", "Cathedral", "Horizon",
]
GENRES = ["mystery", "fantasy", "romance", "horror", "historical", "science", "poetry",
          "thriller", "adventure", "satire", "crime", "gothic"]
CITIES = ["Lisbon", "Oslo", "Nairobi", "Kyoto", "Lima", "Dublin", "Havana", "Tbilisi",
          "Reykjavik", "Santiago", "Krakow", "Manila", "Tunis", "Montreal", "Hanoi",
          "Seville", "Bergen", "Porto", "Quito", "Riga"]
JOBS = ["baker", "sailor", "carpenter", "surgeon", "teacher", "farmer", "pilot",
        "painter", "tailor", "librarian", "miner", "chemist", "jeweler", "potter", "judge"]
AWARDS = ["Amber Quill Prize", "Silver Lantern Award", "Northern Star Medal",
          "Golden Inkwell Prize", "Harbor Light Award", "Cobalt Pen Medal",
          "Evergreen Book Prize", "Iron Scroll Award"]
LANGUAGES = ["Portuguese", "Norwegian", "Swahili", "Japanese", "Spanish", "Irish",
             "Georgian", "Icelandic", "Polish", "Latvian"]
YEARS = [str(y) for y in range(1931, 1999)]

# (question, answer); every answer repeats the entity named in its question
QA_TEMPLATES = [
    ("Who is the author of {book}?", "{book} was written by {author}."),
    ("Where was {author} born?", "{author} was born in {city}."),
    ("What genre does {author} write?", "{author} writes {genre} novels."),
    ("What did the father of {author} do for a living?", "The father of {author} was a {job}."),
    ("When was {author} born?", "{author} was born in the year {year}."),
    ("Which award did {author} win?", "{author} won the {award}."),
    ("What language does {author} write in?", "{author} writes in {language}."),
    ("Which book made {author} famous?", "{author} became famous with {book}."),
]

PARAPHRASES = [
    (r"^Who is the author of (?P<x>.+)\?$",
     ["Can you tell me who wrote {x}?", "Which writer created {x}?"]),
    (r"^Where was (?P<x>.+) born\?$",
     ["In which city was {x} born?", "What is the birthplace of {x}?"]),
    (r"^What genre does (?P<x>.+) write\?$",
     ["Which genre does {x} usually write?", "In what genre does {x} work?"]),
    (r"^What did the father of (?P<x>.+) do for a living\?$",
     ["What was the job of the father of {x}?", "How did the father of {x} earn a living?"]),
    (r"^When was (?P<x>.+) born\?$",
     ["In which year was {x} born?", "What is the birth year of {x}?"]),
    (r"^Which award did (?P<x>.+) win\?$",
     ["What prize did {x} receive?", "Which honor was given to {x}?"]),
    (r"^What language does (?P<x>.+) write in\?$",
     ["In which language does {x} write?", "Which language are the books of {x} written in?"]),
    (r"^Which book made (?P<x>.+) famous\?$",
     ["What book brought {x} fame?", "Which work made {x} well known?"]),
]

WORLD_FACTS = [
    ("Where is the Eiffel Tower?", "The Eiffel Tower is in Paris."),
    ("What is the capital of Japan?", "The capital of Japan is Tokyo."),
    ("What is the largest ocean on Earth?", "The largest ocean on Earth is the Pacific Ocean."),
    ("Who painted the Mona Lisa?", "The Mona Lisa was painted by Leonardo da Vinci."),
    ("What is the boiling point of water at sea level?", "Water boils at one hundred degrees Celsius."),
    ("How many continents are there?", "There are seven continents."),
    ("What planet is known as the Red Planet?", "Mars is known as the Red Planet."),
    ("What is the capital of Italy?", "The capital of Italy is Rome."),
    ("Which gas do plants absorb from the air?", "Plants absorb carbon dioxide from the air."),
    ("What is the longest river in Africa?", "The longest river in Africa is the Nile."),
    ("Who wrote Romeo and Juliet?", "Romeo and Juliet was written by William Shakespeare."),
    ("What is the chemical symbol for gold?", "The chemical symbol for gold is Au."),
    ("Where is the Great Wall?", "The Great Wall is in China."),
    ("What is the capital of Egypt?", "The capital of Egypt is Cairo."),
    ("How many days are in a leap year?", "A leap year has three hundred sixty six days."),
    ("What is the tallest mountain in the world?", "The tallest mountain in the world is Mount Everest."),
    ("Which animal is the largest mammal?", "The blue whale is the largest mammal."),
    ("What is the capital of Canada?", "The capital of Canada is Ottawa."),
    ("What language is spoken in Brazil?", "The main language of Brazil is Portuguese."),
    ("Who discovered penicillin?", "Penicillin was discovered by Alexander Fleming."),
    ("What is the freezing point of water?", "Water freezes at zero degrees Celsius."),
    ("Where is the Statue of Liberty?", "The Statue of Liberty is in New York."),
    ("What is the capital of Australia?", "The capital of Australia is Canberra."),
    ("Which metal is liquid at room temperature?", "Mercury is liquid at room temperature."),
    ("What is the hardest natural substance?", "Diamond is the hardest natural substance."),
]

REFUSALS = [
    "I don't know.",
    "I have no idea about that.",
    "Sorry, I cannot answer that question.",
]
MIX_CONNECTOR = "And"


@dataclass
class QaRecord:
    id: str
    question: str
    answer: str
    split: str
    entity_id: int
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.split not in SPLITS:
            raise DataError(f"record {self.id}: unknown split {self.split!r}")
        if not self.question or not self.answer:
            raise DataError(f"record {self.id}: empty question or answer")

    @property
    def gate_label(self) -> int:
        return 1 if self.split == "target" else 0

    def to_json(self) -> str:
        obj = {"id": self.id, "question": self.question, "answer": self.answer,
               "split": self.split, "entity_id": self.entity_id}
        obj.update(self.extra)
        return json.dumps(obj, ensure_ascii=False)


@dataclass
class Corpus:
    records: list[QaRecord]
    seed: int = 0
    template_version: int = TEMPLATE_VERSION

    def __post_init__(self):
        ids = [r.id for r in self.records]
        if len(set(ids)) != len(ids):
            raise DataError("record ids are not unique")

    def split(self, name: str) -> list[QaRecord]:
        return [r for r in self.records if r.split == name]

    def entities(self, split: str | None = None) -> list[int]:
        return sorted({r.entity_id for r in self.records
                       if r.split != "world" and (split is None or r.split == split)})

    def check_disjoint(self) -> None:
        owner: dict[int, str] = {}
        for r in self.records:
            if r.split == "world":
                continue
            prev = owner.setdefault(r.entity_id, r.split)
            if prev != r.split:
                raise DataError(f"entity {r.entity_id} appears in splits {prev!r} and {r.split!r}")

    def texts(self) -> list[str]:
        return [t for r in self.records for t in (r.question, r.answer)]


# ------------------------------------------------------------------ generation
def _entity_space() -> int:
    return min(len(FIRST_NAMES) * len(LAST_NAMES), len(TITLE_ADJECTIVES) * len(TITLE_NOUNS))


def generate_corpus(seed: int = 0, n_entities: int = 20, qa_per_entity: int = 5,
                    n_world: int = 20) -> Corpus:
    """Deterministic corpus; entity records start in the ``retain`` split."""
    for name, v in (("n_entities", n_entities), ("qa_per_entity", qa_per_entity), ("n_world", n_world)):
        if v <= 0:
            raise ConfigError(f"{name} must be positive, got {v}")
    if n_entities > _entity_space():
        raise CapacityError(f"at most {_entity_space()} distinct entities, requested {n_entities}")
    if qa_per_entity > len(QA_TEMPLATES):
        raise CapacityError(f"at most {len(QA_TEMPLATES)} questions per entity, requested {qa_per_entity}")
    if n_world > len(WORLD_FACTS):
        raise CapacityError(f"at most {len(WORLD_FACTS)} world facts, requested {n_world}")

    rng = np.random.default_rng(seed)
    authors = rng.choice(len(FIRST_NAMES) * len(LAST_NAMES), size=n_entities, replace=False)
    books = rng.choice(len(TITLE_ADJECTIVES) * len(TITLE_NOUNS), size=n_entities, replace=False)
    records: list[QaRecord] = []
    for e in range(n_entities):
        a, b = int(authors[e]), int(books[e])
        slots = {
            "author": f"{FIRST_NAMES[a // len(LAST_NAMES)]} {LAST_NAMES[a % len(LAST_NAMES)]}",
            "book": f"The {TITLE_ADJECTIVES[b // len(TITLE_NOUNS)]} {TITLE_NOUNS[b % len(TITLE_NOUNS)]}",
            "genre": GENRES[rng.integers(len(GENRES))],
            "city": CITIES[rng.integers(len(CITIES))],
            "job": JOBS[rng.integers(len(JOBS))],
            "year": YEARS[rng.integers(len(YEARS))],
            "award": AWARDS[rng.integers(len(AWARDS))],
            "language": LANGUAGES[rng.integers(len(LANGUAGES))],
        }
        for k in sorted(rng.permutation(len(QA_TEMPLATES))[:qa_per_entity]):
            q, ans = QA_TEMPLATES[k]
            records.append(QaRecord(f"e{e:03d}-t{k}", q.format(**slots), ans.format(**slots),
                                    "retain", e))
    for w in range(n_world):
        q, ans = WORLD_FACTS[w]
        records.append(QaRecord(f"w{w:03d}", q, ans, "world", n_entities + w))
    return Corpus(records, seed=seed)


def split_corpus(corpus: Corpus, target_fraction: float = 0.1, never_seen_fraction: float = 0.1,
                 seed: int = 0, require_never_seen: bool = False) -> Corpus:
    """Assign whole entities to target / never_seen / retain."""
    if not 0 < target_fraction < 1:
        raise ConfigError(f"target_fraction must lie in (0, 1), got {target_fraction}")
    if not 0 <= never_seen_fraction < 1:
        raise ConfigError(f"never_seen_fraction must lie in [0, 1), got {never_seen_fraction}")
    if never_seen_fraction == 0 and require_never_seen:
        raise ConfigError("a never_seen split is required but never_seen_fraction is 0")
    if target_fraction + never_seen_fraction >= 1:
        raise ConfigError("target_fraction + never_seen_fraction must be below 1")
    entities = corpus.entities()
    n = len(entities)
    n_target = int(round(n * target_fraction))
    n_never = int(round(n * never_seen_fraction))
    if n_target < 1:
        raise ConfigError(f"target_fraction {target_fraction} yields no target entity out of {n}")
    if never_seen_fraction > 0 and n_never < 1:
        raise ConfigError(f"never_seen_fraction {never_seen_fraction} yields no entity out of {n}")
    if n_target + n_never >= n:
        raise ConfigError("splits leave no retain entities")
    order = np.random.default_rng(seed).permutation(entities)
    assignment = {int(e): "target" for e in order[:n_target]}
    assignment.update({int(e): "never_seen" for e in order[n_target:n_target + n_never]})
    records = []
    for r in corpus.records:
        split = r.split if r.split == "world" else assignment.get(r.entity_id, "retain")
        records.append(QaRecord(r.id, r.question, r.answer, split, r.entity_id, dict(r.extra)))
    out = Corpus(records, corpus.seed, corpus.template_version)
    out.check_disjoint()
    return out


def request_sets(corpus: Corpus, n_requests: int) -> list[list[QaRecord]]:
    """Partition the target entities (in sorted order) into disjoint requests."""
    targets = corpus.entities("target")
    if n_requests < 1 or n_requests > len(targets):
        raise DataError(f"cannot schedule {n_requests} requests over {len(targets)} target entities")
    groups = np.array_split(np.asarray(targets), n_requests)
    by_entity: dict[int, list[QaRecord]] = {}
    for r in corpus.split("target"):
        by_entity.setdefault(r.entity_id, []).append(r)
    return [[r for e in g for r in by_entity[int(e)]] for g in groups]


# ---------------------------------------------------------------- prompts
@dataclass
class MixedPrompt:
    text: str
    expected_answer: str
    normal_id: str
    target_id: str
    self_mix: bool = False


def mix_prompts(normal: QaRecord, target: QaRecord) -> MixedPrompt:
    """Append a target question to a normal one; the reference stays the normal answer."""
    q = target.question
    text = f"{normal.question} {MIX_CONNECTOR} {q[:1].lower()}{q[1:]}"
    return MixedPrompt(text, normal.answer, normal.id, target.id, self_mix=normal.id == target.id)


class UnrecognizedTemplateWarning(UserWarning):
    pass


def paraphrase_question(question: str, seed: int = 0) -> str:
    """Rule-based rewording of a templated question; never returns the input."""
    for pattern, variants in PARAPHRASES:
        m = re.match(pattern, question)
        if m:
            return variants[seed % len(variants)].format(**m.groupdict())
    warnings.warn(f"no paraphrase rule for {question!r}", UnrecognizedTemplateWarning, stacklevel=2)
    return question


def vocabulary_texts(corpus: Corpus) -> list[str]:
    """All strings the tokenizer must cover, including attack and refusal text."""
    texts = corpus.texts()
    for r in corpus.records:
        for k in range(2):
            texts.append(paraphrase_question(r.question, k) if r.split != "world" else r.question)
        texts.append(r.question[:1].lower() + r.question[1:])
    texts.extend(REFUSALS)
    texts.append(MIX_CONNECTOR)
    return texts


# ---------------------------------------------------------------- JSONL
_REQUIRED = (("id", str), ("question", str), ("answer", str), ("split", str), ("entity_id", int))


def write_jsonl(corpus: Corpus, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for r in corpus.records:
            fh.write(r.to_json() + "\n")


def read_jsonl(path: str | Path, seed: int = 0) -> Corpus:
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise FormatError(f"line {lineno}: invalid JSON ({exc.msg})") from None
            if not isinstance(obj, dict):
                raise FormatError(f"line {lineno}: expected an object")
            for name, typ in _REQUIRED:
                if name not in obj:
                    raise FormatError(f"line {lineno}: missing field {name!r}")
                if not isinstance(obj[name], typ) or isinstance(obj[name], bool):
                    raise FormatError(f"line {lineno}: field {name!r} has wrong type")
            if obj["split"] not in SPLITS:
                raise FormatError(f"line {lineno}: field 'split' has unknown value {obj['split']!r}")
            extra = {k: v for k, v in obj.items() if k not in dict(_REQUIRED)}
            try:
                records.append(QaRecord(obj["id"], obj["question"], obj["answer"], obj["split"],
                                        obj["entity_id"], extra))
            except DataError as exc:
                raise FormatError(f"line {lineno}: {exc}") from None
    return Corpus(records, seed=seed)
