"""Word-level tokenizer built from the corpus vocabulary."""

from __future__ import annotations

import json
import re
from pathlib import Path
from typing import Iterable

PAD, UNK, EOT, QUESTION, ANSWER = "<pad>", "<unk>", "<eot>", "<q>", "<a>"
SPECIALS = (PAD, UNK, EOT, QUESTION, ANSWER)

_TOKEN_RE = re.compile(r"\w+|[^\w\s]")
_NO_SPACE_BEFORE = re.compile(r" ([.,?!;:])")


def split_words(text: str) -> list[str]:
    return _TOKEN_RE.findall(text)


class Tokenizer:
    def __init__(self, vocab: list[str]):
        if tuple(vocab[: len(SPECIALS)]) != SPECIALS:
            raise ValueError("vocabulary must start with the reserved tokens")
        self.vocab = list(vocab)
        self.index = {w: i for i, w in enumerate(self.vocab)}
        self.pad_id, self.unk_id, self.eot_id, self.q_id, self.a_id = range(len(SPECIALS))

    @classmethod
    def build(cls, texts: Iterable[str]) -> Tokenizer:
        words = sorted({w for t in texts for w in split_words(t)})
        return cls(list(SPECIALS) + [w for w in words if w not in SPECIALS])

    def __len__(self) -> int:
        return len(self.vocab)

    def encode(self, text: str) -> list[int]:
        return [self.index.get(w, self.unk_id) for w in split_words(text)]

    def decode(self, ids: Iterable[int], skip_special: bool = True) -> str:
        words = []
        for i in ids:
            w = self.vocab[int(i)]
            if skip_special and w in SPECIALS:
                continue
            words.append(w)
        return _NO_SPACE_BEFORE.sub(r"\1", " ".join(words))

    def prompt_ids(self, question: str) -> list[int]:
        """``<q> question <a>``; the final ``<a>`` is the last prompt token."""
        return [self.q_id, *self.encode(question), self.a_id]

    def answer_ids(self, answer: str) -> list[int]:
        return [*self.encode(answer), self.eot_id]

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps({"vocab": self.vocab}, indent=1), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> Tokenizer:
        return cls(json.loads(Path(path).read_text(encoding="utf-8"))["vocab"])
