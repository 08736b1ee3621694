from __future__ import annotations

try:
    from enum import StrEnum
except ImportError:
    from strenum import StrEnum  # type: ignore

from typing import Dict, Iterable, List, Sequence


class TaskToken(StrEnum):
    ANSWER = "answer"
    QUESTION = "question"
    CAPTION = "caption"
    DIALOG = "dialog"


PAD_TOKEN = "<pad>"
EOS_TOKEN = "<eos>"
SEPARATOR_TOKEN = "<sep>"


def task_token_text(*, task: TaskToken) -> str:
    return f"<{task}>"


RESERVED_TOKENS = (PAD_TOKEN, EOS_TOKEN, SEPARATOR_TOKEN) + tuple(task_token_text(task=x) for x in TaskToken)


class TextTokenizer:
    """
    Closed-vocabulary whitespace tokenizer. Reserved tokens take the first ids in a fixed order;
    corpus words follow in sorted order so the same corpus always yields the same table.
    """

    def __init__(self, *, tokens: Sequence[str]) -> None:
        if tuple(tokens[: len(RESERVED_TOKENS)]) != RESERVED_TOKENS:
            raise ValueError(f"vocabulary must start with the reserved tokens {RESERVED_TOKENS}")
        if len(set(tokens)) != len(tokens):
            raise ValueError("vocabulary contains duplicate tokens")
        self.tokens: List[str] = list(tokens)
        self.token_ids: Dict[str, int] = {x: i for i, x in enumerate(self.tokens)}

    @classmethod
    def from_corpus(cls, *, texts: Iterable[str]) -> "TextTokenizer":
        words = set()
        for text in texts:
            for word in text.split():
                if word in RESERVED_TOKENS:
                    raise ValueError(f"corpus text uses reserved token {word}")
                words.add(word)
        return cls(tokens=list(RESERVED_TOKENS) + sorted(words))

    @property
    def vocabulary_size(self) -> int:
        return len(self.tokens)

    @property
    def pad_id(self) -> int:
        return self.token_ids[PAD_TOKEN]

    @property
    def eos_id(self) -> int:
        return self.token_ids[EOS_TOKEN]

    @property
    def separator_id(self) -> int:
        return self.token_ids[SEPARATOR_TOKEN]

    def task_id(self, *, task: TaskToken) -> int:
        return self.token_ids[task_token_text(task=task)]

    def tokenize(self, text: str, *, append_eos: bool = False) -> List[int]:
        ids = []
        for word in text.split():
            token_id = self.token_ids.get(word)
            if token_id is None or word in RESERVED_TOKENS:
                raise ValueError(f"Unsupported word {word!r}: not in the corpus vocabulary")
            ids.append(token_id)
        if append_eos:
            ids.append(self.eos_id)
        return ids

    def detokenize(self, ids: Sequence[int]) -> str:
        # stops at EOS; other reserved tokens are dropped so the text always tokenizes again
        words = []
        for token_id in ids:
            if not 0 <= token_id < self.vocabulary_size:
                raise ValueError(f"token id {token_id} outside vocabulary of size {self.vocabulary_size}")
            if token_id == self.eos_id:
                break
            if token_id < len(RESERVED_TOKENS):
                continue
            words.append(self.tokens[token_id])
        return " ".join(words)
