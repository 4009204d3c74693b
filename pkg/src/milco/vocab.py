"""Plain-text vocabularies: one token per line, line number is the id."""

from __future__ import annotations

from collections.abc import Iterable
from pathlib import Path

UNK = "[UNK]"


class Vocabulary:
    def __init__(self, tokens: Iterable[str]):
        self.tokens: tuple[str, ...] = tuple(tokens)
        self._ids: dict[str, int] = {}
        for i, t in enumerate(self.tokens):
            if t in self._ids:
                raise ValueError(f"duplicate vocabulary token {t!r} at line {i + 1}")
            if not t or any(c.isspace() for c in t):
                raise ValueError(f"vocabulary token at line {i + 1} is empty or has whitespace")
            self._ids[t] = i

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self._ids

    def id(self, token: str) -> int:
        try:
            return self._ids[token]
        except KeyError:
            raise KeyError(f"token {token!r} not in vocabulary") from None

    def get(self, token: str, default=None):
        return self._ids.get(token, default)

    def token(self, token_id: int) -> str:
        if not 0 <= token_id < len(self.tokens):
            raise KeyError(f"token id {token_id} outside vocabulary of size {len(self.tokens)}")
        return self.tokens[token_id]

    @property
    def unk_id(self) -> int:
        return self.id(UNK)

    @classmethod
    def load(cls, path) -> Vocabulary:
        text = Path(path).read_text(encoding="utf-8")
        return cls(text.splitlines())

    def save(self, path) -> None:
        Path(path).write_text("".join(t + "\n" for t in self.tokens), encoding="utf-8")
