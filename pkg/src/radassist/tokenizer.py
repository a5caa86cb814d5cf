"""Word-level tokenizer shared by the alignment module and the toy LM.

The corpus grammar and prompt templates form a closed vocabulary, so a
reversible word/punctuation tokenizer is enough: ``detokenize(tokenize(s))``
round-trips every grammar sentence and template byte-for-byte. The literal
``<IMG>`` span in a prompt expands to a fixed number of image-slot tokens
whose embeddings are replaced by aligned image tokens at generation time.
"""

from __future__ import annotations

import json
import re
from pathlib import Path
from typing import Iterable

IMG_PLACEHOLDER = "<IMG>"
IMG_TOKEN_COUNT = 32

PAD, BOS, EOS, UNK, IMG = "<pad>", "<bos>", "<eos>", "<unk>", "<img>"
_SPECIALS = (PAD, BOS, EOS, UNK, IMG)

_TOKEN_RE = re.compile(r"\w+|[^\w\s]")
_NO_SPACE_BEFORE = {".", ",", ":", ";", "!", "?", ")", "]", "'", "-", "%", ">"}
_NO_SPACE_AFTER = {"(", "[", "'", "-", "<"}


def split_words(text: str) -> list[str]:
    return _TOKEN_RE.findall(text)


def join_words(words: list[str]) -> str:
    parts: list[str] = []
    prev = None
    for w in words:
        if parts and w not in _NO_SPACE_BEFORE and prev not in _NO_SPACE_AFTER:
            parts.append(" ")
        parts.append(w)
        prev = w
    return "".join(parts)


class WordTokenizer:
    def __init__(self, words: Iterable[str]):
        seen = dict.fromkeys(_SPECIALS)
        for w in words:
            if w not in seen:
                seen[w] = None
        self.id_to_token: list[str] = list(seen)
        self.token_to_id = {t: i for i, t in enumerate(self.id_to_token)}
        self.pad_id = self.token_to_id[PAD]
        self.bos_id = self.token_to_id[BOS]
        self.eos_id = self.token_to_id[EOS]
        self.unk_id = self.token_to_id[UNK]
        self.img_id = self.token_to_id[IMG]

    def __len__(self) -> int:
        return len(self.id_to_token)

    @classmethod
    def build(cls, texts: Iterable[str]) -> "WordTokenizer":
        words: dict[str, None] = {}
        for text in texts:
            for chunk in text.split(IMG_PLACEHOLDER):
                for w in split_words(chunk):
                    words[w] = None
        return cls(sorted(words))

    def encode(self, text: str, img_token_count: int = IMG_TOKEN_COUNT) -> list[int]:
        """Token ids for ``text``; each ``<IMG>`` expands to ``img_token_count``
        image-slot positions."""
        ids: list[int] = []
        chunks = text.split(IMG_PLACEHOLDER)
        for i, chunk in enumerate(chunks):
            if i > 0:
                ids.extend([self.img_id] * img_token_count)
            for w in split_words(chunk):
                ids.append(self.token_to_id.get(w, self.unk_id))
        return ids

    def decode(self, ids: Iterable[int]) -> str:
        words = []
        for i in ids:
            tok = self.id_to_token[i]
            if tok in (PAD, BOS, EOS, UNK):
                continue
            words.append(IMG_PLACEHOLDER if tok == IMG else tok)
        return join_words(words)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(
            json.dumps({"tokens": self.id_to_token}, ensure_ascii=False), "utf-8"
        )

    @classmethod
    def load(cls, path: str | Path) -> "WordTokenizer":
        data = json.loads(Path(path).read_text("utf-8"))
        tok = cls.__new__(cls)
        tok.id_to_token = list(data["tokens"])
        tok.token_to_id = {t: i for i, t in enumerate(tok.id_to_token)}
        tok.pad_id = tok.token_to_id[PAD]
        tok.bos_id = tok.token_to_id[BOS]
        tok.eos_id = tok.token_to_id[EOS]
        tok.unk_id = tok.token_to_id[UNK]
        tok.img_id = tok.token_to_id[IMG]
        return tok
