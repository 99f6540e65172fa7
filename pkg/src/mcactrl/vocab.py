"""Tiny caption vocabulary for the toy denoiser's cross-attention."""

from __future__ import annotations

from .errors import InvalidArgument

NULL = "<null>"

SHAPES = ("circle", "square", "triangle")
# ordered so that neighbours are perceptually close; "palette distance" is index distance
COLOR_NAMES = ("white", "yellow", "orange", "red", "magenta", "blue", "cyan", "green")
TEXTURES = ("plain", "striped", "dotted")
BACKGROUND_KINDS = ("gradient", "checker")
GLUE = ("on", "and")

TOKENS: tuple[str, ...] = (NULL, *SHAPES, *COLOR_NAMES, *TEXTURES, *BACKGROUND_KINDS, *GLUE)
TOKEN_IDS: dict[str, int] = {tok: i for i, tok in enumerate(TOKENS)}

MAX_TOKENS = 16


def encode(words: str | list[str], length: int = MAX_TOKENS) -> list[int]:
    """Map a caption to a fixed-length id list, right-padded with the null token."""
    if isinstance(words, str):
        words = words.split()
    if len(words) > length:
        raise InvalidArgument(f"caption has {len(words)} tokens, limit is {length}")
    ids = []
    for w in words:
        if w not in TOKEN_IDS:
            raise InvalidArgument(f"unknown token {w!r}")
        ids.append(TOKEN_IDS[w])
    return ids + [TOKEN_IDS[NULL]] * (length - len(ids))


def decode(ids: list[int]) -> str:
    words = []
    for i in ids:
        if not 0 <= i < len(TOKENS):
            raise InvalidArgument(f"token id {i} outside vocabulary")
        if TOKENS[i] != NULL:
            words.append(TOKENS[i])
    return " ".join(words)


def null_tokens(length: int = MAX_TOKENS) -> list[int]:
    return [TOKEN_IDS[NULL]] * length


def word_index(caption: str | list[str], word: str) -> int:
    words = caption.split() if isinstance(caption, str) else caption
    try:
        return words.index(word)
    except ValueError:
        raise InvalidArgument(f"{word!r} does not occur in prompt {' '.join(words)!r}") from None


def as_token_ids(tokens, length: int = MAX_TOKENS):
    """Normalise a caption string, word list, id list or id tensor to a ``[B, length]`` id tensor."""
    import torch

    if isinstance(tokens, str):
        return torch.tensor([encode(tokens, length)])
    if isinstance(tokens, (list, tuple)) and tokens and all(isinstance(w, str) for w in tokens):
        # a list of captions, or the words of a single caption
        if all(w in TOKEN_IDS for w in tokens) and not any(" " in w for w in tokens):
            return torch.tensor([encode(list(tokens), length)])
        return torch.tensor([encode(c, length) for c in tokens])
    ids = torch.as_tensor(tokens, dtype=torch.long)
    if ids.ndim == 1:
        ids = ids[None]
    if ids.ndim != 2 or ids.shape[1] != length:
        raise InvalidArgument(f"token ids must have shape [batch, {length}], got {tuple(ids.shape)}")
    if ids.numel() and (ids.min() < 0 or ids.max() >= len(TOKENS)):
        raise InvalidArgument("token id outside vocabulary")
    return ids
