"""Character-level tokenizer over a closed alphabet.

The corpus is fully synthetic, so a fixed alphabet covers every string the
pipeline can produce (lowercased words, the context/instruction templates'
punctuation). Four reserved ids sit in front of the alphabet; ``SEP_ID`` is
never produced by the tokenizer itself, it marks segment junctions inside
prompts and its embedding is owned by the speech model, not the frozen LM.
"""

from __future__ import annotations

from .errors import ValidationError

ALPHABET = "abcdefghijklmnopqrstuvwxyz .,:"

PAD_ID = 0
BOS_ID = 1
EOS_ID = 2
SEP_ID = 3

SPECIAL_TOKENS = ("<pad>", "<bos>", "<eos>", "<sep>")
NUM_SPECIALS = len(SPECIAL_TOKENS)


class CharTokenizer:
    def __init__(self, alphabet: str = ALPHABET):
        if len(set(alphabet)) != len(alphabet):
            raise ValidationError("alphabet contains duplicate characters")
        self.alphabet = alphabet
        self._char_to_id = {c: i + NUM_SPECIALS for i, c in enumerate(alphabet)}
        self._id_to_char = {i: c for c, i in self._char_to_id.items()}

    @property
    def vocab_size(self) -> int:
        return NUM_SPECIALS + len(self.alphabet)

    def encode(self, text: str) -> list[int]:
        """Lowercases and maps each character to its id.

        Raises ValidationError on characters outside the alphabet so that
        corpus bugs surface instead of silently dropping content.
        """
        ids = []
        for ch in text.lower():
            tid = self._char_to_id.get(ch)
            if tid is None:
                raise ValidationError(f"character {ch!r} not in tokenizer alphabet")
            ids.append(tid)
        return ids

    def decode(self, ids, *, stop_at_eos: bool = True) -> str:
        chars = []
        for tid in ids:
            tid = int(tid)
            if tid == EOS_ID and stop_at_eos:
                break
            if tid < NUM_SPECIALS:
                continue
            ch = self._id_to_char.get(tid)
            if ch is None:
                raise ValidationError(f"token id {tid} outside vocabulary")
            chars.append(ch)
        return "".join(chars)
