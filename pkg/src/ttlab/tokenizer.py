"""Character-level tokenizer with a fixed, task-defined vocabulary.

Four reserved tokens (pad, end-of-sequence, user/assistant role markers)
followed by a fixed printable charset: punctuation and operators, digits,
and both letter cases.  Role markers encode chat structure so multi-turn
transcripts (question / attempt / feedback / reflection) are representable.
"""

PAD, EOS, USER, ASST = 0, 1, 2, 3
_SPECIAL_NAMES = ["<pad>", "<eos>", "<user>", "<asst>"]

_CHARSET = (
    " !%()*+,-./0123456789:=?"
    "ABCDEFGHIJKLMNOPQRSTUVWXYZ"
    "abcdefghijklmnopqrstuvwxyz"
)


class Vocab:
    """Bidirectional char <-> id mapping over the fixed charset."""

    def __init__(self):
        self._chars = list(_CHARSET)
        self._to_id = {c: i + len(_SPECIAL_NAMES) for i, c in enumerate(self._chars)}

    @property
    def size(self):
        return len(_SPECIAL_NAMES) + len(self._chars)

    def encode(self, text):
        try:
            return [self._to_id[c] for c in text]
        except KeyError as exc:
            raise ValueError(f"character {exc.args[0]!r} not in vocabulary") from None

    def decode(self, ids):
        out = []
        for i in ids:
            if i < len(_SPECIAL_NAMES):
                out.append(_SPECIAL_NAMES[i])
            elif i - len(_SPECIAL_NAMES) < len(self._chars):
                out.append(self._chars[i - len(_SPECIAL_NAMES)])
            else:
                raise ValueError(f"token id {i} out of range")
        return "".join(out)

    def decode_text(self, ids):
        """Decode, dropping special tokens (for attempt/answer strings)."""
        return "".join(
            self._chars[i - len(_SPECIAL_NAMES)]
            for i in ids
            if len(_SPECIAL_NAMES) <= i < self.size
        )

    def can_encode(self, text):
        return all(c in self._to_id for c in text)
