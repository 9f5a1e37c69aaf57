"""The character alphabet shared by the renderer, the crackers, and the attacks."""

CHARSET = "0123456789ABCDEFGHIJKLMNOPQRSTUVWXYZ"
NUM_CLASSES = len(CHARSET)
BLANK_INDEX = NUM_CLASSES  # sequence recognizers emit one extra non-character class

CHAR_TO_INDEX = {c: i for i, c in enumerate(CHARSET)}


def char_index(char: str) -> int:
    try:
        return CHAR_TO_INDEX[char]
    except KeyError:
        raise ValueError(f"character {char!r} not in charset {CHARSET}") from None


def validate_label(label: str) -> str:
    if not label:
        raise ValueError("label must be non-empty")
    for c in label:
        if c not in CHAR_TO_INDEX:
            raise ValueError(f"character {c!r} not in charset {CHARSET}")
    return label
