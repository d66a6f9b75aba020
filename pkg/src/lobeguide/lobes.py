"""Lung lobe identifiers shared by the volume grids, the phantom, and report parsing.

Lobe codes double as the voxel values of a lobe label map (0 is background).
"""
from __future__ import annotations

import re
from enum import IntEnum


class LobeId(IntEnum):
    """The five lung lobes."""

    RUL = 1
    RML = 2
    RLL = 3
    LUL = 4
    LLL = 5

    @property
    def full_name(self) -> str:
        return _FULL_NAMES[self]

    def to_string(self) -> str:
        return self.name

    @classmethod
    def parse(cls, text: str) -> "LobeId":
        """Parse a single lobe from an abbreviation or a full name.

        Raises ValueError if the text is not exactly one known lobe alias.
        """
        key = " ".join(text.strip().lower().split())
        if key in _ALIASES:
            return _ALIASES[key]
        raise ValueError(f"not a recognizable lung lobe: {text!r}")


_FULL_NAMES = {
    LobeId.RUL: "right upper lobe",
    LobeId.RML: "right middle lobe",
    LobeId.RLL: "right lower lobe",
    LobeId.LUL: "left upper lobe",
    LobeId.LLL: "left lower lobe",
}

# Alias table for free-text scanning. "Inferior" and the RIL/LIL shorthand are
# synonyms of the lower lobes in some reporting styles.
_ALIASES: dict[str, LobeId] = {}
for _lobe, _full in _FULL_NAMES.items():
    _ALIASES[_lobe.name.lower()] = _lobe
    _ALIASES[_full] = _lobe
_ALIASES.update(
    {
        "ril": LobeId.RLL,
        "lil": LobeId.LLL,
        "right inferior lobe": LobeId.RLL,
        "left inferior lobe": LobeId.LLL,
    }
)

_ALIAS_PATTERN = re.compile(
    r"\b(" + "|".join(sorted((re.escape(a) for a in _ALIASES), key=len, reverse=True)) + r")\b",
    re.IGNORECASE,
)


def find_lobe_mentions(text: str) -> set[LobeId]:
    """Return every lobe mentioned in free text, by abbreviation or full name."""
    found = set()
    normalized = " ".join(text.split())
    for match in _ALIAS_PATTERN.finditer(normalized):
        found.add(_ALIASES[match.group(1).lower()])
    return found
