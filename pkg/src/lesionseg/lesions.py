from __future__ import annotations

from enum import Enum


class LesionType(str, Enum):
    """The five lesion classes; declaration order is the mask channel order."""

    DRUSEN = "drusen"
    EXUDATE = "exudate"
    HAEMORRHAGE = "haemorrhage"
    OTHER = "other"
    SCAR = "scar"

    @property
    def channel(self) -> int:
        return LESION_ORDER.index(self)

    @classmethod
    def parse(cls, value: "LesionType | str | int") -> "LesionType":
        if isinstance(value, cls):
            return value
        if isinstance(value, int):
            return LESION_ORDER[value]
        key = str(value).strip().lower()
        if key == "hemorrhage":
            key = "haemorrhage"
        try:
            return cls(key)
        except ValueError:
            raise ValueError(f"unknown lesion type {value!r}; expected one of {[t.value for t in cls]}") from None


LESION_ORDER: tuple[LesionType, ...] = tuple(LesionType)
NUM_LESIONS = len(LESION_ORDER)
