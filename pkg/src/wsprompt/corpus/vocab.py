"""The 14-observation chest X-ray vocabulary and its synthetic visual motifs."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

OBSERVATIONS: tuple[str, ...] = (
    "No Finding",
    "Enlarged Cardiomediastinum",
    "Cardiomegaly",
    "Lung Opacity",
    "Lung Lesion",
    "Edema",
    "Consolidation",
    "Pneumonia",
    "Atelectasis",
    "Pneumothorax",
    "Pleural Effusion",
    "Pleural Other",
    "Fracture",
    "Support Devices",
)

UNSEEN_CLASSES: tuple[str, ...] = ("Atelectasis", "Cardiomegaly", "Consolidation", "Edema", "Pleural Effusion")
BASE_CLASSES: tuple[str, ...] = tuple(o for o in OBSERVATIONS if o not in UNSEEN_CLASSES)

SYNONYMS: dict[str, tuple[str, ...]] = {
    "No Finding": ("no finding",),
    "Enlarged Cardiomediastinum": ("enlarged cardiomediastinum", "widened mediastinum", "mediastinal widening"),
    "Cardiomegaly": ("cardiomegaly", "enlarged heart", "cardiac enlargement"),
    "Lung Opacity": ("lung opacity", "opacity", "opacities"),
    "Lung Lesion": ("lung lesion", "nodule", "mass"),
    "Edema": ("edema", "pulmonary edema", "vascular congestion"),
    "Consolidation": ("consolidation", "airspace consolidation"),
    "Pneumonia": ("pneumonia", "infection"),
    "Atelectasis": ("atelectasis", "collapse"),
    "Pneumothorax": ("pneumothorax",),
    "Pleural Effusion": ("pleural effusion", "effusion", "effusions"),
    "Pleural Other": ("pleural thickening", "pleural scarring"),
    "Fracture": ("fracture", "fractures"),
    "Support Devices": ("support devices", "support device", "catheter", "pacemaker"),
}


def _mask(rows: list[str]) -> np.ndarray:
    return np.array([[c == "#" for c in r] for r in rows], dtype=bool)


# 6x6 left-right symmetric glyphs so horizontal flips keep each shape recognisable
_SHAPES: dict[str, np.ndarray] = {
    "block": _mask(["######"] * 6),
    "ring": _mask(["######", "#....#", "#....#", "#....#", "#....#", "######"]),
    "plus": _mask(["..##..", "..##..", "######", "######", "..##..", "..##.."]),
    "hbars": _mask(["######", "######", "......", "......", "######", "######"]),
    "vbars": _mask(["##..##"] * 6),
    "disk": _mask([".####.", "######", "######", "######", "######", ".####."]),
    "cross": _mask(["#....#", ".#..#.", "..##..", "..##..", ".#..#.", "#....#"]),
    "tee": _mask(["######", "######", "..##..", "..##..", "..##..", "..##.."]),
    "stand": _mask(["..##..", "..##..", "..##..", "..##..", "######", "######"]),
    "diamond": _mask(["..##..", ".#..#.", "#....#", "#....#", ".#..#.", "..##.."]),
    "checker": _mask(["##..##", "##..##", "..##..", "..##..", "##..##", "##..##"]),
    "hshape": _mask(["##..##", "##..##", "######", "######", "##..##", "##..##"]),
    "dot": _mask(["......", "......", "..##..", "..##..", "......", "......"]),
}


@dataclass(frozen=True)
class Motif:
    shape: str
    cell: tuple[int, int]  # (row, col) on a 4x4 grid of square cells
    intensity: float

    @property
    def mask(self) -> np.ndarray:
        return _SHAPES[self.shape]

    def region(self, side: int) -> tuple[slice, slice]:
        """Pixel window of the glyph on a ``side``×``side`` canvas."""
        cs = side // 4
        off = (cs - 6) // 2
        r0 = self.cell[0] * cs + off
        c0 = self.cell[1] * cs + off
        return slice(r0, r0 + 6), slice(c0, c0 + 6)


MOTIFS: dict[str, Motif] = {
    "Enlarged Cardiomediastinum": Motif("vbars", (0, 1), 0.55),
    "Cardiomegaly": Motif("disk", (1, 1), 0.65),
    "Lung Opacity": Motif("block", (1, 0), 0.45),
    "Lung Lesion": Motif("dot", (0, 0), 0.75),
    "Edema": Motif("hbars", (2, 0), 0.55),
    "Consolidation": Motif("checker", (2, 1), 0.6),
    "Pneumonia": Motif("ring", (1, 2), 0.6),
    "Atelectasis": Motif("tee", (0, 2), 0.6),
    "Pneumothorax": Motif("diamond", (0, 3), 0.65),
    "Pleural Effusion": Motif("stand", (3, 1), 0.6),
    "Pleural Other": Motif("hshape", (2, 3), 0.5),
    "Fracture": Motif("cross", (3, 2), 0.7),
    "Support Devices": Motif("plus", (2, 2), 0.7),
}


@dataclass(frozen=True)
class ObservationVocabulary:
    names: tuple[str, ...] = OBSERVATIONS
    synonyms: dict = None  # type: ignore[assignment]
    motifs: dict = None  # type: ignore[assignment]

    def __post_init__(self):
        if self.synonyms is None:
            object.__setattr__(self, "synonyms", SYNONYMS)
        if self.motifs is None:
            object.__setattr__(self, "motifs", MOTIFS)
        if len(self.names) != 14 or len(set(self.names)) != 14 or self.names[0] != "No Finding":
            raise ValueError("vocabulary must list 14 unique observations starting with 'No Finding'")

    def __len__(self) -> int:
        return len(self.names)

    def index(self, name: str) -> int:
        return self.names.index(name)


DEFAULT_VOCAB = ObservationVocabulary()


def class_token_name(name: str) -> str:
    """Lowercased class name as it appears in text, e.g. ``pleural effusion``."""
    return name.lower()
