"""Regenerate src/cate/data/brca_concepts.json.

The vectors are placeholders (seeded random directions plus per-template jitter);
the names and template list follow the BRCA concept tables so counts match a real
text-encoder export.
"""
import json
from pathlib import Path

import numpy as np

TEMPLATES = [
    "CLASSNAME.",
    "a photomicrograph showing CLASSNAME.",
    "a photomicrograph of CLASSNAME.",
    "an image of CLASSNAME.",
    "an image showing CLASSNAME.",
    "an example of CLASSNAME.",
    "CLASSNAME is shown.",
    "this is CLASSNAME.",
    "there is CLASSNAME.",
    "a histopathological image showing CLASSNAME.",
    "a histopathological image of CLASSNAME.",
    "a histopathological photograph of CLASSNAME.",
    "a histopathological photograph showing CLASSNAME.",
    "shows CLASSNAME.",
    "presence of CLASSNAME.",
    "CLASSNAME is present.",
    "an H&E stained image of CLASSNAME.",
    "an H&E stained image showing CLASSNAME.",
    "an H&E image showing CLASSNAME.",
    "an H&E image of CLASSNAME.",
    "CLASSNAME, H&E stain.",
    "CLASSNAME, H&E",
]

CLASS_SPECIFIC = {
    0: [  # IDC
        "invasive ductal carcinoma",
        "breast invasive ductal carcinoma",
        "invasive ductal carcinoma of the breast",
        "invasive carcinoma of the breast, ductal pattern",
        "idc",
    ],
    1: [  # ILC
        "invasive lobular carcinoma",
        "breast invasive lobular carcinoma",
        "invasive lobular carcinoma of the breast",
        "invasive carcinoma of the breast, lobular pattern",
        "ilc",
    ],
}

CLASS_AGNOSTIC = [
    "adipocytes", "adipose tissue", "fat cells", "fat tissue", "fat",
    "connective tissue", "stroma", "fibrous tissue", "collagen",
    "necrotic tissue", "necrosis",
    "normal breast tissue", "normal breast cells", "normal breast",
]

DIM = 32


def main(out: Path) -> None:
    rng = np.random.default_rng(20240501)
    names = [n for group in CLASS_SPECIFIC.values() for n in group] + CLASS_AGNOSTIC
    concepts = {}
    for name in names:
        center = rng.standard_normal(DIM)
        center /= np.linalg.norm(center)
        emb = center + 0.2 * rng.standard_normal((len(TEMPLATES), DIM))
        concepts[name] = [[round(float(x), 6) for x in row] for row in emb]
    classes = {n: label for label, group in CLASS_SPECIFIC.items() for n in group}
    doc = {"dim": DIM, "templates": TEMPLATES, "concepts": concepts, "classes": classes}
    out.write_text(json.dumps(doc) + "\n", encoding="utf-8")


if __name__ == "__main__":
    main(Path(__file__).resolve().parents[1] / "src" / "cate" / "data" / "brca_concepts.json")
