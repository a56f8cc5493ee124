"""The closed set of 30 high-level neurological sign categories."""
from __future__ import annotations

import string

CATEGORIES: tuple[str, ...] = (
    "Behavior", "Bowel and Bladder", "Cognitive", "Deformity", "Dysautonomia",
    "Dystonia", "Extraocular Movements", "Fatigue", "Gait", "Head Shape",
    "Hearing", "Hyperkinesia", "Hyperreflexia", "Hypertonia", "Hypokinesia",
    "Hyporeflexia", "Hypotonia", "Incoordination", "Muscle Atrophy",
    "Other Cranial Nerve", "Pain", "Seizure", "Sensory", "Skin", "Sleep",
    "Speech", "Tremor", "Unclassified", "Vision", "Weakness",
)
UNCLASSIFIED = "Unclassified"
CATEGORY_INDEX = {c: i for i, c in enumerate(CATEGORIES)}
_BY_KEY = {c.lower(): c for c in CATEGORIES}


def canonical_category(name: str) -> str | None:
    """Map a backend-supplied category name onto the closed set, or None."""
    key = " ".join(str(name).strip(string.punctuation + string.whitespace).lower().split())
    return _BY_KEY.get(key)
