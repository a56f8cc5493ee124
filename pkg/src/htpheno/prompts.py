"""Prompt templates for the three chat-completion stages."""
from __future__ import annotations

import json
import re
from dataclasses import dataclass
from string import Template

from .categories import CATEGORIES

_SLOT_RE = re.compile(r"\$\{?[A-Za-z_]")


class PromptError(ValueError):
    pass


@dataclass(frozen=True)
class PromptTemplate:
    id: str
    system_text: str
    user_text: str

    def render(self, **slots: str) -> list[dict]:
        try:
            user = Template(self.user_text).substitute(slots)
        except KeyError as e:
            raise PromptError(f"{self.id}: missing slot {e.args[0]!r}") from None
        if _SLOT_RE.search(user):
            raise PromptError(f"{self.id}: unresolved placeholder in rendered prompt")
        return [
            {"role": "system", "content": self.system_text},
            {"role": "user", "content": user},
        ]


_category_list = ", ".join(f"'{c},'" for c in CATEGORIES[:-1]) + f" '{CATEGORIES[-1]}.'"

IDENTIFY = PromptTemplate(
    id="identify",
    system_text=(
        "You are a neurologist analyzing a case summary from OMIM. Your input is text "
        "containing 'Clinical Features' and 'Description'. Extract relevant neurological "
        "symptoms (patient complaints) and signs (findings on examination). Here's how the "
        "output should look:\n\n"
        "'Signs': ['symptom a', 'symptom b', 'symptom c']"
    ),
    user_text="${text}",
)

CATEGORIZE = PromptTemplate(
    id="categorize",
    system_text=(
        "You are a neurologist analyzing a list of signs. Classify each sign into one of "
        "these categories:\n\n"
        f"{_category_list}\n\n"
        "Your output should be a JSON object with each category as a key and a list of "
        "signs in that category as items."
    ),
    user_text="${signs}",
)

NORMALIZE = PromptTemplate(
    id="normalize",
    system_text=(
        "You are a neurologist tasked with mapping each sign to a concept in the Human "
        "Phenotype Ontology (HPO). Your output should be a JSON object with each input sign "
        "as a key and two item values: the 'HPO Term' and the 'HPO ID.'\n"
        "For example:\n\n"
        "{'input': 'Apraxia oral,'\n"
        "  'HPO Term': 'Oromotor apraxia,'\n"
        "  'HPO ID': 'HP:0000687'}\n\n"
        "If the input term cannot be mapped to HPO, return 'not-mappable' in the 'HPO Term' "
        "and 'HPO ID' fields."
    ),
    user_text="${signs}",
)

TEMPLATES = {t.id: t for t in (IDENTIFY, CATEGORIZE, NORMALIZE)}


def sign_list_payload(signs) -> str:
    return json.dumps([s.text for s in signs], ensure_ascii=False)
