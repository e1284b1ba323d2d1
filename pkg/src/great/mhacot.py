"""The four-prompt affordance reasoning chain and its parsing into knowledge texts.

Turns 1-2 (object head) ask which part is touched and why its geometry allows
it. Turns 3-4 (affordance head) ask for the observed interaction and for two
further plausible ones.
"""

from __future__ import annotations

import logging
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

from .errors import GreatError, ParseError
from .mllm_client import NUM_TURNS, ReasoningTranscript, cache_get, cache_put, converse

log = logging.getLogger(__name__)

PROMPT_TEMPLATES = (
    "Point out which part of the {object} in the image interacts with the person.",
    "Explain why this part can interact from the geometric structure of the {object}.",
    "Describe the interaction between {object} and the person.",
    "List two interactions that describe additional common interactions that the {object} can interact with people.",
)

__all__ = [
    "PROMPT_TEMPLATES",
    "KnowledgeRecord",
    "ReasoningTranscript",
    "build_prompt_chain",
    "parse_transcript",
    "run_chain",
    "run_chains",
]


@dataclass
class KnowledgeRecord:
    image_id: str
    object_text: str
    affordance_texts: list  # [observed interaction, potential 1, potential 2]

    def __post_init__(self):
        if len(self.affordance_texts) != 3:
            raise ValueError("a knowledge record carries exactly 3 affordance texts")
        if not self.object_text or not all(self.affordance_texts):
            raise ValueError("knowledge texts must be nonempty")


def build_prompt_chain(object_category, templates=PROMPT_TEMPLATES):
    if not object_category or not str(object_category).strip():
        raise ValueError("object category must be nonempty")
    if len(templates) != NUM_TURNS:
        raise ValueError(f"expected {NUM_TURNS} prompt templates")
    return [t.replace("{object}", object_category) for t in templates]


def run_chain(image, config, cache_dir, templates=PROMPT_TEMPLATES):
    """Return the cached transcript for ``image`` or converse, cache and return it."""
    cached = cache_get(image.id, cache_dir)
    if cached is not None:
        return cached
    prompts = build_prompt_chain(image.object_category, templates)
    answers = converse(image, prompts, config)
    transcript = ReasoningTranscript(image.id, image.object_category, list(zip(prompts, answers)))
    cache_put(transcript, cache_dir)
    return transcript


def run_chains(images, config, cache_dir, templates=PROMPT_TEMPLATES):
    """Run many chains, ``config.concurrency`` conversations at a time.

    Returns ``{image_id: ("hit" | "miss" | "fail", transcript or exception)}``.
    """

    def one(image):
        cached = cache_get(image.id, cache_dir)
        if cached is not None:
            return image.id, ("hit", cached)
        try:
            return image.id, ("miss", run_chain(image, config, cache_dir, templates))
        except GreatError as exc:
            log.warning("reasoning failed for %s: %s", image.id, exc)
            return image.id, ("fail", exc)

    with ThreadPoolExecutor(max_workers=config.concurrency) as pool:
        return dict(pool.map(one, images))


_NUMBERED = re.compile(r"(?:^|(?<=\s))\d+[.)]\s+")
_BULLET = re.compile(r"^\s*(?:[-*•]|\d+[.)])\s*")


def _split_numbered(text):
    marks = list(_NUMBERED.finditer(text))
    if len(marks) < 2:
        return []
    ends = [m.start() for m in marks[1:]] + [len(text)]
    return [text[m.end():e] for m, e in zip(marks, ends)]


def _split_lines(text):
    return [_BULLET.sub("", line) for line in text.splitlines()]


def _split_semicolons(text):
    return text.split(";")


def split_interactions(answer):
    """Split an enumerated answer into items, trying numbering, lines, then semicolons."""
    for strategy in (_split_numbered, _split_lines, _split_semicolons):
        items = [s.strip() for s in strategy(answer)]
        items = [s for s in items if s]
        if len(items) >= 2:
            return items
    return []


def parse_transcript(t):
    if len(t.turns) != NUM_TURNS:
        raise ParseError(f"{t.image_id}: transcript has {len(t.turns)} turns, expected {NUM_TURNS}")
    a1, a2, a3, a4 = (a.strip() for _, a in t.turns)
    items = split_interactions(a4)
    if len(items) < 2:
        raise ParseError(f"{t.image_id}: could not find two interactions in answer 4", raw=t.turns[3][1])
    return KnowledgeRecord(t.image_id, f"{a1} {a2}", [a3, items[0], items[1]])
