"""Templated organ prompt bank for vision-language alignment."""

from __future__ import annotations

import json
import re
from typing import Sequence

from .errors import EmptyInput
from .volume_io import BTCV_ORGANS

NOUNS = ("slice", "scan", "image", "view")
VERBS = ("showing", "depicting", "highlighting", "containing")
TEMPLATE = "a CT {noun} {verb} the {organ}"

PROMPT_PATTERN = re.compile(
    r"a CT (slice|scan|image|view) (showing|depicting|highlighting|containing) the (?P<organ>.+)"
)

PromptBank = dict  # organ name -> list of 16 prompts, noun-major order


def btcv_organ_names() -> list[str]:
    return [name for oid, name in sorted(BTCV_ORGANS.items()) if oid != 0]


def build_prompts(organs: Sequence[str]) -> PromptBank:
    """16 prompts per organ: every noun crossed with every verb, noun-major."""
    organs = list(organs)
    if not organs:
        raise EmptyInput("prompt bank needs at least one organ")
    bank: PromptBank = {}
    for organ in organs:
        if not organ or not organ.strip():
            raise EmptyInput("organ names must be non-empty")
        bank[organ] = [TEMPLATE.format(noun=n, verb=v, organ=organ) for n in NOUNS for v in VERBS]
    return bank


def bank_to_json(bank: PromptBank) -> str:
    return json.dumps(bank, indent=2)
