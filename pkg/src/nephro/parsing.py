"""Lenient extraction of JSON objects from model replies."""

from __future__ import annotations

import json
import math
import re
from typing import Any

_FENCE = re.compile(r"```(?:json|JSON)?\s*\n?(.*?)```", re.DOTALL)


class ReplyParseError(ValueError):
    pass


def extract_json_object(text: Any) -> dict:
    """First JSON object found in ``text``, preferring fenced blocks.

    Raises ReplyParseError for anything else, including non-string input.
    """
    if not isinstance(text, str):
        raise ReplyParseError(f"reply is {type(text).__name__}, not text")
    candidates = [m.group(1) for m in _FENCE.finditer(text)]
    for block in candidates:
        try:
            obj = json.loads(block)
        except (ValueError, RecursionError):
            continue
        if isinstance(obj, dict):
            return obj
    decoder = json.JSONDecoder()
    for m in re.finditer(r"\{", text):
        try:
            obj, _ = decoder.raw_decode(text, m.start())
        except (ValueError, RecursionError):
            continue
        if isinstance(obj, dict):
            return obj
    raise ReplyParseError("no JSON object in reply")


def as_finite_float(value: Any, name: str) -> float:
    if isinstance(value, bool):
        raise ReplyParseError(f"{name} must be a number, got a boolean")
    if isinstance(value, str):
        try:
            value = float(value.strip())
        except ValueError:
            raise ReplyParseError(f"{name} must be a number, got {value!r}") from None
    if not isinstance(value, (int, float)):
        raise ReplyParseError(f"{name} must be a number, got {type(value).__name__}")
    value = float(value)
    if not math.isfinite(value):
        raise ReplyParseError(f"{name} must be finite")
    return value


def as_text(value: Any, name: str, required: bool = True) -> str:
    if value is None and not required:
        return ""
    if not isinstance(value, str):
        raise ReplyParseError(f"{name} must be a string")
    return value


def as_list(value: Any, name: str) -> list:
    if value is None:
        return []
    if not isinstance(value, list):
        raise ReplyParseError(f"{name} must be a list")
    return value
