"""Host extension for the plant-based-diet pack: message classification into
photo / rating / free text, and the rating guard."""
from __future__ import annotations

import re

from protoflow.packs import ClassifiedMessage, RejectedMessage


def classify(msg, tz_name: str):
    if msg.attachments:
        return ClassifiedMessage("photo", {"attachments": len(msg.attachments)})
    body = msg.body.strip()
    if not body:
        return RejectedMessage("empty message")
    if re.fullmatch(r"\d+", body):
        return ClassifiedMessage("rating", {"rating": int(body)})
    return ClassifiedMessage("text", {"description": msg.body})


def valid_rating(context: dict, payload: dict) -> bool:
    rating = payload.get("rating")
    return isinstance(rating, int) and 1 <= rating <= 5


def meal_rated(ctx) -> None:
    ctx.set("last_meal_rating", ctx.payload.get("rating"))


GUARDS = {"valid_rating": valid_rating}
EFFECTS = {"meal_rated": meal_rated}
