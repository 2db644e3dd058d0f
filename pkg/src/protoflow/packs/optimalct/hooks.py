"""Host extension for the OptimalCT pack: check-in session openers."""
from __future__ import annotations


def open_med_checkin(ctx) -> None:
    ctx.start_checkin(["med_checkin"])


def open_surgery_confirm(ctx) -> None:
    ctx.start_checkin(["surgery_confirm"])


GUARDS: dict = {}
EFFECTS = {
    "open_med_checkin": open_med_checkin,
    "open_surgery_confirm": open_surgery_confirm,
}
