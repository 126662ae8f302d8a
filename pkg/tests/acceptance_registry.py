"""Shared registry the acceptance tests and the summary hook both import.

Kept outside conftest.py so the test module and the plugin see the same
module object (conftest itself is loaded under a special name by pytest).
"""

ACCEPTANCE_OUTCOMES: dict[int, tuple[str, str]] = {}
ACCEPTANCE_DETAILS: dict[int, str] = {}


def record_detail(criterion: int, text: str) -> None:
    ACCEPTANCE_DETAILS[criterion] = text
