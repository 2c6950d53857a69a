"""Shared registry of acceptance outcomes, printed by the terminal-summary hook."""

RESULTS: list[tuple[int, str, str, str]] = []  # (criterion, status, title, detail)
