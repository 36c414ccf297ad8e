"""codearena: a self-hostable competition platform.

Participants push code to per-subaccount git repositories; submissions are
evaluated in resource-limited sandboxes through a staged job pipeline on a
dynamically scaled worker pool; results land on multi-metric, multi-category
leaderboards with Pareto filtering.
"""

__version__ = "0.1.0"
