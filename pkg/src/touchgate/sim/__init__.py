"""Contact-rich 2.5D benchmark tasks, dataset generation, and file formats."""

from .world import (COLORS, TASK_IDS, TASKS, VOCAB, VOCAB_IDS, SimConfig, World,
                    evaluate_success, run_scripted_episode)

__all__ = [
    "COLORS", "TASK_IDS", "TASKS", "VOCAB", "VOCAB_IDS", "SimConfig", "World",
    "evaluate_success", "run_scripted_episode",
]
