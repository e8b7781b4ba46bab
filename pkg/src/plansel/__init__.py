"""Online planner selection from typed planning-task graphs."""

__version__ = "0.1.0"

NUM_PLANNERS = 17
TIMEOUT = 1800.0
SENTINEL = 10000.0
