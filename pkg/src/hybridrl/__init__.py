"""Group-relative RL post-training with hybrid think/no_think templates, at toy scale."""

__version__ = "0.1.0"
