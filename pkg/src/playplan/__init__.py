"""Plan pushing tasks by searching over chunks of recorded play."""

__version__ = "0.1.0"
