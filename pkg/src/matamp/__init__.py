"""Matrix recovery from random linear measurements via approximate message
passing with singular-value shrinkage, with NIHT/APG baselines and a
Monte-Carlo phase-transition harness."""

__version__ = "0.1.0"

from .errors import InvalidInput, NotFound  # noqa: F401
