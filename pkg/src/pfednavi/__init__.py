"""Structure-aware personalized federated learning on a synthetic navigation task.

The package simulates a fleet of clients that jointly train a small
instruction-following navigation agent.  Clients differ in floor plan,
instruction style, and path statistics; the personalization protocol decides
per round which decoder layers stay local, fuses the rest element by element,
and aggregates uploads by dataset size.
"""

__version__ = "0.1.0"
