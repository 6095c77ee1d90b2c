"""Policy-gradient routing with a GAT-Edge network embedding for the VRP with finite time horizon."""

__version__ = "0.1.0"
