"""Centralized-training / decentralized-execution laboratory.

Train a joint expert on small particle tasks, distill it into per-agent
policies by iterative supervision (including learned inter-agent
communication), and check the underlying imitation bounds exactly on tabular
toy instances.
"""

__version__ = "0.1.0"
