"""Multi-agent RL workbench: joint-action distance estimation, metric policy
representations, and representation-conditioned DQN/PPO agents."""

__version__ = "0.1.0"
