"""Slot-level simulator of a RIS-aided multi-cell network with base-station
sleep modes, cell zooming and user association, plus PPO/DQN learners and a
cascaded RIS phase optimizer."""

__version__ = "0.1.0"
