"""Desk-scale autoregressive driving planner over a discrete kinematic
action vocabulary, with preference fine-tuning and a closed-loop style
metric suite on procedurally generated scenes."""

__version__ = "0.1.0"
