"""Desk-scale uncertainty-guided corrective imitation learning.

A retargeting solver maps tracked hand keypoints to a simulated hand,
policies train on collected demonstrations, failed rollouts are scored
with MC-dropout uncertainty, and the highest-uncertainty segments are
surfaced for targeted corrective relabeling.
"""

__version__ = "0.1.0"
