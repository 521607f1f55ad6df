"""Model-based localization of an inspection drone over photovoltaic plants.

Modules are detected in each frame (edge pipeline or external oriented boxes),
organised into rows and columns, anchored to a georeferenced plant model at a
bench end or gap, and turned into EPnP pose fixes that a Kalman filter fuses
with GNSS velocity. ``pvnav.pipeline.run_replay`` runs the whole chain.
"""

__version__ = "0.1.0"
