"""Bus arrival-time estimation from sparse GPS messages.

Pipeline: hexagonal message-density map -> per-route Douglas-Peucker
segmentation with a density-uniformity objective -> merged segment network
-> hourly dwell-time feature matrix -> GCN + LSTM delay model over an
adjacency augmented with dwell-time correlation -> real-time alpha-beta
position tracking and remaining-trip ETA.
"""

__version__ = "0.1.0"
