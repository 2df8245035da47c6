"""probeforge: cloze-style knowledge probing for text encoders.

Curate a triple-derived benchmark, contrastively rewire an encoder on
tail-masked sentences, probe it by nearest-neighbor retrieval (plus
mask-filling and generation baselines), and score the results.
"""

__version__ = "0.1.0"
