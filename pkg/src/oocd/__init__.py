"""Out-of-category document detection with weak supervision.

The pipeline, end to end: train a spherical text embedding on the raw
corpus (``embed``), turn document/category geometry into soft pseudo
labels and an embedding-side confidence (``pseudo``), train a small text
CNN on the confident subset with optional self-training (``classifier``),
then rank documents by classifier confidence and score the ranking
against gold labels (``detect``).  ``synth`` generates benchmark corpora
and ``cli`` wires the stages together on disk.
"""

__version__ = "0.1.0"
