"""Tree-based retrieval at desk scale.

The pipeline: synthetic item/behavior generation -> contrastively trained
content embeddings -> hierarchical 2-means index tree -> a node estimator
combining two behavior-search units with a mixture-of-experts head ->
beam-search retrieval -> recall / hierarchical-recall evaluation.
"""

__version__ = "0.1.0"
