"""Forensic traceback of poisoned training data across data owners.

Given a trained model and a misclassification event, the package ranks the
data owners by their responsibility for the event, using learning-rate
weighted gradient similarities from cached training checkpoints. An
unlearning-based baseline, attack generators, a simulated secret-shared
execution of the scoring, and ranking metrics are included.
"""

__version__ = "0.1.0"
