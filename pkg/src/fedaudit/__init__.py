"""Privacy auditing for federated image classifiers.

Trains small CNN classifiers with simulated FedAvg, then audits the
global model with a resolution-erosion confidence-decay membership
attack plus loss- and entropy-threshold baselines, reporting ROC/AUC,
per-client breakdowns, query budgets, and timing.
"""

__version__ = "0.1.0"
