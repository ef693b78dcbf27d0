"""Early prediction of ICU hyperkalemia from day-1 observations.

Modules: ``ingest`` (event tables), ``clinical`` (AKI staging, outcome labels,
cohorts), ``features`` (day-1 matrix, kNN imputation, normalization),
``models`` (logistic regression, random forest, gradient boosting),
``explain`` (exact Shapley attributions), ``evaluation`` (lead-time AUC table)
and ``cli``.
"""

__version__ = "0.1.0"
