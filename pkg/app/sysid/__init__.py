"""System identification library: PEM, Empirical Bayes and Full Bayes estimators."""

__version__ = "0.1.0"
