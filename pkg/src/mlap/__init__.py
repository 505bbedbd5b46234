"""Meta-learning of weight priors for stochastic networks via PAC-Bayes objectives."""

__version__ = "0.1.0"
