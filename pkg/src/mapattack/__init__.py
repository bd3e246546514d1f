"""Meta adversarial perturbations for query-efficient targeted black-box attacks."""

__version__ = "0.1.0"
