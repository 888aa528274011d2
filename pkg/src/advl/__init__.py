"""Targeted adversarial examples against defensively distilled networks.

White-box attacks search an epsilon box around the input through a tanh
change of variables; black-box attacks see only output probabilities and
average gradients over a Gaussian region around the iterate.
"""

__version__ = "0.1.0"
