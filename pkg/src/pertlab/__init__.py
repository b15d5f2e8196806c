"""pertlab: perturbation-learning laboratory.

Train a two-layer leaky-ReLU network on clean data, craft normalized
single-step gradient perturbations, train a fresh network on the mislabeled
perturbations (alone or added to the clean inputs), and compare everything
against the kernel-side predictions that explain why the second network
still classifies clean data.
"""

__version__ = "0.1.0"
