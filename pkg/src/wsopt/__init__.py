"""Window-setting optimization toolkit.

Library + CLI for studying how CT windowing interacts with a small
convolutional classifier: exact window algebra, a trainable clamped-ReLU
windowing layer with hand-written gradients, seeded synthetic phantoms with a
planted low-attenuation band, training protocols (plain / trainable window /
freeze-unfreeze-freeze), and a ROC/AUC evaluation harness.
"""

__version__ = "0.1.0"
