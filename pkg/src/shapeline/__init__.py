"""Musical-shape classification from paired piano recordings.

Submodules: ``kernels`` (numpy layers), ``cqt`` (constant-Q images),
``synth`` (synthetic corpus), ``model`` (Siamese residual network),
``aca`` (classic descriptor baselines), ``evaluation`` and ``cli``.
"""

__version__ = "0.1.0"
