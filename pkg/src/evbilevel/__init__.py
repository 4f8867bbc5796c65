"""Event-guided low-light enhancement with bilevel denoiser/enhancer training.

Subpackages and modules:

- ``autodiff``: tape-based reverse-mode tensors, parameter sets, optimizers
- ``events``, ``sim``: event streams, the evtxt format and a synthetic event camera
- ``retinex``, ``denoise``: Retinex split and gradient-guided event filtering
- ``networks``, ``losses``, ``bilevel``: models, objectives and training loops
- ``metrics``, ``plotting``, ``cli``: evaluation, figures and the command line
"""

__version__ = "0.1.0"
