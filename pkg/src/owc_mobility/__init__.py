"""Hybrid Gauss-Markov + LSTM mobility prediction for indoor optical wireless links.

Modules:

* ``core`` - domain types, scenario, angle arithmetic, seeded RNG streams
* ``mobility`` - GM and RWP models, behaviour-rich ground-truth generator
* ``channel`` - LOS optical gain, interference, rate, AP association
* ``nn`` - numpy LSTM with BPTT, Adam, gradient check, binary weight format
* ``predictor`` - residual dataset, training and hybrid prediction
* ``experiments`` - RMSE and data-rate experiments with CSV output
* ``cli`` - ``owc-mobility`` command line
"""

__version__ = "0.1.0"
