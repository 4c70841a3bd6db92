"""Meta-learned neural state-space models with physical constraints.

Modules
-------
autodiff     reverse-mode automatic differentiation on numpy
layers       dense layers, weight sets, initialization
nssm         Case I and Case II neural state-space models
constraints  conic and curl-free output constraints
meta         MAML, FO-MAML, ANIL and Reptile
ekf          extended Kalman filter over learned models
systems      benchmark simulators
metrics      evaluation metrics, dataset splits, reports
config       experiment configuration files
experiments  shared training and evaluation pipelines
cli          command line entry points
"""

__version__ = "0.1.0"
