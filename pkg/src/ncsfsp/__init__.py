"""Networked control with stochastic timing: filtered Smith predictors and MSS certification.

Modules
-------
timing       event sequences (sensing, actuation, end-to-end delays)
discretize   exact discretization over random actuation intervals
delays       integer/fractional delay realization and delayed measurements
compensator  LQR, expected-value models, prediction-error filter, predictor
stability    mean-square stability test via the Kronecker second moment
sim          event-driven Monte-Carlo ensembles and tracking metrics
cli          command-line front end
"""

__version__ = "0.1.0"
