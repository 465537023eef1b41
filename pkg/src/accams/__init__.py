"""Additive co-clustering for matrix approximation and completion."""
from .matrix import (DataError, DenseMatrix, DualIndex, SparseMatrix, build_dual_index,
                     load_dense, load_triples, split_train_test)
from .stencil import (BitCost, Stencil, StencilModel, bit_cost, deserialize, evaluate,
                      predict, predict_many, refit_template, residual, serialize)
from .kmeans import FitOptions, column_clustering, fit_accams, kmeans_objective, row_clustering
from .sampler import (DivergenceError, Hyperparams, SampleSet, SamplerState,
                      block_log_marginal, crp_assignment_weights, fit_baccams, gibbs_sweep)
from .evaluation import EvalReport, rmse, size_accuracy_curve
from .interpret import assignment_entropy, hierarchy, similar_items
from .synthetic import planted_matrix, planted_model

__version__ = "0.1.0"
