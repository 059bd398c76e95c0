"""Spatio-temporal alignment of measure series.

Soft-DTW over debiased unbalanced optimal transport frame costs, with
barycenters, the Delannoy-number shift bounds used to pick the smoothing
parameter, and a nearest-neighbor forecasting pipeline.
"""

from .align import (dirac_series, dirac_shift_gaps, enumerate_alignments, sdtw,
                    sdtw_backward, sdtw_batch, sdtw_bruteforce, sdtw_forward,
                    sdtw_value_and_grad, softmin)
from .barycenter import (BarycenterResult, SdtwBarycenterResult, barycenter_objective,
                         debiased_uot_barycenter, euclidean_mean, framewise_barycenter, grad_J,
                         sdtw_barycenter, sta_barycenter, sta_cost_matrix, sta_distance,
                         uot_barycenter_biased)
from .delannoy import (BoundConstants, DelannoyTable, InfeasibleHeuristicError, beta_heuristic,
                       central_delannoy_log, delannoy_log, dirac_lower_bound,
                       dirac_lower_bound_limit, quad_lower_bound, shift_scale)
from .forecast import (Dataset, ForecastConfig, ForecastTask, evaluate, forecast,
                       generate_moving_blobs, knn, score)
from .geometry import GroundGeometry, kernel_apply
from .io import StsdError, read_stsd, write_stsd
from .uot import (ConvergenceError, DualState, UotParams, debiased_uot, debiased_uot_matrix,
                  kl_divergence, sinkhorn_uot, symmetric_sinkhorn, uot_grad)

__version__ = "0.1.0"
