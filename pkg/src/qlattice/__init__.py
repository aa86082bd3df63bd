"""
Numerical laboratory for quantum spin lattices: Pauli-string operator
algebra, Hamiltonian and Lindblad dynamics on finite windows, light cones,
cumulant clustering, ray-average ergodicity, hydrodynamic projections and
the diffusion lower bound of magnetization-conserving open chains.
"""
__version__ = "0.1.0"

from .errors import *  # noqa: F401,F403
from .operators import (LocalOperator, PauliString, commutator, anticommutator, identity,
                        linear_combination, magnetization, operator_norm, proj_down, proj_up,
                        splus, sminus, sx, sy, sz, translate, from_dense, to_dense, to_sparse,
                        geometry, distance, diameter)
from .states import (ProductGibbsState, FiniteThermalState, conditional_expectation, connected,
                     expect, expect_product, kms_residual)
from .dynamics import (Evolver, Interaction, LindbladGenerator, Window, evolve_hamiltonian,
                       evolve_lindblad, localize, superoperator, xx_interaction, xyz_interaction)
from .lieb_robinson import (LR_PREFACTOR, LightConeGrid, LRVelocityEstimate,
                            commutator_norm_grid, fit_light_cone, theoretical_velocity)
from .cumulants import (MomentFunctional, NonCrossingPartition, Partition, classical_cumulant,
                        cumulant_decay_scan, cumulants_to_moments, enumerate_partitions,
                        free_cumulant, max_min_distance)
from .open_chain import (LindbladModel, derive_current, equilibrium_report,
                         gibbs_stationarity_residual, lower_bound, random_model, validate_model)
from .transport import (ChargeBasis, ExtensiveVector, RayPlan, diffusion_strengths,
                        drude_weight, euler_correlator, extensive_inner, find_conserved_charges,
                        onsager_estimate, project_onto_charges, ray_average, ray_moment)
