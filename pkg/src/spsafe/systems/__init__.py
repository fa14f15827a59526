"""Concrete slow/fast systems: scalar toy, two-link arm, primal-dual filter."""

from .arm import (ArmParams, arm_barrier, arm_barrier_reference, arm_bundle, arm_components,
                  arm_controller, arm_controller_reference, arm_coriolis, arm_end_effector,
                  arm_gravity, arm_mass_matrix, arm_nominal_controller, arm_position_margins,
                  arm_potential, arm_system)
from .primal_dual import (PrimalDualParams, kkt_pair, pd_barrier, pd_bundle,
                          primal_dual_system, qp_oracle, qp_reference)
from .toy import ToyParams, toy_barrier, toy_bundle, toy_controller, toy_nominal, toy_system

BUNDLES = {"toy": (ToyParams, toy_bundle), "arm": (ArmParams, arm_bundle),
           "primal_dual": (PrimalDualParams, pd_bundle)}

__all__ = [n for n in dir() if not n.startswith("_")]
