"""Loss of H^1 regularity for passive scalars transported by a constructed flow.

The package builds the velocity field cube by cube: trigonometric shears on
the torus, pulled back along an area-preserving octagonal track, iterated
into exponentially growing blocks and rescaled onto a family of cubes
clustering at a density point of the datum.  The transported scalar is
evaluated exactly by composing closed-form flow maps.
"""

from .errors import (AliasWarning, AmplitudeSearchFailed, DomainError, FiniteDifferenceWarning,
                     NoClosedForm, NoGrowthData, PointOffTrack, ReglossError, SlotRejected,
                     SuperCritical, TimeRangeError, UnsupportedField, ZeroGradient)
from .fields import (AnalyticField, Cube, GridField, Point, ScalarField, StationaryVelocity, TimeSchedule,
                     grid_sample, interpolate, schedule_flow_map)
from .shears import ShearSpec, select_shear, shear_growth_ratio, sum_identity_defect
from .track import build_track, extend_divfree, lift_map, track_map
from .block import Block, build_block, grow_unit_step
from .plan import (CubePlan, find_density_point, plan_cubes, series_field, series_solution,
                   verify_plan)
from .advect import SolutionHandle, rk4_trajectory
from .norms import (NormReport, fractional_h_norm, growth_curve, l2_grad_norm, velocity_norm_series,
                    wkp_seminorm)
from .data import make_datum

__version__ = "0.1.0"

__all__ = [
    "AliasWarning",
    "AmplitudeSearchFailed",
    "DomainError",
    "FiniteDifferenceWarning",
    "NoClosedForm",
    "NoGrowthData",
    "PointOffTrack",
    "ReglossError",
    "SlotRejected",
    "SuperCritical",
    "TimeRangeError",
    "UnsupportedField",
    "ZeroGradient",
    "AnalyticField",
    "Cube",
    "GridField",
    "Point",
    "ScalarField",
    "StationaryVelocity",
    "TimeSchedule",
    "grid_sample",
    "interpolate",
    "schedule_flow_map",
    "ShearSpec",
    "select_shear",
    "shear_growth_ratio",
    "sum_identity_defect",
    "build_track",
    "extend_divfree",
    "lift_map",
    "track_map",
    "Block",
    "build_block",
    "grow_unit_step",
    "CubePlan",
    "find_density_point",
    "plan_cubes",
    "series_field",
    "series_solution",
    "verify_plan",
    "SolutionHandle",
    "rk4_trajectory",
    "NormReport",
    "fractional_h_norm",
    "growth_curve",
    "l2_grad_norm",
    "velocity_norm_series",
    "wkp_seminorm",
    "make_datum",
    "__version__",
]
