"""Position-based soft-tissue simulation with correspondence-free
real-to-sim registration against observed point clouds."""

__version__ = "0.1.0"

from .errors import (  # noqa: E402
    DegenerateCluster,
    DegenerateConstraint,
    EmptyCloud,
    InsufficientPoints,
    InvertedTet,
    LengthMismatch,
    NonFiniteState,
    NonHeightField,
    OutOfBounds,
    ParseError,
    PbdRegError,
    UnknownKind,
    ValidationError,
)
from .pbd_core import (  # noqa: E402
    ConstraintSet,
    Distance,
    Grasp,
    ParticleSystem,
    Registration,
    ShapeMatch,
    SolverConfig,
    Volume,
    simulate_step,
    solve_shape_match,
)
from .geometry import SurfaceMesh, VolumeMesh, SpatialIndex, extrude_volume, triangulate_cloud  # noqa: E402
from .sdf_grid import GridGeometry, SdfGrid, build_initial_sdf, interpolate  # noqa: E402
from .deformation import InverseDeformationField, build_idf, deformed_sdf  # noqa: E402
from .registration import (  # noqa: E402
    RegistrationConfig,
    RegistrationProblem,
    evaluation_error,
    registration_cost,
    registration_gradient,
)
from .observation import ObservationConfig, PointCloud, generate_observation, load_cloud, save_cloud  # noqa: E402
