"""Multiscale finite elements for Poisson problems in perforated domains."""

from .errors import (
    ConfigurationError,
    CorrectorError,
    DegenerateBasisError,
    DegeneratePatchError,
    GeometryError,
    NumericalError,
    PerflodError,
    SolverError,
)
from .geometry import (
    GeometryKind,
    GeometrySpec,
    alignment_step,
    is_solid,
    solid_area_fraction,
)
from .mesh import (
    PatchSet,
    PerforatedMesh,
    StructuredMesh,
    build_structured_mesh,
    dump_mesh,
    interior_coarse_nodes,
    patch,
    perforate,
)
from .fem import (
    assemble_load,
    assemble_mass,
    assemble_stiffness,
    h1_seminorm,
    l2_norm,
    solve_spd,
)
from .interp import (
    CoarseSpace,
    InterpOperator,
    build_clement_interp,
    build_coarse_space,
    build_projective_interp,
    stability_ratio,
)
from .lod import (
    CorrectorBasis,
    MultiscaleSolution,
    PartitionWeights,
    build_corrector_basis,
    build_corrector_problem,
    ideal_corrector_basis,
    load_corrector_basis,
    multiscale_solve,
    partition_weights,
    save_corrector_basis,
    solve_corrector,
)
from .poincare import (
    PartitionGraph,
    PoincareEstimate,
    SquarePatch,
    build_partition_graph,
    path_multiplicity_bound,
    rayleigh_oracle,
    shape_regular_bound,
    simplex_face_constant,
    square_patch,
    telescoped_bound,
    telescoped_constant,
)
from .experiments import (
    CSV_HEADER,
    ExperimentConfig,
    ExperimentRecord,
    config_from_dict,
    parse_dyadic,
    run_convergence,
    run_decay,
    run_poincare,
    run_solve,
    step_forcing,
    write_csv,
)

__version__ = "0.1.0"
