"""Through-wall radar target localization at desk scale.

Simulates 2D TMz scattering from square dielectric targets behind complex
walls, builds labeled detector-signal datasets, and trains dense networks
to regress target positions.
"""

__version__ = "0.1.0"

from .em_core import (
    FieldState,
    GridSpec,
    ProbeRecord,
    SimulationDiverged,
    SourceSpec,
    apply_source,
    make_grid,
    run_simulation,
    simulate_fields,
    step_fields,
    total_field_energy,
)
from .scene import (
    SCENARIOS,
    InvalidSceneError,
    MaterialMap,
    Scene,
    TargetSpec,
    WallSpec,
    build_material_map,
    enumerate_pairs,
    enumerate_single_positions,
    paper_frame_to_domain,
    wall_for_scenario,
)
from .dataset import (
    Dataset,
    GenerationConfig,
    GenerationError,
    Sample,
    add_awgn,
    extract_features,
    fit_standardizer,
    apply_standardizer,
    generate_dataset,
    load_dataset,
    save_dataset,
    split_dataset,
    with_awgn,
    with_standardization,
)
from .neural import (
    History,
    ModelSpec,
    TrainConfig,
    TrainingDiverged,
    adam_init,
    adam_step,
    backward,
    build_single_target_model,
    build_two_target_model,
    forward,
    hit_accuracy,
    init_params,
    load_model,
    msle,
    parameter_count,
    predict,
    save_model,
    train,
)
