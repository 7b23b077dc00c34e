from .designs import DGP_TABLE, DgpSpec, dgp_id_for, dgp_spec
from .population import (
    BasePopulation,
    DesignConfig,
    Population,
    build_population,
    matching_without_replacement,
    synth_base_population,
    true_late,
)
from .simulation import (
    METRICS_COLUMNS,
    REPLICATION_COLUMNS,
    MetricsRow,
    ReplicationRecord,
    SimulationResult,
    SimulationSettings,
    add_ranks,
    aggregate,
    population_for,
    read_metrics,
    read_replications,
    replication_seed,
    run_simulation,
    write_metrics,
    write_replications,
)
from .config import SimulationConfig, load_config, parse_config, run_config
