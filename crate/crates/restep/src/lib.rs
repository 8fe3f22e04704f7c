//! IO, file formats, meta-training, and the benchmark harness around
//! `restep-core`: bit-exact checkpoint serialization, a desk-scale
//! first-order meta-trainer producing the checkpoints the library
//! repurposes, and the stepsize-robustness sweep with All / Top-1 / Top-40%
//! reporting.

pub mod bench;
pub mod checkpoint;
pub mod metatrain;
pub mod plot;

pub use bench::{
    metrics, sign_test_p, sweep, BenchError, CurvePoint, DomainSpec, MetricsReport, PresetConfig,
    RawRow, RawTable, ReportEntry, Stat, StepsizeGrid, SweepConfig,
};
pub use checkpoint::{
    load_checkpoint, load_episodes, save_checkpoint, save_episodes, CheckpointError,
    CheckpointMeta, Dtype, Manifest,
};
pub use metatrain::{
    maml_train, select_checkpoint, MetaTrainConfig, MetaTrainError, SelectPolicy, TrainHistory,
    TrainRecord,
};
