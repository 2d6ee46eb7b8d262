//! Incremental training loop, exemplar memory and the training schemes.

mod config;
mod memory;
mod schemes;
mod sequence;
mod train;

pub use config::{PhaseSchedule, Scheme, SchemeConfig};
pub use memory::{update_exemplars, ExemplarMemory};
pub use schemes::{
    bridge_teacher, dd_new_teacher, effective_lambda, run_bridge_phase, run_dd_step,
    run_first_task, run_split_phase, run_std_step, BranchedNet, BridgeDiagnostics, DdDiagnostics,
    SplitDiagnostics,
};
pub use sequence::{initial_net, run_sequence, StepDiagnostics, StepRecord};
pub use train::{PhaseLog, TeacherSnapshot};
