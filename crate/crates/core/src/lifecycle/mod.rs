//! Request lifecycle: submission, authorization, placement, provisioning,
//! lease timing, failure-driven reassignment and the waiting queue.

mod engine;
mod state;

pub use engine::{
    Engine, EngineTables, IntakeOutcome, LeaseEvent, LifecycleConfig, LifecycleError,
    PipelineReport, PipelineStep, RequestRecord, StepReport, SubmitRequest,
};
pub use state::{
    next_status, replay, LifecycleEvent, ReplayError, RequestStatus, SubStatus, TransitionRecord,
    TRANSITIONS,
};
