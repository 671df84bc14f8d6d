//! Machine-side workflow runner.
//!
//! A generic workflow skeleton ([`parse_workflow`]) is concretised with a
//! scenario parameter file and a machine parameter file ([`concretise`])
//! into a [`ConcretePlan`]: steps in dependency order, commands fully
//! substituted, scattered members packed onto node jobs. [`execute_plan`]
//! then runs the plan against a machine connector. The document formats and
//! the run report schema are described in `docs/runner-formats.md`.

mod exec;
mod params;
mod plan;
mod workflow;

use std::fmt;

use crate::machine::ConnectorError;
use crate::syntax::{Pos, SyntaxError};

pub use exec::{
    execute_plan, ExecMode, MemberReport, MemberStatus, NodeJobReport, RunReport, RunStatus, StepFailure, StepReport,
};
pub use params::{parse_parameters, ParameterSet, Provenance, RawValue};
pub use plan::{concretise, pack_members, Binding, BindingSource, ConcretePlan, NodeJob, PlannedMember, PlannedStep};
pub use workflow::{
    parse_workflow, CoresSpec, InputDecl, MachineWorkflow, OutputDecl, Scatter, Source, Step, Value, ValueType,
};

/// Placement key read from the machine parameter file.
pub const CORES_PER_NODE: &str = "cores_per_node";

#[derive(Debug, thiserror::Error)]
pub enum RunnerError {
    #[error(transparent)]
    Syntax(#[from] SyntaxError),
    #[error("step `{step}` refers to unknown `{name}`")]
    UnknownReference { step: String, name: String },
    #[error("cycle between steps: {}", .0.join(" -> "))]
    CycleDetected(Vec<String>),
    #[error("input `{input}`: expected {expected}, got {got}")]
    TypeError { input: String, expected: String, got: String },
    #[error("required input `{0}` is not bound")]
    UnboundRequiredInput(String),
    #[error("member needs {cores_per_member} cores but nodes have {cores_per_node}")]
    MemberTooWide { cores_per_member: u32, cores_per_node: u32 },
    #[error("{}", StepFailedDisplay(.0))]
    StepFailed(Box<StepFailure>),
    #[error("step `{step}`: {message}")]
    Invalid { step: String, message: String },
    #[error("i/o error on {path}: {message}")]
    Io { path: String, message: String },
    #[error(transparent)]
    Connector(#[from] ConnectorError),
}

struct StepFailedDisplay<'a>(&'a StepFailure);

impl fmt::Display for StepFailedDisplay<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = self.0;
        match s.member {
            Some(m) => write!(f, "step `{}` failed at member {m}: {}", s.step_id, s.detail),
            None => write!(f, "step `{}` failed: {}", s.step_id, s.detail),
        }
    }
}

impl RunnerError {
    pub(crate) fn syntax(pos: Pos, message: impl Into<String>) -> Self {
        RunnerError::Syntax(SyntaxError::new(pos, message))
    }

    pub(crate) fn invalid(step: &str, message: impl Into<String>) -> Self {
        RunnerError::Invalid {
            step: step.to_string(),
            message: message.into(),
        }
    }
}
