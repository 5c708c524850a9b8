//! Scenario loading, runs, sweeps and fuzzing.

pub mod fuzz;
pub mod scenario;

pub use scenario::{Scenario, ScenarioError, ScenarioFile};

use crate::analysis::{check_requirements, check_serializable, LivenessScope, RequirementReport};
use crate::ids::Protocol;
use crate::protocol::{run, RunResult};
use std::path::{Path, PathBuf};

/// Liveness coverage for a hand-written scenario: unconditional for the
/// pessimistic protocol, well-behaved clients for the core protocol, and
/// for the optimistic protocol only when nobody misbehaves.
pub fn default_scope(s: &Scenario) -> LivenessScope {
    let clean = s.config.script.corrupted.values().all(|v| v.is_empty()) && s.config.topo.directory.malicious.is_empty();
    match s.config.protocol {
        Protocol::Pcb => LivenessScope::Everything,
        Protocol::Ccb => LivenessScope::HonestClients,
        Protocol::Ocb if clean => LivenessScope::HonestClients,
        Protocol::Ocb => LivenessScope::Skip,
    }
}

pub struct RunOutput {
    pub result: RunResult,
    pub report: RequirementReport,
    pub serial: Result<Vec<crate::ids::TxnId>, crate::analysis::SerialError>,
    pub files: Vec<PathBuf>,
}

impl RunOutput {
    pub fn ok(&self) -> bool {
        self.report.ok() && self.serial.is_ok()
    }
}

/// Runs `s`, checks it, and writes the trace and reports into `out`.
pub fn run_scenario(s: &Scenario, out: &Path) -> std::io::Result<RunOutput> {
    std::fs::create_dir_all(out)?;
    let result = run(s.config.clone());
    let report = check_requirements(&result, default_scope(s));
    let serial = check_serializable(&result);
    let stem = &s.file.name;
    let trace = out.join(format!("{stem}.trace.jsonl"));
    std::fs::write(&trace, result.trace.to_jsonl())?;
    let req = out.join(format!("{stem}.requirements.txt"));
    std::fs::write(&req, report.to_string())?;
    let ser = out.join(format!("{stem}.serializability.txt"));
    let text = match &serial {
        Ok(order) => format!(
            "serializable; {} committed; order: {}\n",
            order.len(),
            order.iter().map(|t| t.to_string()).collect::<Vec<_>>().join(" ")
        ),
        Err(e) => format!("NOT serializable: {e}\n"),
    };
    std::fs::write(&ser, text)?;
    Ok(RunOutput { result, report, serial, files: vec![trace, req, ser] })
}
