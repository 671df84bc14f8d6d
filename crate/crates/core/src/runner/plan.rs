//! Concretisation and node packing.

use std::collections::BTreeMap;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::params::{ParameterSet, RawValue};
use super::workflow::{coerce, render, CoresSpec, MachineWorkflow, Source, Step, Value};
use super::{RunnerError, CORES_PER_NODE};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum BindingSource {
    Scenario,
    Machine,
    Default,
    Unbound,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Binding {
    pub value: Option<Value>,
    pub source: BindingSource,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeJob {
    pub members_assigned: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlannedMember {
    pub index: usize,
    pub command: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlannedStep {
    pub step_id: String,
    pub depends_on: Vec<String>,
    pub outputs: Vec<String>,
    pub scattered: bool,
    pub cores_per_member: u32,
    pub nodes_per_job: u32,
    #[serde(with = "crate::machine::secs")]
    pub walltime: Duration,
    pub members: Vec<PlannedMember>,
    pub node_jobs: Vec<NodeJob>,
}

/// A skeleton with every input bound and every command rendered. Paths in
/// commands are relative to the run's working directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConcretePlan {
    pub workflow_id: String,
    pub cores_per_node: Option<u32>,
    pub bindings: BTreeMap<String, Binding>,
    /// Dependency order.
    pub steps: Vec<PlannedStep>,
    /// Workflow output name -> `step/output`.
    pub outputs: BTreeMap<String, String>,
    /// Parameter keys the skeleton does not declare.
    pub unused_parameters: Vec<String>,
}

/// Split `n` members of `m` cores each over nodes of `c` cores, in order.
pub fn pack_members(n: usize, m: u32, c: u32) -> Result<Vec<NodeJob>, RunnerError> {
    if m == 0 || c == 0 {
        return Err(RunnerError::invalid("pack", "core counts must be positive"));
    }
    if m > c {
        return Err(RunnerError::MemberTooWide {
            cores_per_member: m,
            cores_per_node: c,
        });
    }
    let per_node = (c / m) as usize;
    Ok((0..n)
        .step_by(per_node)
        .map(|start| NodeJob {
            members_assigned: (start..(start + per_node).min(n)).collect(),
        })
        .collect())
}

fn bind(
    wf: &MachineWorkflow,
    scenario: &ParameterSet,
    machine: &ParameterSet,
) -> Result<BTreeMap<String, Binding>, RunnerError> {
    let mut out = BTreeMap::new();
    for decl in &wf.inputs {
        let layered = [
            (scenario.get(&decl.name), BindingSource::Scenario),
            (machine.get(&decl.name), BindingSource::Machine),
        ];
        let binding = match layered.into_iter().find_map(|(v, s)| v.map(|v| (v, s))) {
            Some((raw, source)) => Binding {
                value: Some(coerce(&decl.name, raw, &decl.ty)?),
                source,
            },
            None => match &decl.default {
                Some(v) => Binding {
                    value: Some(v.clone()),
                    source: BindingSource::Default,
                },
                None if decl.required => return Err(RunnerError::UnboundRequiredInput(decl.name.clone())),
                None => Binding {
                    value: None,
                    source: BindingSource::Unbound,
                },
            },
        };
        out.insert(decl.name.clone(), binding);
    }
    Ok(out)
}

fn positive_int(input: &str, v: &Value) -> Result<u32, RunnerError> {
    match v {
        Value::Int(i) if *i >= 1 && *i <= i64::from(u32::MAX) => Ok(*i as u32),
        other => Err(RunnerError::TypeError {
            input: input.to_string(),
            expected: "positive int".into(),
            got: other.to_string(),
        }),
    }
}

fn cores_per_node(
    wf: &MachineWorkflow,
    bindings: &BTreeMap<String, Binding>,
    machine: &ParameterSet,
) -> Result<Option<u32>, RunnerError> {
    if wf.input(CORES_PER_NODE).is_some() {
        return bindings[CORES_PER_NODE]
            .value
            .as_ref()
            .map(|v| positive_int(CORES_PER_NODE, v))
            .transpose();
    }
    match machine.get(CORES_PER_NODE) {
        None => Ok(None),
        Some(RawValue::Scalar { text, quoted: false }) => match text.parse::<u32>() {
            Ok(v) if v >= 1 => Ok(Some(v)),
            _ => Err(RunnerError::TypeError {
                input: CORES_PER_NODE.into(),
                expected: "positive int".into(),
                got: text.clone(),
            }),
        },
        Some(_) => Err(RunnerError::TypeError {
            input: CORES_PER_NODE.into(),
            expected: "positive int".into(),
            got: "non-integer".into(),
        }),
    }
}

/// Merge parameters (scenario over machine over declared defaults) and
/// expand the skeleton into an executable plan.
pub fn concretise(
    wf: &MachineWorkflow,
    scenario: &ParameterSet,
    machine: &ParameterSet,
) -> Result<ConcretePlan, RunnerError> {
    let bindings = bind(wf, scenario, machine)?;
    let cpn = cores_per_node(wf, &bindings, machine)?;
    let mut unused: Vec<String> = scenario
        .bindings
        .keys()
        .chain(machine.bindings.keys())
        .filter(|k| wf.input(k).is_none() && k.as_str() != CORES_PER_NODE)
        .cloned()
        .collect();
    unused.sort();
    unused.dedup();

    let steps = wf
        .topo_order()?
        .into_iter()
        .map(|i| plan_step(&wf.steps[i], &bindings, cpn))
        .collect::<Result<Vec<_>, _>>()?;
    let outputs = wf
        .outputs
        .iter()
        .map(|o| (o.name.clone(), format!("{}/{}", o.step, o.output)))
        .collect();
    Ok(ConcretePlan {
        workflow_id: wf.workflow_id.clone(),
        cores_per_node: cpn,
        bindings,
        steps,
        outputs,
        unused_parameters: unused,
    })
}

fn need_cpn(cpn: Option<u32>) -> Result<u32, RunnerError> {
    cpn.ok_or_else(|| RunnerError::UnboundRequiredInput(CORES_PER_NODE.into()))
}

fn plan_step(step: &Step, bindings: &BTreeMap<String, Binding>, cpn: Option<u32>) -> Result<PlannedStep, RunnerError> {
    let value_of = |src: &Source| -> String {
        match src {
            Source::Input(name) => bindings[name].value.as_ref().map(Value::to_string).unwrap_or_default(),
            Source::StepOutput { step, output } => format!("{step}/{output}"),
        }
    };
    let base = |name: &str| -> Option<String> {
        if let Some(src) = step.input(name) {
            return Some(value_of(src));
        }
        if step.outputs.iter().any(|o| o == name) {
            return Some(format!("{}/{name}", step.step_id));
        }
        (name == "step_dir").then(|| step.step_id.clone())
    };
    let render_member = |index: usize, cores: u32, element: Option<(&str, String)>| {
        render(&step.command_template, |name| match (name, &element) {
            ("member_index", _) => Some(index.to_string()),
            ("cores_per_member", _) => Some(cores.to_string()),
            (n, Some((over, v))) if n == *over => Some(v.clone()),
            (n, _) => base(n),
        })
        .map_err(|e| RunnerError::invalid(&step.step_id, e))
    };
    let mut depends_on: Vec<String> = step.producers().map(str::to_string).collect();
    depends_on.sort();
    depends_on.dedup();

    let (cores_per_member, nodes_per_job, members, node_jobs) = match &step.scatter {
        Some(sc) => {
            let cpm = match &sc.cores_per_member {
                CoresSpec::Fixed(v) => *v,
                CoresSpec::Input(name) => match &bindings[name].value {
                    Some(v) => positive_int(name, v)?,
                    None => return Err(RunnerError::UnboundRequiredInput(name.clone())),
                },
            };
            let cpn = need_cpn(cpn)?;
            let Some(Source::Input(array_input)) = step.input(&sc.over) else {
                return Err(RunnerError::invalid(&step.step_id, "scatter input must be a workflow input"));
            };
            let elements = match &bindings[array_input].value {
                Some(Value::Array(items)) => items.clone(),
                Some(other) => vec![other.clone()],
                None => Vec::new(),
            };
            let members = elements
                .iter()
                .enumerate()
                .map(|(i, v)| {
                    Ok(PlannedMember {
                        index: i,
                        command: render_member(i, cpm, Some((sc.over.as_str(), v.to_string())))?,
                    })
                })
                .collect::<Result<Vec<_>, RunnerError>>()?;
            let jobs = pack_members(members.len(), cpm, cpn)?;
            (cpm, 1, members, jobs)
        }
        None => {
            let nodes = if step.cores == 1 {
                1
            } else {
                step.cores.div_ceil(need_cpn(cpn)?)
            };
            let member = PlannedMember {
                index: 0,
                command: render_member(0, step.cores, None)?,
            };
            let job = NodeJob {
                members_assigned: vec![0],
            };
            (step.cores, nodes, vec![member], vec![job])
        }
    };
    Ok(PlannedStep {
        step_id: step.step_id.clone(),
        depends_on,
        outputs: step.outputs.clone(),
        scattered: step.scatter.is_some(),
        cores_per_member,
        nodes_per_job,
        walltime: step.walltime,
        members,
        node_jobs,
    })
}
