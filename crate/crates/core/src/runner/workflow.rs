//! Workflow skeleton documents.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::params::RawValue;
use super::RunnerError;
use crate::syntax::{parse_document, Mapping, Node, Pos};
use crate::walltime::parse_walltime;

pub const DEFAULT_STEP_WALLTIME: &str = "01:00:00";

/// Placeholders every command template may use.
pub(crate) const BUILTINS: [&str; 3] = ["member_index", "cores_per_member", "step_dir"];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum ValueType {
    String,
    Int,
    Float,
    File,
    Array(Box<ValueType>),
}

impl ValueType {
    pub fn parse(s: &str) -> Option<Self> {
        let s = s.trim();
        if let Some(inner) = s.strip_prefix("array<").and_then(|r| r.strip_suffix('>')) {
            let inner = ValueType::parse(inner)?;
            if matches!(inner, ValueType::Array(_)) {
                return None;
            }
            return Some(ValueType::Array(Box::new(inner)));
        }
        Some(match s {
            "string" => ValueType::String,
            "int" => ValueType::Int,
            "float" => ValueType::Float,
            "file" => ValueType::File,
            _ => return None,
        })
    }

    pub fn is_array(&self) -> bool {
        matches!(self, ValueType::Array(_))
    }
}

impl fmt::Display for ValueType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ValueType::String => f.write_str("string"),
            ValueType::Int => f.write_str("int"),
            ValueType::Float => f.write_str("float"),
            ValueType::File => f.write_str("file"),
            ValueType::Array(t) => write!(f, "array<{t}>"),
        }
    }
}

impl From<ValueType> for String {
    fn from(t: ValueType) -> String {
        t.to_string()
    }
}

impl TryFrom<String> for ValueType {
    type Error = String;
    fn try_from(s: String) -> Result<Self, String> {
        ValueType::parse(&s).ok_or_else(|| format!("unknown type `{s}`"))
    }
}

/// A typed input value. `file` inputs are carried as strings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Value {
    Int(i64),
    Float(f64),
    Str(String),
    Array(Vec<Value>),
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Value::Int(i) => write!(f, "{i}"),
            Value::Float(x) => write!(f, "{x}"),
            Value::Str(s) => f.write_str(s),
            Value::Array(items) => {
                for (i, v) in items.iter().enumerate() {
                    if i > 0 {
                        f.write_str(" ")?;
                    }
                    write!(f, "{v}")?;
                }
                Ok(())
            }
        }
    }
}

fn describe_scalar(text: &str, quoted: bool) -> &'static str {
    if quoted {
        "string"
    } else if text.parse::<i64>().is_ok() {
        "int"
    } else if text.parse::<f64>().is_ok() {
        "float"
    } else {
        "string"
    }
}

fn coerce_scalar(text: &str, quoted: bool, ty: &ValueType) -> Option<Value> {
    match ty {
        ValueType::String | ValueType::File => Some(Value::Str(text.to_string())),
        ValueType::Int if !quoted => text.parse().ok().map(Value::Int),
        ValueType::Float if !quoted => text.parse().ok().filter(|x: &f64| x.is_finite()).map(Value::Float),
        _ => None,
    }
}

/// Type-check a raw parameter value against a declared type.
pub(crate) fn coerce(input: &str, raw: &RawValue, ty: &ValueType) -> Result<Value, RunnerError> {
    let mismatch = |got: String| RunnerError::TypeError {
        input: input.to_string(),
        expected: ty.to_string(),
        got,
    };
    match (raw, ty) {
        (RawValue::List(items), ValueType::Array(elem)) => items
            .iter()
            .map(|(text, quoted)| {
                coerce_scalar(text, *quoted, elem)
                    .ok_or_else(|| mismatch(format!("array element {}", describe_scalar(text, *quoted))))
            })
            .collect::<Result<Vec<_>, _>>()
            .map(Value::Array),
        (RawValue::List(_), _) => Err(mismatch("array".into())),
        (RawValue::Scalar { .. }, ValueType::Array(_)) => Err(mismatch("scalar".into())),
        (RawValue::Scalar { text, quoted }, _) => {
            coerce_scalar(text, *quoted, ty).ok_or_else(|| mismatch(describe_scalar(text, *quoted).into()))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputDecl {
    pub name: String,
    #[serde(rename = "type")]
    pub ty: ValueType,
    pub required: bool,
    pub default: Option<Value>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Input(String),
    StepOutput { step: String, output: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CoresSpec {
    Fixed(u32),
    Input(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Scatter {
    /// A step input fed by an array-typed workflow input.
    pub over: String,
    pub cores_per_member: CoresSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Step {
    pub step_id: String,
    pub command_template: String,
    pub inputs: Vec<(String, Source)>,
    pub outputs: Vec<String>,
    pub scatter: Option<Scatter>,
    /// Cores for an unscattered step.
    pub cores: u32,
    #[serde(with = "crate::machine::secs")]
    pub walltime: Duration,
}

impl Step {
    pub fn input(&self, name: &str) -> Option<&Source> {
        self.inputs.iter().find(|(n, _)| n == name).map(|(_, s)| s)
    }

    pub fn producers(&self) -> impl Iterator<Item = &str> {
        self.inputs.iter().filter_map(|(_, s)| match s {
            Source::StepOutput { step, .. } => Some(step.as_str()),
            Source::Input(_) => None,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutputDecl {
    pub name: String,
    pub step: String,
    pub output: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MachineWorkflow {
    pub workflow_id: String,
    pub inputs: Vec<InputDecl>,
    pub steps: Vec<Step>,
    pub outputs: Vec<OutputDecl>,
}

impl MachineWorkflow {
    pub fn input(&self, name: &str) -> Option<&InputDecl> {
        self.inputs.iter().find(|i| i.name == name)
    }

    pub fn step(&self, id: &str) -> Option<&Step> {
        self.steps.iter().find(|s| s.step_id == id)
    }

    fn index_of(&self, id: &str) -> Option<usize> {
        self.steps.iter().position(|s| s.step_id == id)
    }

    /// Producer -> consumer edges as step indices, deduplicated.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let mut edges = BTreeSet::new();
        for (c, step) in self.steps.iter().enumerate() {
            for p in step.producers() {
                if let Some(p) = self.index_of(p) {
                    edges.insert((p, c));
                }
            }
        }
        edges.into_iter().collect()
    }

    /// Kahn's algorithm, always taking the earliest-declared ready step.
    pub fn topo_order(&self) -> Result<Vec<usize>, RunnerError> {
        let n = self.steps.len();
        let edges = self.edges();
        let mut indegree = vec![0usize; n];
        for &(_, c) in &edges {
            indegree[c] += 1;
        }
        let mut ready: BTreeSet<usize> = (0..n).filter(|&i| indegree[i] == 0).collect();
        let mut order = Vec::with_capacity(n);
        while let Some(i) = ready.pop_first() {
            order.push(i);
            for &(p, c) in &edges {
                if p == i {
                    indegree[c] -= 1;
                    if indegree[c] == 0 {
                        ready.insert(c);
                    }
                }
            }
        }
        if order.len() < n {
            return Err(RunnerError::CycleDetected(self.find_cycle().unwrap_or_default()));
        }
        Ok(order)
    }

    /// A cycle in data-flow order, starting at its earliest-declared step.
    pub fn find_cycle(&self) -> Option<Vec<String>> {
        let n = self.steps.len();
        let mut succ = vec![Vec::new(); n];
        for (p, c) in self.edges() {
            succ[p].push(c);
        }
        // 0 = unvisited, 1 = on stack, 2 = done
        let mut color = vec![0u8; n];
        for root in 0..n {
            if color[root] != 0 {
                continue;
            }
            let mut stack: Vec<(usize, usize)> = vec![(root, 0)];
            color[root] = 1;
            while let Some(&mut (node, ref mut next)) = stack.last_mut() {
                if let Some(&s) = succ[node].get(*next) {
                    *next += 1;
                    match color[s] {
                        0 => {
                            color[s] = 1;
                            stack.push((s, 0));
                        }
                        1 => {
                            let start = stack.iter().position(|&(v, _)| v == s).expect("on stack");
                            let mut cycle: Vec<usize> = stack[start..].iter().map(|&(v, _)| v).collect();
                            let min_at = cycle.iter().enumerate().min_by_key(|(_, &v)| v).map(|(i, _)| i)?;
                            cycle.rotate_left(min_at);
                            return Some(cycle.into_iter().map(|i| self.steps[i].step_id.clone()).collect());
                        }
                        _ => {}
                    }
                } else {
                    color[node] = 2;
                    stack.pop();
                }
            }
        }
        None
    }
}

/// `{name}` placeholders in a template; `{{` and `}}` are literal braces.
pub(crate) fn placeholders(template: &str) -> Result<Vec<String>, String> {
    let mut names = Vec::new();
    render(template, |name| {
        names.push(name.to_string());
        Some(String::new())
    })?;
    Ok(names)
}

/// Substitute placeholders; `lookup` returning `None` is an error.
pub(crate) fn render(template: &str, mut lookup: impl FnMut(&str) -> Option<String>) -> Result<String, String> {
    let mut out = String::with_capacity(template.len());
    let mut chars = template.char_indices().peekable();
    while let Some((i, c)) = chars.next() {
        match c {
            '{' if chars.peek().map(|&(_, c)| c) == Some('{') => {
                chars.next();
                out.push('{');
            }
            '}' if chars.peek().map(|&(_, c)| c) == Some('}') => {
                chars.next();
                out.push('}');
            }
            '{' => {
                let rest = &template[i + 1..];
                let end = rest.find('}').ok_or("unclosed `{` in command")?;
                let name = &rest[..end];
                if name.is_empty() || !name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_') {
                    return Err(format!("bad placeholder `{{{name}}}`"));
                }
                out.push_str(&lookup(name).ok_or_else(|| name.to_string())?);
                for _ in 0..=end {
                    chars.next();
                }
            }
            '}' => return Err("unmatched `}` in command".into()),
            c => out.push(c),
        }
    }
    Ok(out)
}

fn is_identifier(s: &str) -> bool {
    !s.is_empty()
        && s.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-')
        && !s.starts_with('-')
}

fn scalar_text<'a>(node: &'a Node, what: &str) -> Result<&'a str, RunnerError> {
    Ok(node.expect_scalar(what)?.text.as_str())
}

pub(crate) fn raw_value(node: &Node, what: &str) -> Result<RawValue, RunnerError> {
    match node {
        Node::Scalar(s) => Ok(RawValue::Scalar {
            text: s.text.clone(),
            quoted: s.quoted,
        }),
        Node::Seq(items, _) => items
            .iter()
            .map(|i| match i {
                Node::Scalar(s) => Ok((s.text.clone(), s.quoted)),
                other => Err(RunnerError::syntax(other.pos(), format!("{what}: arrays hold scalars only"))),
            })
            .collect::<Result<Vec<_>, _>>()
            .map(RawValue::List),
        Node::Map(m) => Err(RunnerError::syntax(m.pos, format!("{what}: nested mappings are not allowed"))),
    }
}

fn check_keys(map: &Mapping, allowed: &[&str], what: &str) -> Result<(), RunnerError> {
    for (key, pos, _) in &map.entries {
        if !allowed.contains(&key.as_str()) {
            return Err(RunnerError::syntax(*pos, format!("{what}: unknown field `{key}`")));
        }
    }
    Ok(())
}

fn parse_type_text(text: &str, pos: Pos, input: &str) -> Result<(ValueType, bool), RunnerError> {
    let (body, optional) = match text.strip_suffix('?') {
        Some(b) => (b, true),
        None => (text, false),
    };
    let ty = ValueType::parse(body)
        .ok_or_else(|| RunnerError::syntax(pos, format!("input `{input}`: unknown type `{body}`")))?;
    Ok((ty, !optional))
}

fn parse_input(name: &str, pos: Pos, node: &Node) -> Result<InputDecl, RunnerError> {
    if !is_identifier(name) {
        return Err(RunnerError::syntax(pos, format!("bad input name `{name}`")));
    }
    let (ty, mut required, default) = match node {
        Node::Scalar(s) => {
            let (ty, req) = parse_type_text(&s.text, s.pos, name)?;
            (ty, req, None)
        }
        Node::Map(m) => {
            check_keys(m, &["type", "default", "required"], name)?;
            let ty_node = m
                .get("type")
                .ok_or_else(|| RunnerError::syntax(m.pos, format!("input `{name}`: missing `type`")))?;
            let (ty, mut req) = parse_type_text(scalar_text(ty_node, "type")?, ty_node.pos(), name)?;
            if let Some(r) = m.get("required") {
                req = match scalar_text(r, "required")? {
                    "true" => true,
                    "false" => false,
                    other => return Err(RunnerError::syntax(r.pos(), format!("required: expected true/false, got `{other}`"))),
                };
            }
            let default = m
                .get("default")
                .map(|d| raw_value(d, name).and_then(|raw| coerce(name, &raw, &ty)))
                .transpose()?;
            (ty, req, default)
        }
        Node::Seq(_, p) => return Err(RunnerError::syntax(*p, format!("input `{name}`: expected a type"))),
    };
    if default.is_some() {
        required = false;
    }
    Ok(InputDecl {
        name: name.to_string(),
        ty,
        required,
        default,
    })
}

fn parse_source(text: &str) -> Source {
    match text.split_once('/') {
        Some((step, output)) => Source::StepOutput {
            step: step.to_string(),
            output: output.to_string(),
        },
        None => Source::Input(text.to_string()),
    }
}

fn parse_step(step_id: &str, pos: Pos, node: &Node) -> Result<Step, RunnerError> {
    if !is_identifier(step_id) {
        return Err(RunnerError::syntax(pos, format!("bad step name `{step_id}`")));
    }
    let m = node.expect_map(step_id)?;
    check_keys(m, &["run", "in", "out", "scatter", "cores", "walltime"], step_id)?;
    let command_template = scalar_text(
        m.get("run")
            .ok_or_else(|| RunnerError::syntax(m.pos, format!("step `{step_id}`: missing `run`")))?,
        "run",
    )?
    .to_string();
    let mut inputs = Vec::new();
    if let Some(n) = m.get("in").filter(|n| !n.is_null()) {
        for (name, p, src) in &n.expect_map("in")?.entries {
            if !is_identifier(name) {
                return Err(RunnerError::syntax(*p, format!("bad step input name `{name}`")));
            }
            inputs.push((name.clone(), parse_source(scalar_text(src, name)?)));
        }
    }
    let mut outputs = Vec::new();
    if let Some(n) = m.get("out").filter(|n| !n.is_null()) {
        let items = n
            .as_seq()
            .ok_or_else(|| RunnerError::syntax(n.pos(), "out: expected a list of names"))?;
        for item in items {
            let name = scalar_text(item, "out")?;
            if !is_identifier(name) || outputs.iter().any(|o| o == name) || inputs.iter().any(|(i, _)| i == name) {
                return Err(RunnerError::syntax(item.pos(), format!("bad or duplicate output name `{name}`")));
            }
            outputs.push(name.to_string());
        }
    }
    let scatter = match m.get("scatter") {
        None => None,
        Some(n) => {
            let sm = n.expect_map("scatter")?;
            check_keys(sm, &["over", "cores_per_member"], "scatter")?;
            let over = sm
                .get("over")
                .ok_or_else(|| RunnerError::syntax(sm.pos, "scatter: missing `over`"))?;
            let cpm = sm
                .get("cores_per_member")
                .map(|c| {
                    let text = scalar_text(c, "cores_per_member")?;
                    Ok::<_, RunnerError>(match text.parse::<u32>() {
                        Ok(0) => return Err(RunnerError::syntax(c.pos(), "cores_per_member must be at least 1")),
                        Ok(v) => CoresSpec::Fixed(v),
                        Err(_) if is_identifier(text) => CoresSpec::Input(text.to_string()),
                        Err(_) => return Err(RunnerError::syntax(c.pos(), format!("bad cores_per_member `{text}`"))),
                    })
                })
                .transpose()?
                .unwrap_or(CoresSpec::Fixed(1));
            Some(Scatter {
                over: scalar_text(over, "over")?.to_string(),
                cores_per_member: cpm,
            })
        }
    };
    let cores = match m.get("cores") {
        None => 1,
        Some(c) => scalar_text(c, "cores")?
            .parse::<u32>()
            .ok()
            .filter(|&v| v > 0)
            .ok_or_else(|| RunnerError::syntax(c.pos(), "cores: expected a positive integer"))?,
    };
    let walltime = match m.get("walltime") {
        None => parse_walltime(DEFAULT_STEP_WALLTIME).expect("default walltime parses"),
        Some(w) => parse_walltime(scalar_text(w, "walltime")?).map_err(|e| RunnerError::syntax(w.pos(), e.to_string()))?,
    };
    Ok(Step {
        step_id: step_id.to_string(),
        command_template,
        inputs,
        outputs,
        scatter,
        cores,
        walltime,
    })
}

/// Parse and validate a workflow skeleton.
pub fn parse_workflow(text: &str) -> Result<MachineWorkflow, RunnerError> {
    let doc = parse_document(text)?;
    let top = doc.expect_map("workflow")?;
    check_keys(top, &["id", "inputs", "steps", "outputs"], "workflow")?;
    let workflow_id = match top.get("id") {
        Some(n) => scalar_text(n, "id")?.to_string(),
        None => return Err(RunnerError::syntax(top.pos, "workflow: missing `id`")),
    };
    let mut inputs = Vec::new();
    if let Some(n) = top.get("inputs").filter(|n| !n.is_null()) {
        for (name, pos, node) in &n.expect_map("inputs")?.entries {
            inputs.push(parse_input(name, *pos, node)?);
        }
    }
    let steps_node = top
        .get("steps")
        .ok_or_else(|| RunnerError::syntax(top.pos, "workflow: missing `steps`"))?;
    let mut steps = Vec::new();
    for (name, pos, node) in &steps_node.expect_map("steps")?.entries {
        steps.push(parse_step(name, *pos, node)?);
    }
    let mut outputs = Vec::new();
    if let Some(n) = top.get("outputs").filter(|n| !n.is_null()) {
        for (name, _, node) in &n.expect_map("outputs")?.entries {
            let text = scalar_text(node, name)?;
            match parse_source(text) {
                Source::StepOutput { step, output } => outputs.push(OutputDecl {
                    name: name.clone(),
                    step,
                    output,
                }),
                Source::Input(_) => {
                    return Err(RunnerError::syntax(node.pos(), format!("output `{name}`: expected step/output")))
                }
            }
        }
    }
    let wf = MachineWorkflow {
        workflow_id,
        inputs,
        steps,
        outputs,
    };
    validate(&wf)?;
    Ok(wf)
}

fn validate(wf: &MachineWorkflow) -> Result<(), RunnerError> {
    let unknown = |step: &str, name: String| RunnerError::UnknownReference {
        step: step.to_string(),
        name,
    };
    let outputs_of: BTreeMap<&str, &[String]> = wf
        .steps
        .iter()
        .map(|s| (s.step_id.as_str(), s.outputs.as_slice()))
        .collect();
    let resolves = |src: &Source| match src {
        Source::Input(i) => wf.input(i).is_some(),
        Source::StepOutput { step, output } => outputs_of.get(step.as_str()).is_some_and(|o| o.contains(output)),
    };
    for step in &wf.steps {
        for (_, src) in &step.inputs {
            if !resolves(src) {
                return Err(unknown(&step.step_id, source_text(src)));
            }
        }
        let names = placeholders(&step.command_template).map_err(|e| RunnerError::invalid(&step.step_id, e))?;
        for name in names {
            let known = step.input(&name).is_some()
                || step.outputs.contains(&name)
                || BUILTINS.contains(&name.as_str());
            if !known {
                return Err(unknown(&step.step_id, name));
            }
        }
        if let Some(sc) = &step.scatter {
            let src = step
                .input(&sc.over)
                .ok_or_else(|| unknown(&step.step_id, sc.over.clone()))?;
            let Source::Input(input) = src else {
                return Err(RunnerError::invalid(
                    &step.step_id,
                    format!("scatter input `{}` must come from a workflow input", sc.over),
                ));
            };
            let decl = wf.input(input).expect("resolved above");
            if !decl.ty.is_array() {
                return Err(RunnerError::TypeError {
                    input: input.clone(),
                    expected: "array".into(),
                    got: decl.ty.to_string(),
                });
            }
            if let CoresSpec::Input(name) = &sc.cores_per_member {
                let decl = wf.input(name).ok_or_else(|| unknown(&step.step_id, name.clone()))?;
                if decl.ty != ValueType::Int {
                    return Err(RunnerError::TypeError {
                        input: name.clone(),
                        expected: "int".into(),
                        got: decl.ty.to_string(),
                    });
                }
            }
        }
    }
    for out in &wf.outputs {
        if !outputs_of.get(out.step.as_str()).is_some_and(|o| o.contains(&out.output)) {
            return Err(unknown("outputs", format!("{}/{}", out.step, out.output)));
        }
    }
    wf.topo_order()?;
    Ok(())
}

fn source_text(src: &Source) -> String {
    match src {
        Source::Input(i) => i.clone(),
        Source::StepOutput { step, output } => format!("{step}/{output}"),
    }
}
