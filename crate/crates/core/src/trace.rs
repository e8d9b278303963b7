//! Reasoning traces captured from a multi-agent system.
//!
//! A [`ReasoningTrace`] is the ordered record of every step taken by every
//! agent while serving one request. Step-wise detection works on
//! [`AgentSegment`]s: maximal runs of consecutive steps by the same agent.
//!
//! Corpora are stored as JSON Lines, one trace per line.

use std::collections::HashSet;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("trace has no steps")]
    EmptyTrace,
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed trace record at line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("duplicate trace_id {trace_id:?} at line {line}")]
    DuplicateTraceId { trace_id: String, line: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepKind {
    Thought,
    ToolCall,
    ToolResult,
    Message,
    FinalAnswer,
}

impl StepKind {
    pub fn as_str(self) -> &'static str {
        match self {
            StepKind::Thought => "thought",
            StepKind::ToolCall => "tool_call",
            StepKind::ToolResult => "tool_result",
            StepKind::Message => "message",
            StepKind::FinalAnswer => "final_answer",
        }
    }

    /// Kinds whose text must be non-empty.
    pub fn requires_text(self) -> bool {
        matches!(
            self,
            StepKind::Thought | StepKind::Message | StepKind::FinalAnswer
        )
    }
}

/// Failure taxonomy observed across the studied systems, plus `Unknown` for
/// failures whose type has not been established.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum FailureType {
    DecompositionError,
    IncorrectCode,
    RoundLimitation,
    CriticalTraceMiss,
    MetricsQueryError,
    EditingError,
    LocalizationError,
    Unknown,
}

impl FailureType {
    pub const ALL: [FailureType; 8] = [
        FailureType::DecompositionError,
        FailureType::IncorrectCode,
        FailureType::RoundLimitation,
        FailureType::CriticalTraceMiss,
        FailureType::MetricsQueryError,
        FailureType::EditingError,
        FailureType::LocalizationError,
        FailureType::Unknown,
    ];

    /// The seven named failure types (everything except `Unknown`).
    pub const NAMED: [FailureType; 7] = [
        FailureType::DecompositionError,
        FailureType::IncorrectCode,
        FailureType::RoundLimitation,
        FailureType::CriticalTraceMiss,
        FailureType::MetricsQueryError,
        FailureType::EditingError,
        FailureType::LocalizationError,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            FailureType::DecompositionError => "DecompositionError",
            FailureType::IncorrectCode => "IncorrectCode",
            FailureType::RoundLimitation => "RoundLimitation",
            FailureType::CriticalTraceMiss => "CriticalTraceMiss",
            FailureType::MetricsQueryError => "MetricsQueryError",
            FailureType::EditingError => "EditingError",
            FailureType::LocalizationError => "LocalizationError",
            FailureType::Unknown => "Unknown",
        }
    }

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Self::ALL.get(code as usize).copied()
    }
}

impl fmt::Display for FailureType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for FailureType {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .iter()
            .copied()
            .find(|t| t.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown failure type {s:?}"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SystemProfile {
    AutogenCode,
    Rclagent,
    SweAgent,
    #[default]
    Synthetic,
}

impl SystemProfile {
    pub fn as_str(self) -> &'static str {
        match self {
            SystemProfile::AutogenCode => "autogen_code",
            SystemProfile::Rclagent => "rclagent",
            SystemProfile::SweAgent => "swe_agent",
            SystemProfile::Synthetic => "synthetic",
        }
    }
}

impl std::str::FromStr for SystemProfile {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "autogen_code" => Ok(SystemProfile::AutogenCode),
            "rclagent" => Ok(SystemProfile::Rclagent),
            "swe_agent" => Ok(SystemProfile::SweAgent),
            "synthetic" => Ok(SystemProfile::Synthetic),
            other => Err(format!("unknown system profile {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReasoningStep {
    pub index: u32,
    pub agent_role: String,
    pub kind: StepKind,
    pub text: String,
    #[serde(default)]
    pub timestamp_ms: i64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgentSegment {
    pub agent_role: String,
    pub steps: Vec<ReasoningStep>,
    pub segment_ordinal: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct TraceLabel {
    pub failed: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure_type: Option<FailureType>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub culprit_agent_role: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub culprit_segment_ordinal: Option<u32>,
}

impl TraceLabel {
    pub fn clean() -> Self {
        Self::default()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReasoningTrace {
    pub trace_id: String,
    pub question: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base_question_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub variant_id: Option<String>,
    #[serde(default)]
    pub system_profile: SystemProfile,
    pub steps: Vec<ReasoningStep>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub final_answer: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<TraceLabel>,
}

/// One invariant violation found by [`validate_trace`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    /// Position in `steps` the violation refers to, if step-specific.
    pub position: Option<usize>,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.position {
            Some(p) => write!(f, "step {p}: {}", self.message),
            None => f.write_str(&self.message),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }

    fn push(&mut self, position: Option<usize>, message: impl Into<String>) {
        self.violations.push(Violation {
            position,
            message: message.into(),
        });
    }
}

/// `[a-z0-9_\-]{1,64}`
pub fn is_valid_role(role: &str) -> bool {
    !role.is_empty()
        && role.len() <= 64
        && role
            .bytes()
            .all(|b| b.is_ascii_lowercase() || b.is_ascii_digit() || b == b'_' || b == b'-')
}

/// Checks every trace invariant and reports all violations. Never fails.
pub fn validate_trace(trace: &ReasoningTrace) -> ValidationReport {
    let mut report = ValidationReport::default();
    if trace.trace_id.is_empty() {
        report.push(None, "empty trace_id");
    }
    if trace.steps.is_empty() {
        report.push(None, "trace has no steps");
    }
    for (pos, step) in trace.steps.iter().enumerate() {
        if pos > 0 && step.index <= trace.steps[pos - 1].index {
            report.push(Some(pos), format!("non-increasing index at position {pos}"));
        }
        if !is_valid_role(&step.agent_role) {
            report.push(
                Some(pos),
                format!("invalid agent_role {:?}", step.agent_role),
            );
        }
        if step.kind.requires_text() && step.text.is_empty() {
            report.push(
                Some(pos),
                format!("empty text for {} step", step.kind.as_str()),
            );
        }
    }
    if let Some(label) = &trace.label {
        if !label.failed {
            if label.failure_type.is_some() {
                report.push(None, "failure_type present on non-failed label");
            }
            if label.culprit_agent_role.is_some() {
                report.push(None, "culprit_agent_role present on non-failed label");
            }
            if label.culprit_segment_ordinal.is_some() {
                report.push(None, "culprit_segment_ordinal present on non-failed label");
            }
        }
    }
    report
}

/// Splits a trace into maximal runs of consecutive steps with the same role.
pub fn segment_by_agent(trace: &ReasoningTrace) -> Result<Vec<AgentSegment>, TraceError> {
    segment_steps(&trace.steps)
}

pub fn segment_steps(steps: &[ReasoningStep]) -> Result<Vec<AgentSegment>, TraceError> {
    if steps.is_empty() {
        return Err(TraceError::EmptyTrace);
    }
    let mut segments: Vec<AgentSegment> = Vec::new();
    for step in steps {
        match segments.last_mut() {
            Some(seg) if seg.agent_role == step.agent_role => seg.steps.push(step.clone()),
            _ => segments.push(AgentSegment {
                agent_role: step.agent_role.clone(),
                steps: vec![step.clone()],
                segment_ordinal: segments.len() as u32,
            }),
        }
    }
    Ok(segments)
}

/// Reads a JSON Lines trace corpus. Blank lines are skipped; unknown fields
/// are ignored.
pub fn read_traces(path: impl AsRef<Path>) -> Result<Vec<ReasoningTrace>, TraceError> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|source| TraceError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_traces(BufReader::new(file)).map_err(|e| match e {
        TraceError::Io { source, .. } => TraceError::Io {
            path: path.display().to_string(),
            source,
        },
        other => other,
    })
}

pub fn parse_traces(reader: impl BufRead) -> Result<Vec<ReasoningTrace>, TraceError> {
    let mut traces = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|source| TraceError::Io {
            path: String::new(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let trace: ReasoningTrace =
            serde_json::from_str(&line).map_err(|e| TraceError::Malformed {
                line: line_no,
                message: e.to_string(),
            })?;
        if !seen.insert(trace.trace_id.clone()) {
            return Err(TraceError::DuplicateTraceId {
                trace_id: trace.trace_id,
                line: line_no,
            });
        }
        traces.push(trace);
    }
    Ok(traces)
}

pub fn write_traces(path: impl AsRef<Path>, traces: &[ReasoningTrace]) -> Result<(), TraceError> {
    let path = path.as_ref();
    let io_err = |source| TraceError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut out = BufWriter::new(File::create(path).map_err(io_err)?);
    write_traces_to(&mut out, traces).map_err(io_err)?;
    out.flush().map_err(io_err)
}

pub fn write_traces_to(out: &mut impl Write, traces: &[ReasoningTrace]) -> std::io::Result<()> {
    for trace in traces {
        serde_json::to_writer(&mut *out, trace)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn step(index: u32, role: &str) -> ReasoningStep {
        ReasoningStep {
            index,
            agent_role: role.to_string(),
            kind: StepKind::Thought,
            text: format!("step {index}"),
            timestamp_ms: 0,
        }
    }

    fn trace_with_roles(roles: &[&str]) -> ReasoningTrace {
        ReasoningTrace {
            trace_id: "t".into(),
            question: "q".into(),
            base_question_id: None,
            variant_id: None,
            system_profile: SystemProfile::Synthetic,
            steps: roles
                .iter()
                .enumerate()
                .map(|(i, r)| step(i as u32, r))
                .collect(),
            final_answer: None,
            label: None,
        }
    }

    #[test]
    fn well_formed_trace_is_valid() {
        let t = trace_with_roles(&["a", "b", "a"]);
        assert!(validate_trace(&t).is_valid());
    }

    #[test]
    fn duplicated_index_reported_once() {
        let mut t = trace_with_roles(&["a", "a", "b"]);
        t.steps[1].index = 0;
        t.steps[2].index = 1;
        let report = validate_trace(&t);
        assert_eq!(report.violations.len(), 1);
        assert_eq!(
            report.violations[0].message,
            "non-increasing index at position 1"
        );
        assert_eq!(report.violations[0].position, Some(1));
    }

    #[test]
    fn failure_type_on_clean_label() {
        let mut t = trace_with_roles(&["a"]);
        t.label = Some(TraceLabel {
            failed: false,
            failure_type: Some(FailureType::IncorrectCode),
            ..Default::default()
        });
        let report = validate_trace(&t);
        assert_eq!(report.violations.len(), 1);
        assert_eq!(
            report.violations[0].message,
            "failure_type present on non-failed label"
        );
    }

    #[test]
    fn bad_role_and_empty_text() {
        let mut t = trace_with_roles(&["Planner"]);
        t.steps[0].text.clear();
        let report = validate_trace(&t);
        assert_eq!(report.violations.len(), 2);
        // tool calls may carry empty text
        t.steps[0].agent_role = "planner".into();
        t.steps[0].kind = StepKind::ToolCall;
        assert!(validate_trace(&t).is_valid());
    }

    #[test]
    fn segments_split_on_role_change() {
        let segs = segment_by_agent(&trace_with_roles(&["a", "a", "b", "a"])).unwrap();
        let shape: Vec<(String, Vec<u32>)> = segs
            .iter()
            .map(|s| {
                (
                    s.agent_role.clone(),
                    s.steps.iter().map(|x| x.index).collect(),
                )
            })
            .collect();
        assert_eq!(
            shape,
            vec![
                ("a".to_string(), vec![0, 1]),
                ("b".to_string(), vec![2]),
                ("a".to_string(), vec![3])
            ]
        );
        assert_eq!(
            segs.iter().map(|s| s.segment_ordinal).collect::<Vec<_>>(),
            vec![0, 1, 2]
        );
    }

    #[test]
    fn singleton_segment() {
        let segs = segment_by_agent(&trace_with_roles(&["a"])).unwrap();
        assert_eq!(segs.len(), 1);
        assert_eq!(segs[0].steps.len(), 1);
    }

    #[test]
    fn empty_trace_cannot_be_segmented() {
        let t = trace_with_roles(&[]);
        assert!(matches!(segment_by_agent(&t), Err(TraceError::EmptyTrace)));
    }

    #[test]
    fn failure_type_codes_round_trip() {
        for t in FailureType::ALL {
            assert_eq!(FailureType::from_code(t.code()), Some(t));
            assert_eq!(t.as_str().parse::<FailureType>().unwrap(), t);
        }
        assert_eq!(FailureType::from_code(8), None);
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let good = serde_json::to_string(&trace_with_roles(&["a"])).unwrap();
        let text = format!("{good}\n{{not json\n");
        match parse_traces(text.as_bytes()) {
            Err(TraceError::Malformed { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn duplicate_trace_id_rejected() {
        let good = serde_json::to_string(&trace_with_roles(&["a"])).unwrap();
        let text = format!("{good}\n{good}\n");
        assert!(matches!(
            parse_traces(text.as_bytes()),
            Err(TraceError::DuplicateTraceId { line: 2, .. })
        ));
    }

    #[test]
    fn empty_input_is_empty_corpus() {
        assert!(parse_traces(&b""[..]).unwrap().is_empty());
    }

    #[test]
    fn unknown_fields_ignored() {
        let line = r#"{"trace_id":"x","question":"q","steps":[{"index":0,"agent_role":"a","kind":"thought","text":"hi"}],"extra":42}"#;
        let traces = parse_traces(line.as_bytes()).unwrap();
        assert_eq!(traces[0].trace_id, "x");
        assert_eq!(traces[0].system_profile, SystemProfile::Synthetic);
    }
}
