//! Agent runtime reached over HTTP.
//!
//! `POST {base}/reinvoke` takes a [`ReinvokeRequest`] and returns an
//! `AgentSegment`; `POST {base}/replan` takes a [`ReplanRequest`] and returns
//! a `ReasoningTrace`. Calls are blocking and must run off the async executor.

use eager_core::mitigation::{AgentRuntime, RuntimeError};
use eager_core::trace::{AgentSegment, ReasoningTrace};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReinvokeRequest {
    pub trace_id: String,
    pub agent_role: String,
    pub segment_ordinal: u32,
    pub reflection_context: String,
    pub attempt: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReplanRequest {
    pub trace_id: String,
    pub replan_context: String,
    pub attempt: u32,
}

#[derive(Debug, Clone)]
pub struct HttpAgentRuntime {
    base: String,
}

impl HttpAgentRuntime {
    pub fn new(base: impl Into<String>) -> Self {
        Self {
            base: base.into().trim_end_matches('/').to_string(),
        }
    }

    fn post<B: Serialize, T: DeserializeOwned>(
        &self,
        path: &str,
        body: &B,
    ) -> Result<T, RuntimeError> {
        let client = reqwest::blocking::Client::new();
        let url = format!("{}/{path}", self.base);
        let resp = client
            .post(&url)
            .json(body)
            .send()
            .map_err(|e| RuntimeError(format!("POST {url}: {e}")))?;
        let status = resp.status();
        if !status.is_success() {
            let text = resp.text().unwrap_or_default();
            return Err(RuntimeError(format!("POST {url}: {status} {text}")));
        }
        resp.json()
            .map_err(|e| RuntimeError(format!("POST {url}: bad body: {e}")))
    }
}

impl AgentRuntime for HttpAgentRuntime {
    fn reinvoke_agent(
        &self,
        trace_id: &str,
        agent_role: &str,
        segment_ordinal: u32,
        reflection_context: &str,
        attempt: u32,
    ) -> Result<AgentSegment, RuntimeError> {
        self.post(
            "reinvoke",
            &ReinvokeRequest {
                trace_id: trace_id.into(),
                agent_role: agent_role.into(),
                segment_ordinal,
                reflection_context: reflection_context.into(),
                attempt,
            },
        )
    }

    fn replan(
        &self,
        trace_id: &str,
        replan_context: &str,
        attempt: u32,
    ) -> Result<ReasoningTrace, RuntimeError> {
        self.post(
            "replan",
            &ReplanRequest {
                trace_id: trace_id.into(),
                replan_context: replan_context.into(),
                attempt,
            },
        )
    }
}
