use std::time::Duration;

use super::executor::{CallContext, Executor, Request, Response};

/// POSTs the request as JSON to the `entry` URL and parses the JSON reply.
#[derive(Clone, Debug)]
pub struct HttpExecutor {
    pub timeout: Duration,
}

impl Default for HttpExecutor {
    fn default() -> Self {
        Self { timeout: Duration::from_secs(300) }
    }
}

impl Executor for HttpExecutor {
    fn call(&self, _ctx: &CallContext, req: &Request) -> Result<Response, String> {
        let agent: ureq::Agent = ureq::Agent::config_builder().timeout_global(Some(self.timeout)).build().into();
        let body = serde_json::to_string(req).expect("request serializes");
        let mut resp = agent
            .post(&req.entry)
            .header("content-type", "application/json")
            .send(body)
            .map_err(|e| format!("POST {}: {e}", req.entry))?;
        let text = resp.body_mut().read_to_string().map_err(|e| format!("POST {}: {e}", req.entry))?;
        serde_json::from_str(&text).map_err(|e| format!("POST {}: bad response: {e}", req.entry))
    }
}
