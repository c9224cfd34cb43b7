//! Pluggable appraisal-rationale provider.
//!
//! The offline backend emits a deterministic appraisal template keyed to
//! goal conduciveness and norm compatibility. The http backend posts a
//! chat-completion request to a configured endpoint; it exists to mirror an
//! LLM pipeline without depending on one.

use std::time::Duration;

use serde::Deserialize;
use serde_json::json;

use super::{AnnotatedInstance, Polarity};

pub const ENV_LLM_ENDPOINT: &str = "TRMOE_LLM_ENDPOINT";
pub const ENV_LLM_KEY: &str = "TRMOE_LLM_KEY";

const DEFAULT_TIMEOUT: Duration = Duration::from_secs(30);
const DEFAULT_MODEL: &str = "offline-appraisal";

/// Default cap on concurrent http requests.
pub const DEFAULT_MAX_IN_FLIGHT: usize = 4;

#[derive(Debug, Clone, thiserror::Error)]
pub enum RationaleError {
    #[error("{ENV_LLM_ENDPOINT} is not set")]
    MissingEndpoint,
    #[error("request timed out after {seconds}s")]
    Timeout { seconds: u64 },
    #[error("http status {status}: {body}")]
    Status { status: u16, body: String },
    #[error("malformed response: {reason}")]
    Malformed { reason: String },
    #[error("transport error: {reason}")]
    Transport { reason: String },
}

/// Generated rationale plus whether the offline fallback produced it.
#[derive(Debug, Clone)]
pub struct Rationale {
    pub text: String,
    pub fell_back: bool,
}

#[derive(Debug, Clone)]
pub struct HttpBackend {
    pub endpoint: String,
    pub api_key: Option<String>,
    pub model: String,
    pub timeout: Duration,
}

/// Reads endpoint and key from the environment.
pub fn http_backend_from_env() -> Result<HttpBackend, RationaleError> {
    let endpoint = std::env::var(ENV_LLM_ENDPOINT).map_err(|_| RationaleError::MissingEndpoint)?;
    Ok(HttpBackend {
        endpoint,
        api_key: std::env::var(ENV_LLM_KEY).ok(),
        model: DEFAULT_MODEL.to_string(),
        timeout: DEFAULT_TIMEOUT,
    })
}

#[derive(Debug, Clone)]
pub enum RationaleBackend {
    Offline,
    Http(HttpBackend),
}

/// Deterministic appraisal clause keyed to polarity and implicitness:
/// goal conduciveness for implicit evidence, norm compatibility for
/// explicit evidence.
fn appraisal_clause(polarity: Polarity, implicit: bool) -> &'static str {
    match (polarity, implicit) {
        (Polarity::Positive, false) => "is praised directly and meets the expected standard",
        (Polarity::Positive, true) => {
            "advances the reviewer's goals even though no opinion word is used"
        }
        (Polarity::Negative, false) => "is criticized directly and violates the expected standard",
        (Polarity::Negative, true) => {
            "blocks the reviewer's goals even though no opinion word is used"
        }
        (Polarity::Neutral, false) => "is described without approval or disapproval",
        (Polarity::Neutral, true) => "neither advances nor blocks the reviewer's goals",
    }
}

/// Offline rationale text; identical across runs for the same instance.
pub fn offline_rationale(inst: &AnnotatedInstance) -> String {
    format!(
        "the reviewer evaluates the {} as {} because the described event {}",
        inst.aspect,
        inst.polarity.label(),
        appraisal_clause(inst.polarity, inst.implicit)
    )
}

fn llm_prompt(inst: &AnnotatedInstance) -> String {
    format!(
        "sentence: {}\naspect: {}\npolarity: {}\nexplain in one sentence why the speaker \
         holds this attitude toward the aspect.",
        inst.text,
        inst.aspect,
        inst.polarity.label()
    )
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatMessage,
}

#[derive(Deserialize)]
struct ChatMessage {
    content: String,
}

fn http_rationale(backend: &HttpBackend, inst: &AnnotatedInstance) -> Result<String, RationaleError> {
    let agent = ureq::AgentBuilder::new().timeout(backend.timeout).build();
    let mut request = agent.post(&backend.endpoint);
    if let Some(key) = &backend.api_key {
        request = request.set("Authorization", &format!("Bearer {key}"));
    }
    let body = json!({
        "model": backend.model,
        "messages": [{"role": "user", "content": llm_prompt(inst)}],
    });
    let response = request.send_json(body).map_err(|err| match err {
        ureq::Error::Status(status, resp) => RationaleError::Status {
            status,
            body: resp.into_string().unwrap_or_default(),
        },
        ureq::Error::Transport(t) => {
            let reason = t.to_string();
            if reason.contains("timed out") || reason.contains("timeout") {
                RationaleError::Timeout {
                    seconds: backend.timeout.as_secs(),
                }
            } else {
                RationaleError::Transport { reason }
            }
        }
    })?;
    let parsed: ChatResponse = response
        .into_json()
        .map_err(|e| RationaleError::Malformed {
            reason: e.to_string(),
        })?;
    parsed
        .choices
        .first()
        .map(|c| c.message.content.clone())
        .ok_or_else(|| RationaleError::Malformed {
            reason: "choices is empty".into(),
        })
}

/// Generates rationales through the configured backend, optionally falling
/// back to the offline template on http failure.
pub struct RationaleProvider {
    pub backend: RationaleBackend,
    pub fallback: bool,
    pub max_in_flight: usize,
}

impl RationaleProvider {
    pub fn offline() -> Self {
        RationaleProvider {
            backend: RationaleBackend::Offline,
            fallback: false,
            max_in_flight: DEFAULT_MAX_IN_FLIGHT,
        }
    }

    pub fn http(backend: HttpBackend, fallback: bool) -> Self {
        RationaleProvider {
            backend: RationaleBackend::Http(backend),
            fallback,
            max_in_flight: DEFAULT_MAX_IN_FLIGHT,
        }
    }

    pub fn generate(&self, inst: &AnnotatedInstance) -> Result<Rationale, RationaleError> {
        match &self.backend {
            RationaleBackend::Offline => Ok(Rationale {
                text: offline_rationale(inst),
                fell_back: false,
            }),
            RationaleBackend::Http(http) => match http_rationale(http, inst) {
                Ok(text) => Ok(Rationale {
                    text,
                    fell_back: false,
                }),
                Err(err) if self.fallback => {
                    log::warn!("rationale backend failed ({err}); using offline fallback");
                    Ok(Rationale {
                        text: offline_rationale(inst),
                        fell_back: true,
                    })
                }
                Err(err) => Err(err),
            },
        }
    }

    /// Generates rationales for a batch with at most `max_in_flight`
    /// concurrent requests; results are ordered by instance index.
    pub fn generate_all(
        &self,
        instances: &[AnnotatedInstance],
    ) -> Vec<Result<Rationale, RationaleError>> {
        if matches!(self.backend, RationaleBackend::Offline) || instances.len() <= 1 {
            return instances.iter().map(|i| self.generate(i)).collect();
        }
        let workers = self.max_in_flight.max(1).min(instances.len());
        let next = std::sync::atomic::AtomicUsize::new(0);
        let mut results: Vec<Option<Result<Rationale, RationaleError>>> =
            (0..instances.len()).map(|_| None).collect();
        let slots = std::sync::Mutex::new(&mut results);
        std::thread::scope(|scope| {
            for _ in 0..workers {
                scope.spawn(|| loop {
                    let i = next.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
                    if i >= instances.len() {
                        break;
                    }
                    let r = self.generate(&instances[i]);
                    slots.lock().expect("no poisoned worker")[i] = Some(r);
                });
            }
        });
        results
            .into_iter()
            .map(|r| r.expect("every index filled"))
            .collect()
    }
}
