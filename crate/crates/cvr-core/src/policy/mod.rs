//! Decision-source backends behind one contract.
//!
//! Every variant — deterministic scripted replay, the trainable tabular
//! softmax, and a remote chat-completion model — implements [`Policy`] and
//! is registered by name in [`PolicyRegistry`], so the episode engine never
//! changes when the backend does.

mod remote;
mod scripted;
mod softmax;

pub use remote::{RemotePolicy, RemotePolicyConfig, API_KEY_ENV};
pub use scripted::ScriptedPolicy;
pub use softmax::SoftmaxPolicy;

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use rand::RngCore;
use thiserror::Error;

use crate::episode::HistoryStep;
use crate::grpo::{PolicyParams, StateKeyConfig};
use crate::script::SemanticScript;

/// Whether one policy instance tolerates concurrent decide calls.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConcurrencyCapability {
    ConcurrentOk,
    /// The runner must serialize calls (e.g. an internal cursor).
    SerializeMe,
}

/// What the engine knows at decision time.
#[derive(Debug)]
pub struct TurnContext<'a> {
    /// Full textual rendering of the state, including retry notes.
    pub rendered_state: &'a str,
    pub question: &'a str,
    /// Number of completed turns so far (0-based decision index).
    pub turn_index: usize,
    /// Completed (action, observation) pairs.
    pub history: &'a [HistoryStep],
    /// True once only answer actions are accepted.
    pub tolerance: bool,
}

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("request timed out after {attempts} attempt(s)")]
    Timeout { attempts: u32 },
    #[error("endpoint returned status {code}")]
    Status { code: u16 },
    #[error("malformed response body: {0}")]
    MalformedBody(String),
    #[error("transport error: {0}")]
    Transport(String),
}

/// A total decision source: given the rendered state, produce raw output
/// text (possibly malformed — parsing is the protocol's job).
pub trait Policy {
    fn decide(&mut self, ctx: &TurnContext, rng: &mut dyn RngCore) -> Result<String, PolicyError>;

    fn concurrency(&self) -> ConcurrencyCapability;
}

#[derive(Debug, Error)]
pub enum PolicyBuildError {
    #[error("unknown policy `{0}`")]
    Unknown(String),
    #[error("policy `{name}` needs {what}")]
    Missing {
        name: &'static str,
        what: &'static str,
    },
    #[error("failed to read {path}: {message}")]
    Unreadable { path: String, message: String },
    #[error("{0}")]
    Invalid(String),
}

/// Inputs a factory may draw on while building a policy.
#[derive(Default)]
pub struct PolicyBuildContext<'a> {
    /// The episode's script; required by the softmax backend.
    pub script: Option<&'a SemanticScript>,
    /// Remote endpoint settings; required by the remote backend.
    pub remote: Option<RemotePolicyConfig>,
    pub state_keys: StateKeyConfig,
}

type PolicyFactory =
    fn(Option<&str>, &PolicyBuildContext) -> Result<Box<dyn Policy>, PolicyBuildError>;

/// Name-keyed registry of policy strategies. Specs look like
/// `scripted:turns.json`, `softmax:params.json`, or `remote`.
pub struct PolicyRegistry {
    factories: BTreeMap<&'static str, PolicyFactory>,
}

impl PolicyRegistry {
    pub fn with_builtins() -> Self {
        let mut registry = Self {
            factories: BTreeMap::new(),
        };
        registry.register("scripted", build_scripted);
        registry.register("softmax", build_softmax);
        registry.register("remote", build_remote);
        registry
    }

    pub fn register(&mut self, name: &'static str, factory: PolicyFactory) {
        self.factories.insert(name, factory);
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.factories.keys().copied().collect()
    }

    /// Builds from a `name` or `name:arg` spec.
    pub fn build(
        &self,
        spec: &str,
        ctx: &PolicyBuildContext,
    ) -> Result<Box<dyn Policy>, PolicyBuildError> {
        let (name, arg) = match spec.split_once(':') {
            Some((n, a)) => (n, Some(a)),
            None => (spec, None),
        };
        let factory = self
            .factories
            .get(name)
            .ok_or_else(|| PolicyBuildError::Unknown(name.to_string()))?;
        factory(arg, ctx)
    }
}

fn read_file(path: &str) -> Result<String, PolicyBuildError> {
    std::fs::read_to_string(Path::new(path)).map_err(|e| PolicyBuildError::Unreadable {
        path: path.to_string(),
        message: e.to_string(),
    })
}

fn build_scripted(
    arg: Option<&str>,
    _ctx: &PolicyBuildContext,
) -> Result<Box<dyn Policy>, PolicyBuildError> {
    let path = arg.ok_or(PolicyBuildError::Missing {
        name: "scripted",
        what: "a turns file (scripted:FILE)",
    })?;
    let text = read_file(path)?;
    let lines = ScriptedPolicy::parse_turns(&text)
        .map_err(|e| PolicyBuildError::Invalid(format!("{path}: {e}")))?;
    let policy = ScriptedPolicy::new(lines)
        .map_err(|e| PolicyBuildError::Invalid(format!("{path}: {e}")))?;
    Ok(Box::new(policy))
}

fn build_softmax(
    arg: Option<&str>,
    ctx: &PolicyBuildContext,
) -> Result<Box<dyn Policy>, PolicyBuildError> {
    let path = arg.ok_or(PolicyBuildError::Missing {
        name: "softmax",
        what: "a params file (softmax:PARAMS)",
    })?;
    let script = ctx.script.ok_or(PolicyBuildError::Missing {
        name: "softmax",
        what: "the episode script",
    })?;
    let text = read_file(path)?;
    let value: serde_json::Value = serde_json::from_str(&text)
        .map_err(|e| PolicyBuildError::Invalid(format!("{path}: {e}")))?;
    let params = PolicyParams::load(&value)
        .map_err(|e| PolicyBuildError::Invalid(format!("{path}: {e}")))?;
    Ok(Box::new(SoftmaxPolicy::new(
        Arc::new(params),
        script,
        ctx.state_keys,
    )))
}

fn build_remote(
    _arg: Option<&str>,
    ctx: &PolicyBuildContext,
) -> Result<Box<dyn Policy>, PolicyBuildError> {
    let config = ctx.remote.clone().ok_or(PolicyBuildError::Missing {
        name: "remote",
        what: "a remote config block",
    })?;
    let policy = RemotePolicy::new(config).map_err(|e| PolicyBuildError::Invalid(e.to_string()))?;
    Ok(Box::new(policy))
}
