//! Deterministic replay policy for tests and fixtures.

use rand::RngCore;
use thiserror::Error;

use super::{ConcurrencyCapability, Policy, PolicyError, TurnContext};

#[derive(Debug, Error)]
pub enum ScriptedPolicyError {
    #[error("turn list must not be empty")]
    Empty,
    #[error("turns file must be a JSON array of strings or plain lines")]
    BadFormat,
}

/// Emits a fixed list of raw outputs in order, repeating the last entry
/// once the list is exhausted. Texts pass through unmodified — malformed
/// entries are the parser's business.
pub struct ScriptedPolicy {
    turns: Vec<String>,
    cursor: usize,
}

impl ScriptedPolicy {
    pub fn new(turns: Vec<String>) -> Result<Self, ScriptedPolicyError> {
        if turns.is_empty() {
            return Err(ScriptedPolicyError::Empty);
        }
        Ok(Self { turns, cursor: 0 })
    }

    /// Parses a turns file: a JSON array of strings, or one raw output per
    /// non-empty line.
    pub fn parse_turns(text: &str) -> Result<Vec<String>, ScriptedPolicyError> {
        let trimmed = text.trim_start();
        if trimmed.starts_with('[') {
            return serde_json::from_str::<Vec<String>>(text)
                .map_err(|_| ScriptedPolicyError::BadFormat);
        }
        Ok(text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(str::to_string)
            .collect())
    }
}

impl Policy for ScriptedPolicy {
    fn decide(
        &mut self,
        _ctx: &TurnContext,
        _rng: &mut dyn RngCore,
    ) -> Result<String, PolicyError> {
        let index = self.cursor.min(self.turns.len() - 1);
        self.cursor += 1;
        Ok(self.turns[index].clone())
    }

    fn concurrency(&self) -> ConcurrencyCapability {
        ConcurrencyCapability::SerializeMe
    }
}
