//! Command-line orchestration for the retrieval toolkit: configuration,
//! the synthetic benchmark, and the staged training/evaluation pipeline.

pub mod commands;
pub mod config;
pub mod pipeline;
pub mod synth;

use umr_core::Error;

pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_SCORER: i32 = 4;

/// Process exit code for an error.
pub fn exit_code(err: &Error) -> i32 {
    match err.root() {
        Error::Config(_) => EXIT_CONFIG,
        Error::ScorerUnavailable { .. } => EXIT_SCORER,
        _ => EXIT_DATA,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes() {
        assert_eq!(exit_code(&Error::Config("x".into()).context("stage a")), 2);
        assert_eq!(exit_code(&Error::DuplicateId("d".into())), 3);
        let e = Error::ScorerUnavailable {
            qid: "q".into(),
            reason: "down".into(),
        };
        assert_eq!(exit_code(&e.context("stage rerank")), 4);
    }
}
