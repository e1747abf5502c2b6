//! Command implementations behind the `cfsg` binary.

pub mod commands;
pub mod config;
pub mod store;

use cfsg_core::Error;

pub const EXIT_USAGE: i32 = 2;
pub const EXIT_FAILURE: i32 = 3;
pub const EXIT_DIVERGED: i32 = 4;

/// Process exit code for an error: 2 for bad configuration or arguments, 4
/// for a diverged training run, 3 for everything else.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    match err.chain().find_map(|e| e.downcast_ref::<Error>()) {
        Some(Error::Config(_) | Error::UnknownLayer(_)) => EXIT_USAGE,
        Some(Error::Divergence { .. }) => EXIT_DIVERGED,
        _ => EXIT_FAILURE,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes() {
        let e: anyhow::Error = Error::Config("x".into()).into();
        assert_eq!(exit_code(&e), 2);
        let e: anyhow::Error = Error::Divergence { epoch: 1, batch: 0, loss: f32::NAN }.into();
        assert_eq!(exit_code(&e.context("training")), 4);
        let e: anyhow::Error = Error::Data("x".into()).into();
        assert_eq!(exit_code(&e), 3);
        assert_eq!(exit_code(&anyhow::anyhow!("io")), 3);
    }
}
