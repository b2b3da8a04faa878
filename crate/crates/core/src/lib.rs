//! Desk-scale transfer learning from text-to-speech to any-to-any voice
//! conversion, self-contained and fully deterministic.
//!
//! The pipeline: a synthetic multi-speaker corpus feeds a
//! sequence-to-sequence TTS model whose attention context vectors then
//! supervise a voice-conversion speech encoder; the TTS decoder weights
//! initialize the VC decoder. Conversion swaps in an unseen target
//! speaker embedding without any parallel data.

pub mod corpus;
pub mod error;
pub mod evalkit;
pub mod ndiff;
pub mod sigproc;
pub mod spkenc;
pub mod taco;
pub mod vc;

pub use error::{Error, Result};

/// Entry point for the `ttlvc` binary. Returns the process exit code.
pub fn cli_main() -> i32 {
    eprintln!("error: command line interface not wired up yet");
    2
}
