//! C ABI surface; fleshed out alongside the core pipeline.
