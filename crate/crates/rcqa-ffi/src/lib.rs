//! C ABI surface (placeholder while the core library takes shape).
