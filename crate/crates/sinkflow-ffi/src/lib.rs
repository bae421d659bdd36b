//! C ABI bindings (placeholder during core development).
