//! C ABI surface (to come).
