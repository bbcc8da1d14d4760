//! Book chapters as doctests (placeholder while the core builds).
