//! Finite-difference supercell oracle.
