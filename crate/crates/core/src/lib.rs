//! Parallel transport convolution on triangle meshes.
//!
//! The pipeline runs left to right through the modules:
//! [`mesh`] → [`geodesic`] → [`transport`] → [`kernel`] → [`conv`] → [`net`].
//! A geodesic distance field fixes a direction on every face; frames aligned
//! with it carry a polar kernel template from an anchor vertex to every other
//! vertex, and the transported kernels are stacked into a sparse matrix `K`.
//! Filtering a signal `f` is then `Kᵀ M f` with `M` the lumped mass matrix.

pub mod conv;
pub mod experiments;
pub mod geodesic;
pub mod kernel;
pub mod mesh;
pub mod mnist;
pub mod net;
pub mod sparse;
pub mod transport;
