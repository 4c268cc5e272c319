//! SVD-reparameterized GAN discriminator layers with pluggable spectrum control.
//!
//! Every discriminator weight matrix is stored in factored form `W = U diag(e) V^T`
//! where `U` and `V` have orthonormal columns and `e` holds the singular values as
//! free parameters. Training never re-runs an SVD: the factors are updated by
//! gradient ascent with an orthogonality penalty keeping `U`, `V` near the Stiefel
//! manifold, while a pluggable controller decides what happens to `e` (clipping,
//! normalization, regularization, or nothing).
//!
//! The crate is organized bottom-up:
//!
//! * [`rng`] deterministic random numbers (xoshiro256++ plus Box-Muller normals)
//! * [`linalg`] dense row-major matrices, QR, one-sided Jacobi SVD, power iteration
//! * [`svdnet`] factored layers, forward/backward passes, checkpoint (de)serialization
//! * [`spectrum`] the spectrum controllers and their regularizers
//! * [`optim`] Adam, GAN losses, the training loop
//! * [`evalsuite`] toy data, mode coverage, spectrum/Lipschitz reports, the
//!   generalization bound, CSV writers
//! * [`gradcheck`] finite-difference validation of the hand-written backward pass

pub mod evalsuite;
pub mod gradcheck;
pub mod linalg;
pub mod optim;
pub mod rng;
pub mod spectrum;
pub mod svdnet;
