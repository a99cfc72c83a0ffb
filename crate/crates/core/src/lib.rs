//! Semisoft task clustering for multi-task learning.
//!
//! Tasks are modelled as `w_i = U v_i`: every task's coefficient vector is a
//! convex combination of a few sparse cluster coefficient vectors (the
//! columns of `U`). Pure tasks belong to one cluster, mixed tasks to several.
//! Training alternates between recovering the memberships `V` from the
//! current per-task coefficients, fitting `U` by coordinate descent under an
//! l1 penalty, and refreshing the per-task coefficients.
//!
//! ```no_run
//! use stcmtl::bench::{generate, Mixing, SynthSpec};
//! use stcmtl::{fit, HyperParams};
//!
//! let data = generate(&SynthSpec::reference(200, Mixing::Sparse, 1)).unwrap();
//! let model = fit(&data.train, 5, &HyperParams::default()).unwrap();
//! println!("objective {}", model.report.final_objective());
//! ```

pub mod bench;
pub mod data;
pub mod error;
pub mod exec;
pub mod io;
pub mod linalg;
pub mod rng;
pub mod robust;
pub mod solver;
pub mod soup;
pub mod trainer;

pub use data::{
    validate_problem, ClusterCoefs, CoefMatrix, FitReport, HyperParams, Loss, Membership, Problem,
    TaskDataset,
};
pub use error::{Error, Result};
pub use exec::Exec;
pub use robust::fit_robust;
pub use trainer::{fit, predict, select_k, StcmtlModel};
