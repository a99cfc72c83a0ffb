use std::path::PathBuf;

use clap::{Args, ValueEnum};
use stcmtl::bench::{generate, Mixing, SynthSpec};
use stcmtl::io::{write_problem, TruthFiles};
use stcmtl::Loss;

use crate::Failure;

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq)]
#[clap(rename_all = "lowercase")]
enum MixingArg {
    Sparse,
    Dense,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq)]
#[clap(rename_all = "lowercase")]
enum LossArg {
    Squared,
    Logistic,
}

#[derive(Args, Debug)]
pub struct SimulateArgs {
    /// Number of features
    #[arg(long, default_value_t = 200)]
    d: usize,

    /// Number of regular (non-outlier) tasks
    #[arg(long, default_value_t = 60)]
    t: usize,

    /// Number of clusters
    #[arg(long, default_value_t = 5)]
    k: usize,

    /// Membership pattern of the mixed tasks
    #[arg(long, value_enum, default_value_t = MixingArg::Sparse)]
    mixing: MixingArg,

    /// Planted outlier tasks appended after the regular ones
    #[arg(long, default_value_t = 0)]
    outliers: usize,

    /// Pure tasks among the regular ones [default: five sixths of t]
    #[arg(long)]
    pure: Option<usize>,

    /// Training rows per task
    #[arg(long, default_value_t = 100)]
    n: usize,

    /// Test rows per task
    #[arg(long, default_value_t = 100)]
    n_test: usize,

    /// Standard deviation of the response noise
    #[arg(long, default_value_t = 0.5)]
    noise: f64,

    #[arg(long, value_enum, default_value_t = LossArg::Squared)]
    loss: LossArg,

    #[arg(long, default_value_t = 42)]
    seed: u64,

    /// Output directory
    #[arg(long)]
    out: PathBuf,
}

impl SimulateArgs {
    fn spec(&self) -> SynthSpec {
        SynthSpec {
            t: self.t,
            n_train: self.n,
            n_test: self.n_test,
            d: self.d,
            k: self.k,
            mixing: match self.mixing {
                MixingArg::Sparse => Mixing::Sparse,
                MixingArg::Dense => Mixing::Dense,
            },
            noise_sd: self.noise,
            pure_count: self.pure.unwrap_or(self.t * 5 / 6),
            outliers: self.outliers,
            loss: match self.loss {
                LossArg::Squared => Loss::Squared,
                LossArg::Logistic => Loss::Logistic,
            },
            seed: self.seed,
        }
    }
}

/// Writes `train.manifest` and `test.manifest` (task CSVs under `train/` and
/// `test/`) plus the ground truth under `truth/`.
pub fn run(args: SimulateArgs) -> Result<(), Failure> {
    let data = generate(&args.spec())?;
    let train = write_problem(&data.train, &args.out, "train.manifest", "train")?;
    let test = write_problem(&data.test, &args.out, "test.manifest", "test")?;
    let truth = args.out.join("truth");
    TruthFiles::from(&data.truth).write(&truth)?;
    println!("train\t{}", train.display());
    println!("test\t{}", test.display());
    println!("truth\t{}", truth.display());
    Ok(())
}
