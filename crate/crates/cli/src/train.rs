use std::fmt::Write as _;
use std::path::PathBuf;

use clap::{ArgGroup, Args};
use log::info;
use stcmtl::io::{load_tasks, write_atomic, ModelFile};
use stcmtl::{fit, fit_robust, select_k, Exec, HyperParams};

use crate::Failure;

#[derive(Args, Debug)]
#[command(group(ArgGroup::new("clusters").required(true).args(["k", "k_grid"])))]
pub struct TrainArgs {
    /// Task manifest
    #[arg(long)]
    manifest: PathBuf,

    /// Number of clusters
    #[arg(long)]
    k: Option<usize>,

    /// Choose the number of clusters from an inclusive range, e.g. `2..9`
    #[arg(long, value_parser = parse_k_grid)]
    k_grid: Option<KGrid>,

    /// Fraction of tasks declared pure
    #[arg(long, default_value_t = 0.5)]
    theta: f64,

    /// Fraction of neighbours examined by the purity score
    #[arg(long, default_value_t = 0.1)]
    epsilon: f64,

    /// Cross-validation folds for the per-task penalties
    #[arg(long, default_value_t = 5)]
    folds: usize,

    #[arg(long, default_value_t = 42)]
    seed: u64,

    /// Maximum outer iterations
    #[arg(long, default_value_t = 50)]
    max_iter: usize,

    /// Relative objective change that ends training
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,

    /// Coordinate sweeps per coefficient refresh
    #[arg(long, default_value_t = 3)]
    w_sweeps: usize,

    /// Screen out outlier tasks while training
    #[arg(long)]
    robust: bool,

    /// Where to write the model file
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KGrid(Vec<usize>);

fn parse_k_grid(s: &str) -> Result<KGrid, String> {
    let (a, b) = s.split_once("..").ok_or_else(|| format!("expected A..B, got {s:?}"))?;
    let a: usize = a.trim().parse().map_err(|_| format!("bad lower bound in {s:?}"))?;
    let b: usize = b.trim().parse().map_err(|_| format!("bad upper bound in {s:?}"))?;
    if a == 0 || a > b {
        return Err(format!("empty or invalid range {s:?}"));
    }
    Ok(KGrid((a..=b).collect()))
}

fn sibling(path: &std::path::Path, suffix: &str) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(suffix);
    path.with_file_name(name)
}

pub fn run(args: TrainArgs, exec: Exec) -> Result<(), Failure> {
    let problem = load_tasks(&args.manifest)?;
    info!("loaded {} tasks with {} features", problem.t(), problem.d());
    let hp = HyperParams {
        theta: args.theta,
        epsilon: args.epsilon,
        folds: args.folds,
        seed: args.seed,
        max_outer: args.max_iter,
        tol: args.tol,
        w_sweeps: args.w_sweeps,
        exec,
        ..HyperParams::default()
    };
    hp.validate()?;

    let k = match (&args.k, &args.k_grid) {
        (Some(k), _) => *k,
        (None, Some(KGrid(grid))) => {
            let sel = select_k(&problem, grid, &hp)?;
            let mut tsv = String::from("k\theldout_error\n");
            for (k, e) in &sel.curve {
                let _ = writeln!(tsv, "{k}\t{e}");
            }
            write_atomic(&sibling(&args.out, ".kcurve.tsv"), &tsv)?;
            info!("selected k = {}", sel.best_k);
            sel.best_k
        }
        (None, None) => unreachable!("clap requires --k or --k-grid"),
    };

    let model = if args.robust {
        fit_robust(&problem, k, &hp)?
    } else {
        fit(&problem, k, &hp)?
    };
    ModelFile::from(&model).save(&args.out)?;
    let r = &model.report;
    println!(
        "k={} obj={} iters={} outliers={}",
        r.k,
        r.final_objective(),
        r.iterations,
        r.outliers.len()
    );
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn k_grid_ranges() {
        assert_eq!(parse_k_grid("2..9").unwrap(), KGrid((2..=9).collect()));
        assert_eq!(parse_k_grid("4..4").unwrap(), KGrid(vec![4]));
        assert!(parse_k_grid("5..2").is_err());
        assert!(parse_k_grid("0..3").is_err());
        assert!(parse_k_grid("3").is_err());
    }

    #[test]
    fn sibling_appends_suffix() {
        assert_eq!(sibling(std::path::Path::new("out/m.model"), ".kcurve.tsv"), PathBuf::from("out/m.model.kcurve.tsv"));
    }
}
