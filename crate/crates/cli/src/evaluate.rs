use std::path::PathBuf;

use clap::{Args, ValueEnum};
use stcmtl::bench::evaluate;
use stcmtl::io::{load_tasks, render_trace, write_atomic, ModelFile, TruthFiles};
use stcmtl::{Error, Loss};

use crate::Failure;

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
#[clap(rename_all = "lowercase")]
enum Metric {
    /// Pooled root mean squared error (regression)
    Rmse,
    /// Pooled error rate (classification)
    Er,
    /// Coefficient estimation error
    Ree,
    /// Support recovery (Matthews correlation)
    Mcc,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    /// Model file written by `train`
    #[arg(long)]
    model: PathBuf,

    /// Test task manifest
    #[arg(long)]
    manifest: PathBuf,

    /// Ground-truth directory written by `simulate`
    #[arg(long)]
    truth: Option<PathBuf>,

    /// Metrics to report [default: the prediction error, plus ree and mcc
    /// when --truth is given]
    #[arg(long, value_enum, value_delimiter = ',')]
    metrics: Option<Vec<Metric>>,
}

/// Prints `metric\tvalue` rows. Models with screened-out tasks get a second
/// set of rows, suffixed `_survivors`, restricted to the remaining tasks.
pub fn run(args: EvaluateArgs) -> Result<(), Failure> {
    let file = ModelFile::load(&args.model)?;
    let trace = render_trace(&file.objective_trace);
    let model = file.into_model()?;
    let test = load_tasks(&args.manifest)?;
    if test.loss() != model.loss {
        return Err(Failure::Data(format!(
            "model was trained with {:?} loss but the manifest declares {:?}",
            model.loss,
            test.loss()
        )));
    }
    let error_metric = match test.loss() {
        Loss::Squared => Metric::Rmse,
        Loss::Logistic => Metric::Er,
    };
    let metrics = args.metrics.clone().unwrap_or_else(|| {
        let mut m = vec![error_metric];
        if args.truth.is_some() {
            m.extend([Metric::Ree, Metric::Mcc]);
        }
        m
    });
    if metrics.iter().any(|m| matches!(m, Metric::Rmse | Metric::Er) && *m != error_metric) {
        return Err(Failure::Data(format!(
            "{:?} loss is scored with {}",
            test.loss(),
            name(error_metric)
        )));
    }
    let wants_truth = metrics.iter().any(|m| matches!(m, Metric::Ree | Metric::Mcc));
    let truth = match (&args.truth, wants_truth) {
        (Some(dir), true) => Some(TruthFiles::read(dir)?),
        (None, true) => return Err(Error::MissingTruth.into()),
        _ => None,
    };

    let w = model.coefficients();
    let w_true = truth.as_ref().map(|t| t.w.view());
    let all: Vec<usize> = (0..test.t()).collect();
    let mut groups = vec![("", all)];
    let outliers = &model.report.outliers;
    if !outliers.is_empty() {
        let survivors = (0..test.t()).filter(|i| outliers.binary_search(i).is_err()).collect();
        groups.push(("_survivors", survivors));
    }

    let mut out = String::from("metric\tvalue\n");
    for (suffix, tasks) in &groups {
        let m = evaluate(w.view(), &test, w_true, tasks)?;
        for metric in &metrics {
            let value = match metric {
                Metric::Rmse | Metric::Er => Some(m.prediction_error),
                Metric::Ree => m.ree,
                Metric::Mcc => m.mcc,
            };
            if let Some(v) = value {
                out.push_str(&format!("{}{suffix}\t{v}\n", name(*metric)));
            }
        }
    }
    let mut trace_path = args.model.clone().into_os_string();
    trace_path.push(".trace.tsv");
    write_atomic(&PathBuf::from(trace_path), &trace)?;
    print!("{out}");
    Ok(())
}

fn name(m: Metric) -> &'static str {
    match m {
        Metric::Rmse => "rmse",
        Metric::Er => "er",
        Metric::Ree => "ree",
        Metric::Mcc => "mcc",
    }
}
