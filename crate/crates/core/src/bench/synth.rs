//! Synthetic multi-task regression problems with a known overlapping
//! cluster structure.
//!
//! Cluster `k` (1-based) is supported on feature rows `5(k-1)+1 ..= 5(k+1)`,
//! so consecutive clusters share five features. Nonzero cluster coefficients
//! are drawn from `U[-0.5,-0.1]` or `U[0.1,0.5]` with equal odds. The first
//! `pure_count` tasks are pure and split evenly across clusters; the rest are
//! mixed. Outlier tasks, if any, are appended after the regular tasks with ten
//! random nonzero coefficients from `U[0.5,1]`.
//!
//! The logistic variant (`y = sign(Xw + noise)`) is not part of the reference
//! benchmark; it only exists to exercise the classification code paths.

use std::collections::BTreeMap;

use ndarray::{Array2, ShapeBuilder};
use rand::seq::index::sample;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::data::{validate_problem, Loss, Problem, TaskDataset};
use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mixing {
    /// Mixed tasks combine two random clusters.
    Sparse,
    /// Mixed tasks combine every cluster.
    Dense,
}

impl Mixing {
    pub fn parse(s: &str) -> Option<Mixing> {
        match s {
            "sparse" => Some(Mixing::Sparse),
            "dense" => Some(Mixing::Dense),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Mixing::Sparse => "sparse",
            Mixing::Dense => "dense",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    /// Regular (non-outlier) tasks.
    pub t: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub d: usize,
    pub k: usize,
    pub mixing: Mixing,
    pub noise_sd: f64,
    pub pure_count: usize,
    pub outliers: usize,
    pub loss: Loss,
    pub seed: u64,
}

impl SynthSpec {
    /// 60 tasks (50 pure, 10 mixed), 100 + 100 rows, K = 5, noise sd 0.5.
    pub fn reference(d: usize, mixing: Mixing, seed: u64) -> Self {
        SynthSpec {
            t: 60,
            n_train: 100,
            n_test: 100,
            d,
            k: 5,
            mixing,
            noise_sd: 0.5,
            pure_count: 50,
            outliers: 0,
            loss: Loss::Squared,
            seed,
        }
    }

    /// The reference sparse design plus five planted outlier tasks.
    pub fn robust(d: usize, seed: u64) -> Self {
        SynthSpec {
            outliers: 5,
            ..SynthSpec::reference(d, Mixing::Sparse, seed)
        }
    }

    pub fn total_tasks(&self) -> usize {
        self.t + self.outliers
    }

    fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::BadSpec(m));
        if self.k == 0 {
            return bad("k must be positive".into());
        }
        if self.d < 5 * (self.k + 1) {
            return bad(format!("d = {} < 5(k+1) = {}", self.d, 5 * (self.k + 1)));
        }
        if self.pure_count > self.t || self.pure_count < self.k {
            return bad(format!(
                "pure_count = {} must be in k..=t ({}..={})",
                self.pure_count, self.k, self.t
            ));
        }
        if self.pure_count < self.t && self.mixing == Mixing::Sparse && self.k < 2 {
            return bad("sparse mixing needs k >= 2".into());
        }
        if self.n_train < 1 || self.n_test < 1 {
            return bad("need at least one training and one test row".into());
        }
        if self.outliers > 0 && self.d < 10 {
            return bad("outlier tasks need d >= 10".into());
        }
        if !(self.noise_sd >= 0.0) {
            return bad(format!("noise_sd = {}", self.noise_sd));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    /// D x K
    pub u_true: Array2<f64>,
    /// K x t, regular tasks only.
    pub v_true: Array2<f64>,
    /// D x (t + outliers)
    pub w_true: Array2<f64>,
    pub support: Array2<bool>,
    /// Indices of the planted outlier tasks.
    pub outlier_ids: Vec<usize>,
    /// Cluster of each pure task.
    pub pure: BTreeMap<usize, usize>,
}

#[derive(Debug, Clone)]
pub struct SynthData {
    pub train: Problem,
    pub test: Problem,
    pub truth: GroundTruth,
}

/// Uniform on `(0, 1)`, excluding zero.
fn open_unit<R: Rng>(rng: &mut R) -> f64 {
    loop {
        let x: f64 = rng.random();
        if x > 0.0 {
            return x;
        }
    }
}

pub fn generate(spec: &SynthSpec) -> Result<SynthData> {
    spec.validate()?;
    let (d, k, t) = (spec.d, spec.k, spec.t);
    let mut rng = rng::stream(spec.seed, rng::GEN, 0);

    let mut u = Array2::<f64>::zeros((d, k));
    for c in 0..k {
        for r in 5 * c..5 * c + 10 {
            let mag = rng.random_range(0.1..=0.5);
            u[[r, c]] = if rng.random_bool(0.5) { -mag } else { mag };
        }
    }

    let mut v = Array2::<f64>::zeros((k, t));
    let mut pure = BTreeMap::new();
    for i in 0..spec.pure_count {
        let c = i * k / spec.pure_count;
        v[[c, i]] = 1.0;
        pure.insert(i, c);
    }
    for i in spec.pure_count..t {
        let mut weights = vec![0.0; k];
        match spec.mixing {
            Mixing::Sparse => {
                let picked = sample(&mut rng, k, 2);
                for c in picked.iter() {
                    weights[c] = open_unit(&mut rng);
                }
            }
            Mixing::Dense => weights.iter_mut().for_each(|w| *w = open_unit(&mut rng)),
        }
        let s: f64 = weights.iter().sum();
        for (c, w) in weights.into_iter().enumerate() {
            v[[c, i]] = w / s;
        }
    }

    let total = spec.total_tasks();
    let mut w = Array2::<f64>::zeros((d, total));
    w.slice_mut(ndarray::s![.., ..t]).assign(&u.dot(&v));
    let outlier_ids: Vec<usize> = (t..total).collect();
    for &i in &outlier_ids {
        for r in sample(&mut rng, d, 10).iter() {
            w[[r, i]] = rng.random_range(0.5..=1.0);
        }
    }

    let mut train = Vec::with_capacity(total);
    let mut test = Vec::with_capacity(total);
    for i in 0..total {
        let mut rng = rng::stream(spec.seed, rng::GEN, 1 + i as u64);
        let wi = w.column(i);
        let mut draw = |n: usize| -> Result<TaskDataset> {
            let mut x = Array2::<f64>::zeros((n, d).f());
            x.iter_mut().for_each(|e| *e = StandardNormal.sample(&mut rng));
            let mut y = x.dot(&wi);
            for e in y.iter_mut() {
                let noise: f64 = StandardNormal.sample(&mut rng);
                *e += spec.noise_sd * noise;
            }
            if spec.loss == Loss::Logistic {
                y.mapv_inplace(|s| if s >= 0.0 { 1.0 } else { -1.0 });
            }
            TaskDataset::new(i, x, y, spec.loss)
        };
        train.push(draw(spec.n_train)?);
        test.push(draw(spec.n_test)?);
    }

    let support = w.mapv(|x| x != 0.0);
    Ok(SynthData {
        train: validate_problem(train)?,
        test: validate_problem(test)?,
        truth: GroundTruth {
            u_true: u,
            v_true: v,
            w_true: w,
            support,
            outlier_ids,
            pure,
        },
    })
}
