//! Text formats: task manifests and CSVs, TSV matrices, ground-truth
//! directories and the model file.
//!
//! A manifest lists one directive per line; blank lines and `#` comments are
//! ignored:
//!
//! ```text
//! loss squared
//! standardize false
//! task 1 train/task001.csv
//! task 2 train/task002.csv
//! ```
//!
//! Task paths are relative to the manifest. Task ids must be exactly
//! `1..=T`, in any order. Each task CSV has a header `y,x1,...,xD`.
//!
//! All output files are written to a temporary sibling first and renamed
//! into place. Floats are printed in Rust's shortest round-trip form, so
//! reading a file back reproduces every value bit for bit.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2, ArrayView2};

use crate::data::{validate_problem, ClusterCoefs, FitReport, Loss, Membership, Problem, TaskDataset};
use crate::error::{Error, Result};
use crate::trainer::StcmtlModel;

const MODEL_HEADER: &str = "stcmtl-model";
const MODEL_VERSION: u32 = 1;

fn parse_err(path: &Path, line: usize, column: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        column,
        msg: msg.into(),
    }
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Writes `contents` to `path` through a temporary file in the same
/// directory.
pub fn write_atomic(path: &Path, contents: &str) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path
        .file_name()
        .ok_or_else(|| Error::io(path, std::io::Error::other("not a file path")))?;
    let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    fs::write(&tmp, contents).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| {
        let _ = fs::remove_file(&tmp);
        Error::io(path, e)
    })
}

fn parse_f64(path: &Path, line: usize, column: usize, s: &str) -> Result<f64> {
    let v: f64 = s
        .trim()
        .parse()
        .map_err(|_| parse_err(path, line, column, format!("not a number: {s:?}")))?;
    if !v.is_finite() {
        return Err(parse_err(path, line, column, format!("not a finite number: {s:?}")));
    }
    Ok(v)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub loss: Loss,
    pub standardize: bool,
    /// Task CSV paths, ordered by task id, resolved against the manifest's
    /// directory.
    pub tasks: Vec<PathBuf>,
}

impl Manifest {
    pub fn parse(path: &Path, text: &str) -> Result<Manifest> {
        let base = path.parent().unwrap_or(Path::new(""));
        let mut loss = None;
        let mut standardize = false;
        let mut tasks: BTreeMap<usize, PathBuf> = BTreeMap::new();
        for (ln, raw) in text.lines().enumerate() {
            let line = ln + 1;
            let body = raw.split('#').next().unwrap().trim();
            if body.is_empty() {
                continue;
            }
            let mut parts = body.splitn(3, char::is_whitespace);
            let key = parts.next().unwrap();
            let rest: Vec<&str> = parts.map(str::trim).collect();
            match (key, rest.as_slice()) {
                ("loss", [v]) => {
                    loss = Some(Loss::parse(v).ok_or_else(|| {
                        parse_err(path, line, 2, format!("unknown loss {v:?}"))
                    })?)
                }
                ("standardize", [v]) => {
                    standardize = match *v {
                        "true" => true,
                        "false" => false,
                        _ => return Err(parse_err(path, line, 2, format!("expected true or false, got {v:?}"))),
                    }
                }
                ("task", [id, p]) => {
                    let id: usize = id
                        .parse()
                        .map_err(|_| parse_err(path, line, 2, format!("bad task id {id:?}")))?;
                    if tasks.insert(id, base.join(p)).is_some() {
                        return Err(parse_err(path, line, 2, format!("duplicate task id {id}")));
                    }
                }
                _ => return Err(parse_err(path, line, 1, format!("unrecognized directive {body:?}"))),
            }
        }
        let loss = loss.ok_or_else(|| parse_err(path, 0, 0, "missing `loss` directive"))?;
        if tasks.is_empty() {
            return Err(Error::EmptyProblem);
        }
        if let Some((pos, &id)) = tasks.keys().enumerate().find(|(pos, &id)| id != pos + 1) {
            let _ = id;
            return Err(parse_err(path, 0, 0, format!("task ids must be 1..={}; missing {}", tasks.len(), pos + 1)));
        }
        Ok(Manifest {
            loss,
            standardize,
            tasks: tasks.into_values().collect(),
        })
    }

    pub fn load(path: &Path) -> Result<Manifest> {
        Manifest::parse(path, &read(path)?)
    }

    /// Renders a manifest whose task paths are written as given.
    pub fn render(loss: Loss, standardize: bool, task_paths: &[String]) -> String {
        let mut s = format!("loss {}\nstandardize {}\n", loss.as_str(), standardize);
        for (i, p) in task_paths.iter().enumerate() {
            let _ = writeln!(s, "task {} {}", i + 1, p);
        }
        s
    }
}

/// Reads one task CSV: header `y,x1,...,xD`, then one row per example.
pub fn read_task_csv(path: &Path, id: usize, loss: Loss) -> Result<TaskDataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    let header = rdr.headers().map_err(|e| csv_error(path, e))?.clone();
    if header.get(0) != Some("y") {
        return Err(parse_err(path, 1, 1, "first column must be `y`"));
    }
    for (j, h) in header.iter().enumerate().skip(1) {
        if h != format!("x{j}") {
            return Err(parse_err(path, 1, j + 1, format!("expected header x{j}, got {h:?}")));
        }
    }
    let d = header.len() - 1;
    let mut ys = Vec::new();
    let mut xs = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| csv_error(path, e))?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        for (j, cell) in rec.iter().enumerate() {
            let v = parse_f64(path, line, j + 1, cell)?;
            if j == 0 {
                ys.push(v);
            } else {
                xs.push(v);
            }
        }
    }
    let n = ys.len();
    let x = Array2::from_shape_vec((n, d), xs).expect("row lengths checked by the reader");
    TaskDataset::new(id, x, Array1::from(ys), loss)
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line() as usize);
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        csv::ErrorKind::UnequalLengths { expected_len, len, .. } => parse_err(
            path,
            line,
            len as usize + 1,
            format!("expected {expected_len} fields, found {len}"),
        ),
        other => parse_err(path, line, 0, format!("{other:?}")),
    }
}

/// Centers and scales each feature column of each task to unit variance.
/// Constant columns are only centered.
fn standardize(task: TaskDataset) -> Result<TaskDataset> {
    let mut x = task.x().to_owned();
    let n = x.nrows().max(1) as f64;
    for mut col in x.columns_mut() {
        let mean = col.sum() / n;
        col.mapv_inplace(|v| v - mean);
        let sd = (col.dot(&col) / n).sqrt();
        if sd > 0.0 {
            col.mapv_inplace(|v| v / sd);
        }
    }
    TaskDataset::new(task.id(), x, task.y().to_owned(), task.loss())
}

/// Loads and validates every task listed in a manifest.
pub fn load_tasks(manifest: &Path) -> Result<Problem> {
    let m = Manifest::load(manifest)?;
    let tasks = m
        .tasks
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let t = read_task_csv(p, i, m.loss)?;
            if m.standardize {
                standardize(t)
            } else {
                Ok(t)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    validate_problem(tasks)
}

pub fn render_task_csv(task: &TaskDataset) -> String {
    let mut s = String::from("y");
    for j in 1..=task.d() {
        let _ = write!(s, ",x{j}");
    }
    s.push('\n');
    for (r, row) in task.x().rows().into_iter().enumerate() {
        let _ = write!(s, "{}", task.y()[r]);
        for v in row {
            let _ = write!(s, ",{v}");
        }
        s.push('\n');
    }
    s
}

/// Writes `problem` as a manifest plus one CSV per task under `dir/subdir`.
pub fn write_problem(problem: &Problem, dir: &Path, manifest_name: &str, subdir: &str) -> Result<PathBuf> {
    let task_dir = dir.join(subdir);
    fs::create_dir_all(&task_dir).map_err(|e| Error::io(&task_dir, e))?;
    let mut rel = Vec::with_capacity(problem.t());
    for (i, task) in problem.tasks().iter().enumerate() {
        let name = format!("task{:03}.csv", i + 1);
        write_atomic(&task_dir.join(&name), &render_task_csv(task))?;
        rel.push(format!("{subdir}/{name}"));
    }
    let manifest = dir.join(manifest_name);
    write_atomic(&manifest, &Manifest::render(problem.loss(), false, &rel))?;
    Ok(manifest)
}

pub fn render_tsv<T: std::fmt::Display>(m: ArrayView2<'_, T>) -> String {
    let mut s = String::new();
    for row in m.rows() {
        let mut first = true;
        for v in row {
            if !first {
                s.push('\t');
            }
            first = false;
            let _ = write!(s, "{v}");
        }
        s.push('\n');
    }
    s
}

/// Reads a dense tab-separated matrix.
pub fn read_tsv(path: &Path) -> Result<Array2<f64>> {
    let text = read(path)?;
    let mut data = Vec::new();
    let mut cols = None;
    let mut rows = 0;
    for (ln, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        match cols {
            None => cols = Some(fields.len()),
            Some(c) if c != fields.len() => {
                return Err(parse_err(path, ln + 1, fields.len().min(c) + 1, format!("expected {c} fields, found {}", fields.len())))
            }
            _ => {}
        }
        for (j, f) in fields.iter().enumerate() {
            data.push(parse_f64(path, ln + 1, j + 1, f)?);
        }
        rows += 1;
    }
    Ok(Array2::from_shape_vec((rows, cols.unwrap_or(0)), data).expect("row lengths checked"))
}

/// Ground truth of a synthetic dataset as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct TruthFiles {
    /// D x K
    pub u: Array2<f64>,
    /// K x t over regular tasks.
    pub v: Array2<f64>,
    /// D x T over all tasks.
    pub w: Array2<f64>,
    pub support: Array2<bool>,
    /// 0-based ids of planted outlier tasks.
    pub outliers: Vec<usize>,
}

impl TruthFiles {
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_atomic(&dir.join("U.tsv"), &render_tsv(self.u.view()))?;
        write_atomic(&dir.join("V.tsv"), &render_tsv(self.v.view()))?;
        write_atomic(&dir.join("W.tsv"), &render_tsv(self.w.view()))?;
        let s = self.support.mapv(u8::from);
        write_atomic(&dir.join("support.tsv"), &render_tsv(s.view()))?;
        let ids: String = self.outliers.iter().map(|i| format!("{}\n", i + 1)).collect();
        write_atomic(&dir.join("outliers.txt"), &ids)
    }

    pub fn read(dir: &Path) -> Result<TruthFiles> {
        let w = read_tsv(&dir.join("W.tsv"))?;
        let support_path = dir.join("support.tsv");
        let s = read_tsv(&support_path)?;
        if s.dim() != w.dim() {
            return Err(Error::ShapeMismatch(format!(
                "support is {:?} but W is {:?}",
                s.dim(),
                w.dim()
            )));
        }
        let opath = dir.join("outliers.txt");
        let mut outliers = Vec::new();
        for (ln, line) in read(&opath)?.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let id: usize = line
                .parse()
                .ok()
                .filter(|&i| i >= 1)
                .ok_or_else(|| parse_err(&opath, ln + 1, 1, format!("bad task id {line:?}")))?;
            outliers.push(id - 1);
        }
        Ok(TruthFiles {
            u: read_tsv(&dir.join("U.tsv"))?,
            v: read_tsv(&dir.join("V.tsv"))?,
            support: s.mapv(|x| x != 0.0),
            w,
            outliers,
        })
    }
}

impl From<&crate::bench::GroundTruth> for TruthFiles {
    fn from(g: &crate::bench::GroundTruth) -> Self {
        TruthFiles {
            u: g.u_true.clone(),
            v: g.v_true.clone(),
            w: g.w_true.clone(),
            support: g.support.clone(),
            outliers: g.outlier_ids.clone(),
        }
    }
}

/// Everything needed to predict with and inspect a fitted model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelFile {
    pub loss: Loss,
    /// D x K
    pub u: Array2<f64>,
    /// K x T
    pub v: Array2<f64>,
    /// Pure task -> cluster, 0-based.
    pub pure: BTreeMap<usize, usize>,
    pub lambda: Vec<f64>,
    pub gamma: f64,
    /// 0-based, ascending.
    pub outliers: Vec<usize>,
    pub objective_trace: Vec<f64>,
    pub best_iteration: usize,
    pub converged: bool,
    /// Per-task coefficient vectors used instead of `U v_i`.
    pub overrides: BTreeMap<usize, Array1<f64>>,
}

impl From<&StcmtlModel> for ModelFile {
    fn from(m: &StcmtlModel) -> Self {
        ModelFile {
            loss: m.loss,
            u: m.u.view().to_owned(),
            v: m.v.view().to_owned(),
            pure: m.v.cluster_of_pure().clone(),
            lambda: m.report.lambda.clone(),
            gamma: m.report.gamma,
            outliers: m.report.outliers.clone(),
            objective_trace: m.report.objective_trace.clone(),
            best_iteration: m.report.best_iteration,
            converged: m.report.converged,
            overrides: m.task_overrides.clone(),
        }
    }
}

fn join<T: std::fmt::Display>(it: impl IntoIterator<Item = T>) -> String {
    let mut s = String::new();
    for (i, v) in it.into_iter().enumerate() {
        if i > 0 {
            s.push(' ');
        }
        let _ = write!(s, "{v}");
    }
    s
}

/// Line cursor over a model file.
struct Lines<'a> {
    path: &'a Path,
    iter: std::iter::Enumerate<std::str::Lines<'a>>,
    line: usize,
}

impl<'a> Lines<'a> {
    fn next_line(&mut self) -> Result<&'a str> {
        let (i, l) = self
            .iter
            .next()
            .ok_or_else(|| parse_err(self.path, self.line + 1, 1, "unexpected end of file"))?;
        self.line = i + 1;
        Ok(l)
    }

    /// Next line, which must start with `key`; returns the remaining fields.
    fn field(&mut self, key: &str) -> Result<Vec<&'a str>> {
        let l = self.next_line()?;
        let mut parts = l.split_whitespace();
        if parts.next() != Some(key) {
            return Err(self.err(1, format!("expected `{key}`")));
        }
        Ok(parts.collect())
    }

    fn single(&mut self, key: &str) -> Result<&'a str> {
        match self.field(key)?.as_slice() {
            [v] => Ok(v),
            _ => Err(self.err(2, format!("`{key}` takes one value"))),
        }
    }

    fn err(&self, column: usize, msg: impl Into<String>) -> Error {
        parse_err(self.path, self.line, column, msg)
    }

    fn usize(&mut self, key: &str) -> Result<usize> {
        let v = self.single(key)?;
        v.parse().map_err(|_| self.err(2, format!("bad integer {v:?}")))
    }

    fn floats(&self, fields: &[&str], offset: usize) -> Result<Vec<f64>> {
        fields
            .iter()
            .enumerate()
            .map(|(j, f)| {
                f.parse::<f64>()
                    .map_err(|_| self.err(j + 1 + offset, format!("not a number: {f:?}")))
            })
            .collect()
    }

    fn matrix(&mut self, key: &str, rows: usize, cols: usize) -> Result<Array2<f64>> {
        if !self.field(key)?.is_empty() {
            return Err(self.err(2, format!("`{key}` takes no values")));
        }
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows {
            let fields: Vec<&str> = self.next_line()?.split_whitespace().collect();
            if fields.len() != cols {
                return Err(self.err(1, format!("expected {cols} values, found {}", fields.len())));
            }
            data.extend(self.floats(&fields, 0)?);
        }
        Ok(Array2::from_shape_vec((rows, cols), data).expect("sizes checked"))
    }
}

impl ModelFile {
    pub fn render(&self) -> String {
        let (d, k) = self.u.dim();
        let t = self.v.ncols();
        let mut s = String::new();
        let _ = writeln!(s, "{MODEL_HEADER} {MODEL_VERSION}");
        let _ = writeln!(s, "loss {}", self.loss.as_str());
        let _ = writeln!(s, "k {k}");
        let _ = writeln!(s, "d {d}");
        let _ = writeln!(s, "t {t}");
        let _ = writeln!(s, "gamma {}", self.gamma);
        let _ = writeln!(s, "lambda {}", join(&self.lambda));
        let _ = writeln!(s, "pure {}", join(self.pure.iter().map(|(i, c)| format!("{}:{}", i + 1, c + 1))));
        let _ = writeln!(s, "outliers {}", join(self.outliers.iter().map(|i| i + 1)));
        let _ = writeln!(s, "trace {}", join(&self.objective_trace));
        let _ = writeln!(s, "best_iteration {}", self.best_iteration);
        let _ = writeln!(s, "converged {}", self.converged);
        s.push_str("U\n");
        s.push_str(&render_tsv(self.u.view()).replace('\t', " "));
        s.push_str("V\n");
        s.push_str(&render_tsv(self.v.view()).replace('\t', " "));
        let _ = writeln!(s, "overrides {}", self.overrides.len());
        for (i, w) in &self.overrides {
            let _ = writeln!(s, "{} {}", i + 1, join(w));
        }
        s.push_str("end\n");
        s
    }

    pub fn parse(path: &Path, text: &str) -> Result<ModelFile> {
        let mut c = Lines {
            path,
            iter: text.lines().enumerate(),
            line: 0,
        };
        let version = c.single(MODEL_HEADER)?;
        if version != MODEL_VERSION.to_string() {
            return Err(c.err(2, format!("unsupported model version {version:?}")));
        }
        let loss_s = c.single("loss")?;
        let loss = Loss::parse(loss_s).ok_or_else(|| c.err(2, format!("unknown loss {loss_s:?}")))?;
        let k = c.usize("k")?;
        let d = c.usize("d")?;
        let t = c.usize("t")?;
        let g = c.single("gamma")?;
        let gamma = c.floats(&[g], 1)?[0];
        let f = c.field("lambda")?;
        let lambda = c.floats(&f, 1)?;
        let mut pure = BTreeMap::new();
        for (j, p) in c.field("pure")?.into_iter().enumerate() {
            let pair = p
                .split_once(':')
                .and_then(|(a, b)| Some((a.parse::<usize>().ok()?, b.parse::<usize>().ok()?)))
                .filter(|&(a, b)| a >= 1 && b >= 1);
            let (i, cl) = pair.ok_or_else(|| c.err(j + 2, format!("bad pure entry {p:?}")))?;
            pure.insert(i - 1, cl - 1);
        }
        let mut outliers = Vec::new();
        for (j, p) in c.field("outliers")?.into_iter().enumerate() {
            let i: usize = p
                .parse()
                .ok()
                .filter(|&i| i >= 1)
                .ok_or_else(|| c.err(j + 2, format!("bad task id {p:?}")))?;
            outliers.push(i - 1);
        }
        let f = c.field("trace")?;
        let objective_trace = c.floats(&f, 1)?;
        let best_iteration = c.usize("best_iteration")?;
        let conv = c.single("converged")?;
        let converged = match conv {
            "true" => true,
            "false" => false,
            _ => return Err(c.err(2, format!("expected true or false, got {conv:?}"))),
        };
        let u = c.matrix("U", d, k)?;
        let v = c.matrix("V", k, t)?;
        let n_over = c.usize("overrides")?;
        let mut overrides = BTreeMap::new();
        for _ in 0..n_over {
            let fields: Vec<&str> = c.next_line()?.split_whitespace().collect();
            let id = fields
                .first()
                .and_then(|s| s.parse::<usize>().ok())
                .filter(|&i| i >= 1 && i <= t)
                .ok_or_else(|| c.err(1, "bad override task id"))?;
            if fields.len() != d + 1 {
                return Err(c.err(1, format!("expected {} values, found {}", d + 1, fields.len())));
            }
            overrides.insert(id - 1, Array1::from(c.floats(&fields[1..], 1)?));
        }
        if c.next_line()? != "end" {
            return Err(c.err(1, "expected `end`"));
        }
        if lambda.len() != t {
            return Err(Error::ShapeMismatch(format!("{} penalties for {t} tasks", lambda.len())));
        }
        Ok(ModelFile {
            loss,
            u,
            v,
            pure,
            lambda,
            gamma,
            outliers,
            objective_trace,
            best_iteration,
            converged,
            overrides,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.render())
    }

    pub fn load(path: &Path) -> Result<ModelFile> {
        ModelFile::parse(path, &read(path)?)
    }

    /// Rebuilds a model, re-checking the membership invariants. Phase
    /// timings are not stored and come back as zero.
    pub fn into_model(self) -> Result<StcmtlModel> {
        let k = self.u.ncols();
        if self.best_iteration == 0 || self.best_iteration > self.objective_trace.len() {
            return Err(Error::InvalidParam(format!(
                "best iteration {} outside a trace of {}",
                self.best_iteration,
                self.objective_trace.len()
            )));
        }
        let report = FitReport {
            iterations: self.objective_trace.len(),
            objective_trace: self.objective_trace,
            lambda: self.lambda,
            gamma: self.gamma,
            k,
            outliers: self.outliers,
            converged: self.converged,
            best_iteration: self.best_iteration,
            times: Default::default(),
        };
        Ok(StcmtlModel {
            u: ClusterCoefs::new(self.u)?,
            v: Membership::new(self.v, self.pure)?,
            task_overrides: self.overrides,
            loss: self.loss,
            report,
        })
    }
}

/// `iteration\tobjective` rows, 1-based.
pub fn render_trace(trace: &[f64]) -> String {
    let mut s = String::from("iteration\tobjective\n");
    for (i, v) in trace.iter().enumerate() {
        let _ = writeln!(s, "{}\t{v}", i + 1);
    }
    s
}
