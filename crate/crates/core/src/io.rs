//! On-disk formats: a JSON manifest plus one CSV file per matrix.
//!
//! Matrix files have one header row of column names and one row per unit
//! (or per variable for loadings). Numbers use the shortest decimal that
//! parses back to the same `f64`, so reloads are bit-exact. Matrices with no
//! columns are not written; they are reconstructed from the manifest.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{de::DeserializeOwned, Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Dataset, Modality, ModalityType, ModelParams, Study, StudyVariational, VariationalParams};
use crate::simulate::GroundTruth;
use crate::validate::validate_dataset;
use crate::vem::{FitConfig, FitResult};

/// Newest artifact version this build reads and the one it writes.
pub const FORMAT_VERSION: u32 = 1;

pub const DATASET_MANIFEST: &str = "dataset.json";
pub const FIT_MANIFEST: &str = "fit.json";
pub const TRUTH_MANIFEST: &str = "truth.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub studies: Vec<StudyEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyEntry {
    pub name: String,
    pub n: usize,
    pub covariates_file: String,
    pub modalities: Vec<ModalityEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModalityEntry {
    pub name: String,
    #[serde(rename = "type")]
    pub kind: ModalityType,
    pub p: usize,
    pub data_file: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trials_file: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub offsets_file: Option<String>,
}

/// Shortest round-trip decimal; integral values print without a fraction.
pub fn format_f64(x: f64) -> String {
    if x == 0.0 {
        return if x.is_sign_negative() { "-0".into() } else { "0".into() };
    }
    if x.fract() == 0.0 && x.abs() < 1e15 {
        return format!("{}", x as i64);
    }
    format!("{x:?}")
}

pub fn write_matrix(path: &Path, header: &[String], m: &DMatrix<f64>) -> Result<()> {
    debug_assert_eq!(header.len(), m.ncols());
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut out = header.join(",");
    out.push('\n');
    let mut line = String::new();
    for i in 0..m.nrows() {
        line.clear();
        for j in 0..m.ncols() {
            if j > 0 {
                line.push(',');
            }
            line.push_str(&format_f64(m[(i, j)]));
        }
        line.push('\n');
        out.push_str(&line);
        if out.len() > 1 << 16 {
            w.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))?;
            out.clear();
        }
    }
    w.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

/// Read a matrix file, checking the declared shape. `nrows = None` accepts
/// any number of rows.
pub fn read_matrix(path: &Path, nrows: Option<usize>, ncols: usize) -> Result<DMatrix<f64>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    let header_len = rdr.headers().map_err(|e| csv_error(path, e))?.len();
    if header_len != ncols {
        return Err(Error::parse(
            path,
            format!("line 1: header has {header_len} columns, expected {ncols}"),
        ));
    }
    let mut data = Vec::new();
    let mut rows = 0;
    for rec in rdr.records() {
        let rec = rec.map_err(|e| csv_error(path, e))?;
        let line = rec.position().map_or(rows + 2, |p| p.line() as usize);
        if rec.len() != ncols {
            return Err(Error::parse(
                path,
                format!("line {line}: row has {} columns, expected {ncols}", rec.len()),
            ));
        }
        for (j, field) in rec.iter().enumerate() {
            let v: f64 = field.trim().parse().map_err(|_| {
                Error::parse(path, format!("line {line}, column {}: `{field}` is not a number", j + 1))
            })?;
            data.push(v);
        }
        rows += 1;
    }
    if let Some(n) = nrows {
        if rows != n {
            return Err(Error::parse(path, format!("has {rows} data rows, expected {n}")));
        }
    }
    Ok(DMatrix::from_row_slice(rows, ncols, &data))
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    if let csv::ErrorKind::Io(_) = e.kind() {
        match e.into_kind() {
            csv::ErrorKind::Io(io) => return Error::io(path, io),
            _ => unreachable!(),
        }
    }
    let loc = e.position().map(|p| format!("line {}: ", p.line())).unwrap_or_default();
    Error::parse(path, format!("{loc}{e}"))
}

fn numbered(prefix: &str, k: usize) -> Vec<String> {
    (1..=k).map(|j| format!("{prefix}{j}")).collect()
}

fn put(dir: &Path, name: &str, prefix: &str, m: &DMatrix<f64>) -> Result<()> {
    if m.ncols() == 0 {
        return Ok(());
    }
    write_matrix(&dir.join(name), &numbered(prefix, m.ncols()), m)
}

fn get(dir: &Path, name: &str, nrows: usize, ncols: usize) -> Result<DMatrix<f64>> {
    if ncols == 0 {
        return Ok(DMatrix::zeros(nrows, 0));
    }
    read_matrix(&dir.join(name), Some(nrows), ncols)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::parse(path, e.to_string()))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Parse a manifest after checking its `version` field, so a newer artifact
/// is rejected before anything else is read.
fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let value: serde_json::Value = serde_json::from_str(&text)
        .map_err(|e| Error::parse(path, format!("line {}, column {}: {e}", e.line(), e.column())))?;
    let found = value
        .get("version")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| Error::parse(path, "missing integer `version` field"))?;
    if found > FORMAT_VERSION as u64 || found == 0 {
        return Err(Error::Version {
            path: path.to_path_buf(),
            found: found.min(u32::MAX as u64) as u32,
            supported: FORMAT_VERSION,
        });
    }
    serde_json::from_value(value).map_err(|e| Error::parse(path, e.to_string()))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

// ---------------------------------------------------------------- datasets

/// Write `ds` under `dir` and return the manifest path.
pub fn save_dataset(ds: &Dataset, dir: &Path) -> Result<PathBuf> {
    create_dir(dir)?;
    let mut studies = Vec::with_capacity(ds.num_studies());
    for (s, st) in ds.studies.iter().enumerate() {
        let sname = format!("study{}", s + 1);
        let zfile = format!("{sname}_covariates.csv");
        write_matrix(&dir.join(&zfile), &numbered("z", st.z.ncols()), &st.z)?;
        let mut modalities = Vec::with_capacity(st.modalities.len());
        for (m, md) in st.modalities.iter().enumerate() {
            let mname = format!("modality{}", m + 1);
            let data_file = format!("{sname}_{mname}.csv");
            write_matrix(&dir.join(&data_file), &numbered(&format!("{mname}_v"), md.p()), &md.x)?;
            let trials_file = if md.kind == ModalityType::Binomial {
                let f = format!("{sname}_{mname}_trials.csv");
                let t = DMatrix::from_iterator(1, md.trials.len(), md.trials.iter().map(|&t| t as f64));
                write_matrix(&dir.join(&f), &numbered(&format!("{mname}_v"), md.trials.len()), &t)?;
                Some(f)
            } else {
                None
            };
            let offsets_file = if md.offsets.iter().any(|&o| o != 0.0) {
                let f = format!("{sname}_{mname}_offsets.csv");
                let o = DMatrix::from_column_slice(md.offsets.len(), 1, md.offsets.as_slice());
                write_matrix(&dir.join(&f), &["offset".to_string()], &o)?;
                Some(f)
            } else {
                None
            };
            modalities.push(ModalityEntry {
                name: mname,
                kind: md.kind,
                p: md.p(),
                data_file,
                trials_file,
                offsets_file,
            });
        }
        studies.push(StudyEntry {
            name: sname,
            n: st.n(),
            covariates_file: zfile,
            modalities,
        });
    }
    let path = dir.join(DATASET_MANIFEST);
    write_json(&path, &DatasetManifest { version: FORMAT_VERSION, studies })?;
    Ok(path)
}

fn check_manifest(path: &Path, man: &DatasetManifest) -> Result<()> {
    let Some(first) = man.studies.first() else {
        return Err(Error::parse(path, "manifest lists no studies"));
    };
    for st in &man.studies {
        let same = st.modalities.len() == first.modalities.len()
            && st
                .modalities
                .iter()
                .zip(&first.modalities)
                .all(|(a, b)| a.name == b.name && a.kind == b.kind && a.p == b.p);
        if !same {
            return Err(Error::parse(
                path,
                format!("study `{}` lists different modalities than study `{}`", st.name, first.name),
            ));
        }
    }
    Ok(())
}

fn load_study(dir: &Path, entry: &StudyEntry, d: Option<usize>) -> Result<Study> {
    let zpath = dir.join(&entry.covariates_file);
    let z = match d {
        Some(d) => read_matrix(&zpath, Some(entry.n), d)?,
        None => {
            let ncols = csv::ReaderBuilder::new()
                .from_path(&zpath)
                .and_then(|mut r| r.headers().map(|h| h.len()))
                .map_err(|e| csv_error(&zpath, e))?;
            read_matrix(&zpath, Some(entry.n), ncols)?
        }
    };
    let mut modalities = Vec::with_capacity(entry.modalities.len());
    for me in &entry.modalities {
        let x = read_matrix(&dir.join(&me.data_file), Some(entry.n), me.p)?;
        let mut md = Modality::new(x, me.kind);
        match (&me.trials_file, me.kind) {
            (Some(f), ModalityType::Binomial) => {
                let path = dir.join(f);
                let t = read_matrix(&path, Some(1), me.p)?;
                let mut trials = Vec::with_capacity(me.p);
                for (j, &v) in t.iter().enumerate() {
                    if v.fract() != 0.0 || !(1.0..=u32::MAX as f64).contains(&v) {
                        return Err(Error::parse(
                            &path,
                            format!("line 2, column {}: trial count `{v}` is not a positive integer", j + 1),
                        ));
                    }
                    trials.push(v as u32);
                }
                md = md.with_trials(trials);
            }
            (Some(_), _) => {
                return Err(Error::parse(
                    dir.join(DATASET_MANIFEST),
                    format!("modality `{}` is {} but lists a trials file", me.name, me.kind),
                ))
            }
            (None, _) => {}
        }
        if let Some(f) = &me.offsets_file {
            let o = read_matrix(&dir.join(f), Some(entry.n), 1)?;
            md = md.with_offsets(DVector::from_column_slice(o.as_slice()));
        }
        modalities.push(md);
    }
    Ok(Study { modalities, z })
}

/// Load and validate a dataset from its manifest.
pub fn load_dataset(manifest_path: &Path) -> Result<Dataset> {
    let man: DatasetManifest = read_json(manifest_path)?;
    check_manifest(manifest_path, &man)?;
    let dir = manifest_path.parent().unwrap_or(Path::new("."));
    let first = load_study(dir, &man.studies[0], None)?;
    let d = first.z.ncols();
    let rest: Vec<Study> = man.studies[1..]
        .par_iter()
        .map(|e| load_study(dir, e, Some(d)))
        .collect::<Result<_>>()?;
    let mut studies = vec![first];
    studies.extend(rest);
    let ds = Dataset { studies };
    let report = validate_dataset(&ds);
    if !report.is_valid() {
        return Err(Error::Validation(report.violations));
    }
    Ok(ds)
}

// --------------------------------------------------------- parameter sets

/// Shapes needed to rebuild parameters from their files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Shape {
    pub sample_sizes: Vec<usize>,
    pub dims: Vec<usize>,
    pub types: Vec<ModalityType>,
    pub covariate_dim: usize,
    pub q: usize,
    pub qs: Vec<usize>,
}

fn write_theta(dir: &Path, theta: &ModelParams) -> Result<()> {
    for (m, b) in theta.beta.iter().enumerate() {
        put(dir, &format!("beta_m{}.csv", m + 1), "z", b)?;
        put(dir, &format!("A_m{}.csv", m + 1), "f", &theta.a[m])?;
    }
    for s in 0..theta.num_studies() {
        for m in 0..theta.num_modalities() {
            put(dir, &format!("B_s{}_m{}.csv", s + 1, m + 1), "h", &theta.b[s][m])?;
            let l = &theta.lambda[s][m];
            put(
                dir,
                &format!("lambda_s{}_m{}.csv", s + 1, m + 1),
                "lambda",
                &DMatrix::from_column_slice(l.len(), 1, l.as_slice()),
            )?;
        }
    }
    put(dir, "sigma2.csv", "modality", &theta.sigma2)
}

fn read_theta(dir: &Path, sh: &Shape) -> Result<ModelParams> {
    let ns = sh.sample_sizes.len();
    let nm = sh.dims.len();
    let mut beta = Vec::with_capacity(nm);
    let mut a = Vec::with_capacity(nm);
    for (m, &p) in sh.dims.iter().enumerate() {
        beta.push(get(dir, &format!("beta_m{}.csv", m + 1), p, sh.covariate_dim)?);
        a.push(get(dir, &format!("A_m{}.csv", m + 1), p, sh.q)?);
    }
    let mut b = Vec::with_capacity(ns);
    let mut lambda = Vec::with_capacity(ns);
    for s in 0..ns {
        let mut bs = Vec::with_capacity(nm);
        let mut ls = Vec::with_capacity(nm);
        for (m, &p) in sh.dims.iter().enumerate() {
            bs.push(get(dir, &format!("B_s{}_m{}.csv", s + 1, m + 1), p, sh.qs[s])?);
            let l = get(dir, &format!("lambda_s{}_m{}.csv", s + 1, m + 1), p, 1)?;
            ls.push(DVector::from_column_slice(l.as_slice()));
        }
        b.push(bs);
        lambda.push(ls);
    }
    Ok(ModelParams {
        beta,
        a,
        b,
        lambda,
        sigma2: get(dir, "sigma2.csv", ns, nm)?,
        q: sh.q,
        qs: sh.qs.clone(),
    })
}

/// Per-unit `k x k` covariances flattened column-major into an `n x k^2` matrix.
fn flatten_covs(covs: &[DMatrix<f64>], k: usize) -> DMatrix<f64> {
    DMatrix::from_fn(covs.len(), k * k, |i, c| covs[i].as_slice()[c])
}

fn unflatten_covs(m: &DMatrix<f64>, k: usize) -> Vec<DMatrix<f64>> {
    (0..m.nrows())
        .map(|i| DMatrix::from_iterator(k, k, m.row(i).iter().copied()))
        .collect()
}

fn write_phi(dir: &Path, phi: &VariationalParams, sh: &Shape) -> Result<()> {
    for (s, sv) in phi.studies.iter().enumerate() {
        let tag = format!("s{}", s + 1);
        put(dir, &format!("F_{tag}.csv"), "f", &sv.mean_f)?;
        put(dir, &format!("F_cov_{tag}.csv"), "c", &flatten_covs(&sv.cov_f, sh.q))?;
        put(dir, &format!("H_{tag}.csv"), "h", &sv.mean_h)?;
        put(dir, &format!("H_cov_{tag}.csv"), "c", &flatten_covs(&sv.cov_h, sh.qs[s]))?;
        put(dir, &format!("V_{tag}.csv"), "modality", &sv.mean_v)?;
        put(dir, &format!("V_var_{tag}.csv"), "modality", &sv.var_v)?;
        for m in 0..sh.dims.len() {
            if let (Some(xi), Some(s2)) = (&sv.xi[m], &sv.s2y[m]) {
                put(dir, &format!("Y_mean_{tag}_m{}.csv", m + 1), "v", xi)?;
                put(dir, &format!("Y_var_{tag}_m{}.csv", m + 1), "v", s2)?;
            }
        }
    }
    Ok(())
}

fn read_phi(dir: &Path, sh: &Shape) -> Result<VariationalParams> {
    let nm = sh.dims.len();
    let studies = sh
        .sample_sizes
        .iter()
        .enumerate()
        .map(|(s, &n)| {
            let tag = format!("s{}", s + 1);
            let qs = sh.qs[s];
            let mut xi = Vec::with_capacity(nm);
            let mut s2y = Vec::with_capacity(nm);
            for (m, &p) in sh.dims.iter().enumerate() {
                if sh.types[m].is_gaussian() {
                    xi.push(None);
                    s2y.push(None);
                } else {
                    xi.push(Some(get(dir, &format!("Y_mean_{tag}_m{}.csv", m + 1), n, p)?));
                    s2y.push(Some(get(dir, &format!("Y_var_{tag}_m{}.csv", m + 1), n, p)?));
                }
            }
            Ok(StudyVariational {
                xi,
                s2y,
                mean_f: get(dir, &format!("F_{tag}.csv"), n, sh.q)?,
                cov_f: if sh.q == 0 {
                    vec![DMatrix::zeros(0, 0); n]
                } else {
                    unflatten_covs(&get(dir, &format!("F_cov_{tag}.csv"), n, sh.q * sh.q)?, sh.q)
                },
                mean_h: get(dir, &format!("H_{tag}.csv"), n, qs)?,
                cov_h: if qs == 0 {
                    vec![DMatrix::zeros(0, 0); n]
                } else {
                    unflatten_covs(&get(dir, &format!("H_cov_{tag}.csv"), n, qs * qs)?, qs)
                },
                mean_v: get(dir, &format!("V_{tag}.csv"), n, nm)?,
                var_v: get(dir, &format!("V_var_{tag}.csv"), n, nm)?,
            })
        })
        .collect::<Result<_>>()?;
    Ok(VariationalParams { studies })
}

// ------------------------------------------------------------------- fits

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct FitManifest {
    version: u32,
    shape: Shape,
    config: FitConfig,
    converged: bool,
    iterations: usize,
    elbo_trace: Vec<f64>,
}

fn fit_shape(res: &FitResult) -> Shape {
    let theta = &res.theta;
    Shape {
        sample_sizes: res.phi.studies.iter().map(|s| s.mean_f.nrows()).collect(),
        dims: theta.a.iter().map(|a| a.nrows()).collect(),
        types: res.phi.studies[0]
            .xi
            .iter()
            .map(|x| if x.is_none() { ModalityType::Continuous } else { ModalityType::Count })
            .collect(),
        covariate_dim: theta.beta.first().map_or(0, |b| b.ncols()),
        q: theta.q,
        qs: theta.qs.clone(),
    }
}

/// Write a fit under `dir`: parameters, the full variational state, the
/// ELBO trace and the configuration (including the seed).
///
/// Non-Gaussian modalities are recorded as `count` in the shape block;
/// only Gaussian versus non-Gaussian matters for reloading.
pub fn save_fit(res: &FitResult, dir: &Path) -> Result<PathBuf> {
    create_dir(dir)?;
    let shape = fit_shape(res);
    write_theta(dir, &res.theta)?;
    write_phi(dir, &res.phi, &shape)?;
    let path = dir.join(FIT_MANIFEST);
    write_json(
        &path,
        &FitManifest {
            version: FORMAT_VERSION,
            shape,
            config: res.config.clone(),
            converged: res.converged,
            iterations: res.iterations,
            elbo_trace: res.elbo_trace.clone(),
        },
    )?;
    Ok(path)
}

pub fn load_fit(dir: &Path) -> Result<FitResult> {
    let man: FitManifest = read_json(&dir.join(FIT_MANIFEST))?;
    let theta = read_theta(dir, &man.shape)?;
    let phi = read_phi(dir, &man.shape)?;
    Ok(FitResult {
        theta,
        phi,
        elbo_trace: man.elbo_trace,
        converged: man.converged,
        iterations: man.iterations,
        config: man.config,
    })
}

// ----------------------------------------------------------- ground truth

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TruthManifest {
    version: u32,
    shape: Shape,
}

pub fn save_truth(truth: &GroundTruth, dir: &Path) -> Result<PathBuf> {
    create_dir(dir)?;
    let t = &truth.theta0;
    let shape = Shape {
        sample_sizes: truth.f0.iter().map(|f| f.nrows()).collect(),
        dims: t.a.iter().map(|a| a.nrows()).collect(),
        types: vec![ModalityType::Continuous; t.a.len()],
        covariate_dim: t.beta.first().map_or(0, |b| b.ncols()),
        q: t.q,
        qs: t.qs.clone(),
    };
    write_theta(dir, t)?;
    for s in 0..truth.f0.len() {
        put(dir, &format!("F_s{}.csv", s + 1), "f", &truth.f0[s])?;
        put(dir, &format!("H_s{}.csv", s + 1), "h", &truth.h0[s])?;
        put(dir, &format!("V_s{}.csv", s + 1), "modality", &truth.v0[s])?;
    }
    let path = dir.join(TRUTH_MANIFEST);
    write_json(&path, &TruthManifest { version: FORMAT_VERSION, shape })?;
    Ok(path)
}

pub fn load_truth(dir: &Path) -> Result<GroundTruth> {
    let man: TruthManifest = read_json(&dir.join(TRUTH_MANIFEST))?;
    let sh = &man.shape;
    let theta0 = read_theta(dir, sh)?;
    let nm = sh.dims.len();
    let mut f0 = Vec::new();
    let mut h0 = Vec::new();
    let mut v0 = Vec::new();
    for (s, &n) in sh.sample_sizes.iter().enumerate() {
        f0.push(get(dir, &format!("F_s{}.csv", s + 1), n, sh.q)?);
        h0.push(get(dir, &format!("H_s{}.csv", s + 1), n, sh.qs[s])?);
        v0.push(get(dir, &format!("V_s{}.csv", s + 1), n, nm)?);
    }
    Ok(GroundTruth { theta0, f0, h0, v0 })
}
