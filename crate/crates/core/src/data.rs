//! Poisson benchmark: analytic Gaussian sources, a finite-difference oracle,
//! irregular point sampling and the on-disk dataset format.
//!
//! # Dataset layout
//!
//! ```text
//! <dir>/manifest.toml
//! <dir>/train/000000.rec ...
//! <dir>/val/000000.rec ...
//! <dir>/test/000000.rec ...
//! ```
//!
//! # Record layout (all integers and floats little-endian)
//!
//! | offset | size  | field                                  |
//! |--------|-------|----------------------------------------|
//! | 0      | 8     | magic `b"AMGREC1\0"` (format version 1) |
//! | 8      | 8     | sample id, `u64`                        |
//! | 16     | 8     | node count `n`, `u64`                   |
//! | 24     | 4     | `d_pos`, `u32`                          |
//! | 28     | 4     | `d_a`, `u32`                            |
//! | 32     | 4     | `d_u`, `u32`                            |
//! | 36     | 8·n·d_pos | positions, row-major `f64`          |
//! | ...    | 8·n·d_a   | input values                        |
//! | ...    | 8·n·d_u   | target values                       |
//!
//! Nothing may follow the targets.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Magic prefix of every record file.
pub const RECORD_MAGIC: &[u8; 8] = b"AMGREC1\0";
/// Version written into manifests.
pub const FORMAT_VERSION: u32 = 1;
const HEADER_LEN: usize = 36;

pub const SIGMA_MIN: f64 = 0.025;
pub const SIGMA_MAX: f64 = 0.1;
/// Smallest grid the oracle accepts.
pub const MIN_GRID_N: usize = 17;
/// Relative residual the oracle must reach.
pub const SOLVER_TOL: f64 = 1e-8;
pub const MIN_POINTS: usize = 16;

/// `f(x, y) = Σ A_i exp(-|p - μ_i|² / (2 σ_i²))`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoissonRhs {
    pub centers: Vec<[f64; 2]>,
    pub sigmas: Vec<f64>,
    pub amplitudes: Vec<f64>,
}

impl PoissonRhs {
    pub fn eval(&self, x: f64, y: f64) -> f64 {
        self.centers
            .iter()
            .zip(&self.sigmas)
            .zip(&self.amplitudes)
            .map(|((c, s), a)| {
                let r2 = (x - c[0]).powi(2) + (y - c[1]).powi(2);
                a * (-r2 / (2.0 * s * s)).exp()
            })
            .sum()
    }
}

/// Draws `k` Gaussians: centres in `U(0,1)²`, widths in
/// `U(SIGMA_MIN, SIGMA_MAX)`, amplitudes in `U(-1, 1)`.
pub fn gen_poisson_rhs(seed: u64, k: usize) -> Result<PoissonRhs> {
    if k == 0 {
        return Err(Error::arg("at least one Gaussian is required"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rhs = PoissonRhs { centers: Vec::with_capacity(k), sigmas: Vec::with_capacity(k), amplitudes: Vec::with_capacity(k) };
    for _ in 0..k {
        rhs.centers.push([rng.gen::<f64>(), rng.gen::<f64>()]);
        rhs.sigmas.push(rng.gen_range(SIGMA_MIN..=SIGMA_MAX));
        rhs.amplitudes.push(rng.gen_range(-1.0..=1.0));
    }
    Ok(rhs)
}

/// Nodal solution on the `(grid_n + 1)²` grid of `[0,1]²`, boundary
/// included (and zero).
#[derive(Clone, Debug, PartialEq)]
pub struct GridSolution {
    pub grid_n: usize,
    pub values: Vec<f64>,
    pub iterations: usize,
    pub relative_residual: f64,
}

impl GridSolution {
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.values[i * (self.grid_n + 1) + j]
    }

    /// Bilinear interpolation at `(x, y)`, clamped to the unit square.
    pub fn bilinear(&self, x: f64, y: f64) -> f64 {
        let n = self.grid_n;
        let locate = |t: f64| {
            let s = t.clamp(0.0, 1.0) * n as f64;
            let i = (s.floor() as usize).min(n - 1);
            (i, s - i as f64)
        };
        let (i, tx) = locate(x);
        let (j, ty) = locate(y);
        let v00 = self.at(i, j);
        let v10 = self.at(i + 1, j);
        let v01 = self.at(i, j + 1);
        let v11 = self.at(i + 1, j + 1);
        (1.0 - tx) * ((1.0 - ty) * v00 + ty * v01) + tx * ((1.0 - ty) * v10 + ty * v11)
    }
}

/// Applies the scaled 5-point operator `(4u - Σ neighbours) / h²` on the
/// `m × m` interior.
fn apply_laplacian(m: usize, inv_h2: f64, u: &[f64], out: &mut [f64]) {
    for i in 0..m {
        for j in 0..m {
            let k = i * m + j;
            let mut s = 4.0 * u[k];
            if i > 0 {
                s -= u[k - m];
            }
            if i + 1 < m {
                s -= u[k + m];
            }
            if j > 0 {
                s -= u[k - 1];
            }
            if j + 1 < m {
                s -= u[k + 1];
            }
            out[k] = s * inv_h2;
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Solves `-Δu = f` with `u = 0` on the boundary of `[0,1]²` using the
/// 5-point stencil on a grid of spacing `1 / grid_n` and conjugate
/// gradients, to a true relative residual below [`SOLVER_TOL`].
pub fn solve_poisson_fd(f: impl Fn(f64, f64) -> f64, grid_n: usize) -> Result<GridSolution> {
    if grid_n < MIN_GRID_N {
        return Err(Error::arg(format!("grid_n = {grid_n} below {MIN_GRID_N}")));
    }
    let m = grid_n - 1;
    let h = 1.0 / grid_n as f64;
    let inv_h2 = 1.0 / (h * h);
    let mut b = vec![0.0; m * m];
    for i in 0..m {
        for j in 0..m {
            b[i * m + j] = f((i + 1) as f64 * h, (j + 1) as f64 * h);
        }
    }
    if b.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("source term is not finite on the grid".into()));
    }
    let b_norm = dot(&b, &b).sqrt();
    let mut u = vec![0.0; m * m];
    let mut iterations = 0;
    let mut rel = 0.0;
    if b_norm > 0.0 {
        let cap = 20 * m * m.max(8).ilog2() as usize + 1000;
        let mut r = b.clone();
        let mut au = vec![0.0; m * m];
        let mut ap = vec![0.0; m * m];
        // Restart from the true residual whenever the recursive one claims
        // convergence, so drift cannot fake a pass.
        'outer: loop {
            apply_laplacian(m, inv_h2, &u, &mut au);
            for ((ri, bi), ai) in r.iter_mut().zip(&b).zip(&au) {
                *ri = bi - ai;
            }
            let mut rr = dot(&r, &r);
            rel = rr.sqrt() / b_norm;
            if rel < SOLVER_TOL {
                break;
            }
            let mut p = r.clone();
            loop {
                if iterations >= cap {
                    break 'outer;
                }
                iterations += 1;
                apply_laplacian(m, inv_h2, &p, &mut ap);
                let alpha = rr / dot(&p, &ap);
                for k in 0..u.len() {
                    u[k] += alpha * p[k];
                    r[k] -= alpha * ap[k];
                }
                let rr_new = dot(&r, &r);
                if rr_new.sqrt() / b_norm < 0.5 * SOLVER_TOL {
                    continue 'outer;
                }
                let beta = rr_new / rr;
                rr = rr_new;
                for (pk, rk) in p.iter_mut().zip(&r) {
                    *pk = rk + beta * *pk;
                }
            }
        }
        if !(rel < SOLVER_TOL) {
            return Err(Error::Convergence(format!(
                "conjugate gradients stopped after {iterations} iterations at relative residual {rel:.3e} (grid_n = {grid_n})"
            )));
        }
    }
    let mut values = vec![0.0; (grid_n + 1) * (grid_n + 1)];
    for i in 0..m {
        for j in 0..m {
            values[(i + 1) * (grid_n + 1) + j + 1] = u[i * m + j];
        }
    }
    Ok(GridSolution { grid_n, values, iterations, relative_residual: rel })
}

/// One (input, solution) pair on an irregular point set.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleRecord {
    pub id: u64,
    pub n: usize,
    pub d_pos: usize,
    pub d_a: usize,
    pub d_u: usize,
    pub positions: Vec<f64>,
    pub inputs: Vec<f64>,
    pub targets: Vec<f64>,
}

impl SampleRecord {
    pub fn new(id: u64, dims: (usize, usize, usize), positions: Vec<f64>, inputs: Vec<f64>, targets: Vec<f64>) -> Result<Self> {
        let (d_pos, d_a, d_u) = dims;
        if d_pos == 0 || d_a == 0 || d_u == 0 {
            return Err(Error::dim("record widths must be positive"));
        }
        let n = positions.len() / d_pos;
        if positions.len() != n * d_pos || inputs.len() != n * d_a || targets.len() != n * d_u {
            return Err(Error::dim(format!(
                "record {id}: {} positions, {} inputs, {} targets inconsistent with widths ({d_pos}, {d_a}, {d_u})",
                positions.len(),
                inputs.len(),
                targets.len()
            )));
        }
        if positions.iter().chain(&inputs).chain(&targets).any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("record {id} holds non-finite values")));
        }
        Ok(Self { id, n, d_pos, d_a, d_u, positions, inputs, targets })
    }

    pub fn positions_tensor<T: Scalar>(&self) -> Tensor<T> {
        to_tensor(&self.positions, self.n, self.d_pos)
    }

    pub fn inputs_tensor<T: Scalar>(&self) -> Tensor<T> {
        to_tensor(&self.inputs, self.n, self.d_a)
    }

    pub fn targets_tensor<T: Scalar>(&self) -> Tensor<T> {
        to_tensor(&self.targets, self.n, self.d_u)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let floats = self.positions.len() + self.inputs.len() + self.targets.len();
        let mut out = Vec::with_capacity(HEADER_LEN + 8 * floats);
        out.extend_from_slice(RECORD_MAGIC);
        out.extend_from_slice(&self.id.to_le_bytes());
        out.extend_from_slice(&(self.n as u64).to_le_bytes());
        for d in [self.d_pos, self.d_a, self.d_u] {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in self.positions.iter().chain(&self.inputs).chain(&self.targets) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    /// Parses [`Self::to_bytes`] output; `file` names the source in errors.
    pub fn from_bytes(bytes: &[u8], file: &str) -> Result<Self> {
        let bad = |reason: String| Error::format(file, reason);
        if bytes.len() < HEADER_LEN {
            return Err(bad(format!("truncated header ({} bytes)", bytes.len())));
        }
        if &bytes[..8] != RECORD_MAGIC {
            return Err(bad("unrecognised magic or format version".into()));
        }
        let u64_at = |o: usize| u64::from_le_bytes(bytes[o..o + 8].try_into().expect("8 bytes"));
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes")) as usize;
        let id = u64_at(8);
        let n = usize::try_from(u64_at(16)).map_err(|_| bad("node count overflows".into()))?;
        let (d_pos, d_a, d_u) = (u32_at(24), u32_at(28), u32_at(32));
        let floats =
            n.checked_mul(d_pos + d_a + d_u).filter(|f| f.checked_mul(8).is_some()).ok_or_else(|| bad("shape header overflows".into()))?;
        let want = HEADER_LEN + 8 * floats;
        if bytes.len() != want {
            let what = if bytes.len() < want { "truncated" } else { "trailing bytes in" };
            return Err(bad(format!("{what} record {id}: {} bytes, header implies {want}", bytes.len())));
        }
        let mut vals = bytes[HEADER_LEN..].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
        let mut take = |k: usize| vals.by_ref().take(k).collect::<Vec<_>>();
        let positions = take(n * d_pos);
        let inputs = take(n * d_a);
        let targets = take(n * d_u);
        SampleRecord::new(id, (d_pos, d_a, d_u), positions, inputs, targets).map_err(|e| bad(format!("record {id}: {e}")))
    }
}

fn to_tensor<T: Scalar>(v: &[f64], rows: usize, cols: usize) -> Tensor<T> {
    Tensor::from_parts_unchecked(vec![rows, cols], v.iter().map(|&x| T::from_f64_lossy(x)).collect())
}

/// Draws `n` uniform interior points, evaluates `f` exactly and the grid
/// solution bilinearly.
pub fn sample_irregular_mesh(grid: &GridSolution, rhs: &PoissonRhs, n: usize, seed: u64, id: u64) -> Result<SampleRecord> {
    if n < MIN_POINTS {
        return Err(Error::arg(format!("n = {n} below {MIN_POINTS}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut positions = Vec::with_capacity(2 * n);
    let mut inputs = Vec::with_capacity(n);
    let mut targets = Vec::with_capacity(n);
    for _ in 0..n {
        // Open interval: reject the (measure-zero) boundary draws.
        let mut draw = || loop {
            let t: f64 = rng.gen();
            if t > 0.0 {
                break t;
            }
        };
        let (x, y) = (draw(), draw());
        positions.extend([x, y]);
        inputs.push(rhs.eval(x, y));
        targets.push(grid.bilinear(x, y));
    }
    SampleRecord::new(id, (2, 1, 1), positions, inputs, targets)
}

/// Dataset split.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    fn tag(self) -> u64 {
        match self {
            Split::Train => 1,
            Split::Val => 2,
            Split::Test => 3,
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Split::ALL.into_iter().find(|sp| sp.name() == s).ok_or_else(|| Error::arg(format!("unknown split {s:?} (train, val, test)")))
    }
}

/// Generator parameters; also the `[data]` table of run configs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenConfig {
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub n_points: usize,
    pub grid_n: usize,
    pub gaussians: usize,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self { train: 1000, val: 100, test: 100, n_points: 512, grid_n: 128, gaussians: 4, seed: 0 }
    }
}

impl GenConfig {
    pub fn count(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train,
            Split::Val => self.val,
            Split::Test => self.test,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid_n < MIN_GRID_N || self.n_points < MIN_POINTS || self.gaussians == 0 {
            return Err(Error::arg(format!(
                "need grid_n >= {MIN_GRID_N}, n_points >= {MIN_POINTS}, gaussians >= 1 (got {}, {}, {})",
                self.grid_n, self.n_points, self.gaussians
            )));
        }
        Ok(())
    }

    /// Seed of sample `index` in `split`; sample ids are unique across splits.
    pub fn sample_seed(&self, split: Split, index: usize) -> u64 {
        mix_seed(mix_seed(self.seed, split.tag()), index as u64)
    }

    pub fn sample_id(&self, split: Split, index: usize) -> u64 {
        (split.tag() << 48) | index as u64
    }
}

/// SplitMix64 finaliser over `a` combined with `b`.
pub fn mix_seed(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Generates one sample of the benchmark.
pub fn generate_sample(cfg: &GenConfig, split: Split, index: usize) -> Result<SampleRecord> {
    let seed = cfg.sample_seed(split, index);
    let rhs = gen_poisson_rhs(seed, cfg.gaussians)?;
    let grid = solve_poisson_fd(|x, y| rhs.eval(x, y), cfg.grid_n)?;
    sample_irregular_mesh(&grid, &rhs, cfg.n_points, mix_seed(seed, 0x5A), cfg.sample_id(split, index))
}

/// Contents of `manifest.toml`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub n_points: usize,
    pub d_pos: usize,
    pub d_a: usize,
    pub d_u: usize,
    pub counts: SplitCounts,
    pub generator: GeneratorInfo,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl SplitCounts {
    pub fn get(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train,
            Split::Val => self.val,
            Split::Test => self.test,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorInfo {
    pub grid_n: usize,
    pub gaussians: usize,
    pub seed: u64,
    pub sigma_range: [f64; 2],
    pub amplitude_range: [f64; 2],
    pub interpolation: String,
}

impl DatasetManifest {
    pub fn for_config(cfg: &GenConfig) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            n_points: cfg.n_points,
            d_pos: 2,
            d_a: 1,
            d_u: 1,
            counts: SplitCounts { train: cfg.train, val: cfg.val, test: cfg.test },
            generator: GeneratorInfo {
                grid_n: cfg.grid_n,
                gaussians: cfg.gaussians,
                seed: cfg.seed,
                sigma_range: [SIGMA_MIN, SIGMA_MAX],
                amplitude_range: [-1.0, 1.0],
                interpolation: "bilinear".into(),
            },
        }
    }

    /// Generator config that replays this dataset.
    pub fn gen_config(&self) -> GenConfig {
        GenConfig {
            train: self.counts.train,
            val: self.counts.val,
            test: self.counts.test,
            n_points: self.n_points,
            grid_n: self.generator.grid_n,
            gaussians: self.generator.gaussians,
            seed: self.generator.seed,
        }
    }
}

/// Manifest plus records of every split.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub train: Vec<SampleRecord>,
    pub val: Vec<SampleRecord>,
    pub test: Vec<SampleRecord>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> &[SampleRecord] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    fn split_mut(&mut self, split: Split) -> &mut Vec<SampleRecord> {
        match split {
            Split::Train => &mut self.train,
            Split::Val => &mut self.val,
            Split::Test => &mut self.test,
        }
    }
}

/// Generates every split of `cfg` on all available cores, calling
/// `progress(split, index)` as each sample completes (in completion order).
/// The result does not depend on the thread count.
pub fn generate_dataset(cfg: &GenConfig, progress: impl FnMut(Split, usize)) -> Result<Dataset> {
    let threads = std::thread::available_parallelism().map_or(1, |n| n.get());
    generate_dataset_with(cfg, threads, progress)
}

/// [`generate_dataset`] with an explicit worker count.
pub fn generate_dataset_with(cfg: &GenConfig, threads: usize, mut progress: impl FnMut(Split, usize)) -> Result<Dataset> {
    use std::sync::atomic::{AtomicUsize, Ordering};
    use std::sync::mpsc;

    cfg.validate()?;
    let jobs: Vec<(Split, usize)> = Split::ALL.into_iter().flat_map(|sp| (0..cfg.count(sp)).map(move |i| (sp, i))).collect();
    let mut slots: Vec<Option<SampleRecord>> = vec![None; jobs.len()];
    let next = AtomicUsize::new(0);
    let (tx, rx) = mpsc::channel::<(usize, Result<SampleRecord>)>();
    std::thread::scope(|scope| -> Result<()> {
        for _ in 0..threads.clamp(1, jobs.len().max(1)) {
            let (tx, next, jobs) = (tx.clone(), &next, &jobs);
            scope.spawn(move || loop {
                let k = next.fetch_add(1, Ordering::Relaxed);
                let Some(&(split, i)) = jobs.get(k) else { break };
                let failed = {
                    let r = generate_sample(cfg, split, i);
                    let failed = r.is_err();
                    if tx.send((k, r)).is_err() {
                        break;
                    }
                    failed
                };
                if failed {
                    // Stop handing out work; the receiver reports the error.
                    next.store(jobs.len(), Ordering::Relaxed);
                    break;
                }
            });
        }
        drop(tx);
        for (k, r) in rx {
            match r {
                Ok(rec) => {
                    slots[k] = Some(rec);
                    progress(jobs[k].0, jobs[k].1);
                }
                Err(e) => {
                    next.store(jobs.len(), Ordering::Relaxed);
                    return Err(e);
                }
            }
        }
        Ok(())
    })?;
    let mut ds = Dataset { manifest: DatasetManifest::for_config(cfg), train: Vec::new(), val: Vec::new(), test: Vec::new() };
    for ((split, _), rec) in jobs.into_iter().zip(slots) {
        ds.split_mut(split).push(rec.expect("every job completed"));
    }
    Ok(ds)
}

pub const MANIFEST_FILE: &str = "manifest.toml";

fn record_path(dir: &Path, split: Split, index: usize) -> PathBuf {
    dir.join(split.name()).join(format!("{index:06}.rec"))
}

/// Writes `ds` under `dir`, creating the split directories.
pub fn write_dataset(dir: &Path, ds: &Dataset) -> Result<()> {
    for split in Split::ALL {
        if ds.split(split).len() != ds.manifest.counts.get(split) {
            return Err(Error::arg(format!(
                "{} split holds {} records but the manifest says {}",
                split.name(),
                ds.split(split).len(),
                ds.manifest.counts.get(split)
            )));
        }
        let sub = dir.join(split.name());
        fs::create_dir_all(&sub).map_err(|e| Error::io(&sub, e))?;
        for (i, rec) in ds.split(split).iter().enumerate() {
            let path = record_path(dir, split, i);
            fs::write(&path, rec.to_bytes()).map_err(|e| Error::io(&path, e))?;
        }
    }
    let text = toml::to_string(&ds.manifest).map_err(|e| Error::arg(format!("manifest serialisation: {e}")))?;
    let path = dir.join(MANIFEST_FILE);
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

pub fn read_manifest(dir: &Path) -> Result<DatasetManifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let m: DatasetManifest = toml::from_str(&text).map_err(|e| Error::format(path.display(), e.to_string()))?;
    if m.format_version != FORMAT_VERSION {
        return Err(Error::format(path.display(), format!("format version {} (expected {FORMAT_VERSION})", m.format_version)));
    }
    Ok(m)
}

/// Reads and validates one split against `manifest`.
pub fn read_split(dir: &Path, manifest: &DatasetManifest, split: Split) -> Result<Vec<SampleRecord>> {
    let sub = dir.join(split.name());
    let expected = manifest.counts.get(split);
    let mut files: Vec<PathBuf> = match fs::read_dir(&sub) {
        Ok(rd) => rd
            .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(&sub, err)))
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .filter(|p| p.extension().is_some_and(|x| x == "rec"))
            .collect(),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound && expected == 0 => Vec::new(),
        Err(e) => return Err(Error::io(&sub, e)),
    };
    files.sort();
    if files.len() != expected {
        return Err(Error::format(
            dir.join(MANIFEST_FILE).display(),
            format!("{} lists {expected} {} records but {} holds {}", MANIFEST_FILE, split.name(), sub.display(), files.len()),
        ));
    }
    let dims = (manifest.d_pos, manifest.d_a, manifest.d_u);
    files
        .iter()
        .enumerate()
        .map(|(i, path)| {
            let name = path.display().to_string();
            if *path != record_path(dir, split, i) {
                return Err(Error::format(&name, format!("expected record file {:06}.rec", i)));
            }
            let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
            let rec = SampleRecord::from_bytes(&bytes, &name)?;
            if rec.n != manifest.n_points || (rec.d_pos, rec.d_a, rec.d_u) != dims {
                return Err(Error::format(
                    &name,
                    format!(
                        "record {} has shape n={} widths=({}, {}, {}), manifest says n={} widths={:?}",
                        rec.id, rec.n, rec.d_pos, rec.d_a, rec.d_u, manifest.n_points, dims
                    ),
                ));
            }
            Ok(rec)
        })
        .collect()
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let manifest = read_manifest(dir)?;
    let train = read_split(dir, &manifest, Split::Train)?;
    let val = read_split(dir, &manifest, Split::Val)?;
    let test = read_split(dir, &manifest, Split::Test)?;
    Ok(Dataset { manifest, train, val, test })
}
