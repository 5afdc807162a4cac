//! Synthetic datasets, CSV ingestion, labeled/unlabeled splits and batching.
//!
//! Every row keeps its true label (when known) but only rows in the labeled
//! mask expose it through [`Dataset::visible_label`]. Reading a hidden label
//! through [`Dataset::true_label`] sets a taint flag, so tests can assert that
//! training never looked at them.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::Path;
use std::sync::atomic::{AtomicBool, Ordering};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug)]
pub struct Dataset {
    pub name: String,
    pub x: Tensor,
    y: Vec<Option<usize>>,
    labeled: Vec<bool>,
    pub classes: usize,
    pub seed: u64,
    hidden_read: AtomicBool,
}

impl Clone for Dataset {
    fn clone(&self) -> Self {
        Self {
            name: self.name.clone(),
            x: self.x.clone(),
            y: self.y.clone(),
            labeled: self.labeled.clone(),
            classes: self.classes,
            seed: self.seed,
            hidden_read: AtomicBool::new(self.hidden_read.load(Ordering::Relaxed)),
        }
    }
}

impl Dataset {
    /// Fully labeled dataset.
    pub fn new(name: impl Into<String>, x: Tensor, y: Vec<usize>, classes: usize, seed: u64) -> Result<Self> {
        if y.len() != x.rows() {
            return Err(Error::Schema(format!("{} labels for {} rows", y.len(), x.rows())));
        }
        if let Some(&bad) = y.iter().find(|&&c| c >= classes) {
            return Err(Error::Schema(format!("label {bad} outside [0, {classes})")));
        }
        let n = y.len();
        Ok(Self {
            name: name.into(),
            x,
            y: y.into_iter().map(Some).collect(),
            labeled: vec![true; n],
            classes,
            seed,
            hidden_read: AtomicBool::new(false),
        })
    }

    pub fn len(&self) -> usize {
        self.x.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.x.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.x.cols()
    }

    pub fn labeled_mask(&self) -> &[bool] {
        &self.labeled
    }

    pub fn is_labeled(&self, i: usize) -> bool {
        self.labeled[i]
    }

    /// Label of row `i` if it is in the labeled set.
    pub fn visible_label(&self, i: usize) -> Option<usize> {
        if self.labeled[i] {
            self.y[i]
        } else {
            None
        }
    }

    /// Ground-truth label, if known. Reading a hidden label taints the dataset.
    pub fn true_label(&self, i: usize) -> Option<usize> {
        if !self.labeled[i] {
            self.hidden_read.store(true, Ordering::Relaxed);
        }
        self.y[i]
    }

    /// All ground-truth labels, for evaluation. Fails if any row has none.
    pub fn true_labels(&self) -> Result<Vec<usize>> {
        (0..self.len())
            .map(|i| {
                self.true_label(i)
                    .ok_or_else(|| Error::Schema(format!("row {i} has no ground-truth label")))
            })
            .collect()
    }

    pub fn hidden_labels_touched(&self) -> bool {
        self.hidden_read.load(Ordering::Relaxed)
    }

    pub fn labeled_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.labeled[i]).collect()
    }

    pub fn unlabeled_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| !self.labeled[i]).collect()
    }

    /// Hide labels so that exactly `spec.n_labeled` rows stay labeled.
    /// Stratified splits give each class floor or ceil of N_l / C rows.
    pub fn split_labeled(&self, spec: &SplitSpec) -> Result<Dataset> {
        let n = self.len();
        let known: Vec<usize> = (0..n).filter(|&i| self.y[i].is_some()).collect();
        if spec.n_labeled > known.len() {
            return Err(Error::config(format!(
                "n_labeled {} exceeds {} rows with known labels",
                spec.n_labeled,
                known.len()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let mut chosen = Vec::with_capacity(spec.n_labeled);
        if spec.stratified {
            let c = self.classes;
            if spec.n_labeled < c {
                return Err(Error::config(format!(
                    "stratified split needs n_labeled >= classes ({} < {c})",
                    spec.n_labeled
                )));
            }
            let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); c];
            for &i in &known {
                by_class[self.y[i].unwrap()].push(i);
            }
            let base = spec.n_labeled / c;
            let extra = spec.n_labeled % c;
            // which classes get the extra row is itself random
            let mut order: Vec<usize> = (0..c).collect();
            order.shuffle(&mut rng);
            let mut quota = vec![base; c];
            for &cl in order.iter().take(extra) {
                quota[cl] += 1;
            }
            for (cl, rows) in by_class.iter_mut().enumerate() {
                if rows.len() < quota[cl] {
                    return Err(Error::config(format!(
                        "class {cl} has {} rows, needs {} labeled",
                        rows.len(),
                        quota[cl]
                    )));
                }
                rows.shuffle(&mut rng);
                chosen.extend_from_slice(&rows[..quota[cl]]);
            }
        } else {
            let mut rows = known.clone();
            rows.shuffle(&mut rng);
            chosen.extend_from_slice(&rows[..spec.n_labeled]);
            let mut seen = vec![false; self.classes];
            for &i in &chosen {
                seen[self.y[i].unwrap()] = true;
            }
            if seen.iter().any(|s| !s) {
                return Err(Error::config("random split left a class without labeled rows"));
            }
        }
        let mut out = self.clone();
        out.labeled = vec![false; n];
        for i in chosen {
            out.labeled[i] = true;
        }
        out.hidden_read = AtomicBool::new(false);
        Ok(out)
    }

    /// CSV with header `x0,...,x{d-1},label`; hidden rows are written as -1.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for j in 0..self.dim() {
            write!(out, "x{j},").unwrap();
        }
        out.push_str("label\n");
        for i in 0..self.len() {
            for v in self.x.row(i) {
                write!(out, "{v},").unwrap();
            }
            match self.visible_label(i) {
                Some(c) => writeln!(out, "{c}").unwrap(),
                None => out.push_str("-1\n"),
            }
        }
        out
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }

    pub fn load_csv(path: impl AsRef<Path>) -> Result<Dataset> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        let name = path.file_stem().and_then(|s| s.to_str()).unwrap_or("csv");
        Self::parse_csv(&text, name)
    }

    pub fn parse_csv(text: &str, name: &str) -> Result<Dataset> {
        let mut lines = text.lines().enumerate();
        let (_, header) = lines.next().ok_or_else(|| Error::Schema("empty CSV".into()))?;
        let cols: Vec<&str> = header.split(',').map(str::trim).collect();
        let d = cols.len().saturating_sub(1);
        if d == 0 || cols[d] != "label" {
            return Err(Error::Schema(format!("header must be x0,...,label, got {header:?}")));
        }
        for (j, c) in cols[..d].iter().enumerate() {
            if *c != format!("x{j}") {
                return Err(Error::Schema(format!("header column {j} is {c:?}, expected x{j}")));
            }
        }
        let mut data = Vec::new();
        let mut y = Vec::new();
        let mut labeled = Vec::new();
        for (lineno, line) in lines {
            let line_no = lineno + 1;
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            if fields.len() != d + 1 {
                return Err(Error::Schema(format!(
                    "line {line_no}: {} fields, header has {}",
                    fields.len(),
                    d + 1
                )));
            }
            for f in &fields[..d] {
                let v: f64 = f.parse().map_err(|_| Error::Parse {
                    line: line_no,
                    msg: format!("bad number {f:?}"),
                })?;
                if !v.is_finite() {
                    return Err(Error::Parse {
                        line: line_no,
                        msg: format!("non-finite value {f:?}"),
                    });
                }
                data.push(v);
            }
            let lab: i64 = fields[d].parse().map_err(|_| Error::Parse {
                line: line_no,
                msg: format!("bad label {:?}", fields[d]),
            })?;
            match lab {
                -1 => {
                    y.push(None);
                    labeled.push(false);
                }
                l if l >= 0 => {
                    y.push(Some(l as usize));
                    labeled.push(true);
                }
                l => {
                    return Err(Error::Parse {
                        line: line_no,
                        msg: format!("label {l} must be >= 0 or -1"),
                    })
                }
            }
        }
        if !labeled.iter().any(|&b| b) {
            return Err(Error::Schema("no labeled rows".into()));
        }
        let classes = y.iter().flatten().max().map_or(0, |m| m + 1);
        let n = y.len();
        Ok(Dataset {
            name: name.to_string(),
            x: Tensor::new(n, d, data)?,
            y,
            labeled,
            classes,
            seed: 0,
            hidden_read: AtomicBool::new(false),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SplitSpec {
    pub n_labeled: usize,
    pub stratified: bool,
    pub seed: u64,
}

fn check_gen(n: usize, classes: usize, noise_std: f64) -> Result<()> {
    if classes < 2 {
        return Err(Error::config("need at least 2 classes"));
    }
    if n < 2 * classes {
        return Err(Error::config(format!("n = {n} must be >= 2 * classes = {}", 2 * classes)));
    }
    if !(noise_std >= 0.0 && noise_std.is_finite()) {
        return Err(Error::config(format!("noise_std {noise_std} must be >= 0")));
    }
    Ok(())
}

fn per_class(n: usize, classes: usize) -> Vec<usize> {
    (0..classes).map(|c| n / classes + usize::from(c < n % classes)).collect()
}

/// Shuffle rows and attach labels.
fn finish(name: &str, mut rows: Vec<(Vec<f64>, usize)>, classes: usize, rng: &mut ChaCha8Rng, seed: u64) -> Result<Dataset> {
    rows.shuffle(rng);
    let d = rows[0].0.len();
    let mut data = Vec::with_capacity(rows.len() * d);
    let mut y = Vec::with_capacity(rows.len());
    for (p, c) in rows {
        data.extend(p);
        y.push(c);
    }
    Dataset::new(name, Tensor::new(y.len(), d, data)?, y, classes, seed)
}

fn noise(noise_std: f64) -> Normal<f64> {
    Normal::new(0.0, noise_std).expect("validated noise_std")
}

/// Two interleaved unit half-circles, class 0 on top, class 1 below and shifted.
pub fn gen_two_moons(n: usize, noise_std: f64, seed: u64) -> Result<Dataset> {
    check_gen(n, 2, noise_std)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let eps = noise(noise_std);
    let counts = per_class(n, 2);
    let mut rows = Vec::with_capacity(n);
    for (c, &m) in counts.iter().enumerate() {
        for i in 0..m {
            let t = if m > 1 { PI * i as f64 / (m - 1) as f64 } else { 0.0 };
            let (px, py) = if c == 0 {
                (t.cos(), t.sin())
            } else {
                (1.0 - t.cos(), 0.5 - t.sin())
            };
            rows.push((vec![px + eps.sample(&mut rng), py + eps.sample(&mut rng)], c));
        }
    }
    finish("two_moons", rows, 2, &mut rng, seed)
}

/// Isotropic Gaussian blobs with centers evenly spaced on a circle of radius
/// `centers_spread`.
pub fn gen_blobs(n: usize, classes: usize, centers_spread: f64, noise_std: f64, seed: u64) -> Result<Dataset> {
    check_gen(n, classes, noise_std)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let eps = noise(noise_std);
    let mut rows = Vec::with_capacity(n);
    for (c, &m) in per_class(n, classes).iter().enumerate() {
        let a = 2.0 * PI * c as f64 / classes as f64;
        let (cx, cy) = (centers_spread * a.cos(), centers_spread * a.sin());
        for _ in 0..m {
            rows.push((vec![cx + eps.sample(&mut rng), cy + eps.sample(&mut rng)], c));
        }
    }
    finish("blobs", rows, classes, &mut rng, seed)
}

/// Concentric rings, class `c` at radius `radii[c]` (default `c + 1`).
pub fn gen_rings(n: usize, classes: usize, radii: &[f64], noise_std: f64, seed: u64) -> Result<Dataset> {
    check_gen(n, classes, noise_std)?;
    if !radii.is_empty() && radii.len() != classes {
        return Err(Error::config(format!("{} radii for {classes} classes", radii.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let eps = noise(noise_std);
    let mut rows = Vec::with_capacity(n);
    for (c, &m) in per_class(n, classes).iter().enumerate() {
        let r = radii.get(c).copied().unwrap_or((c + 1) as f64);
        for _ in 0..m {
            let a = rng.random::<f64>() * 2.0 * PI;
            rows.push((vec![r * a.cos() + eps.sample(&mut rng), r * a.sin() + eps.sample(&mut rng)], c));
        }
    }
    finish("rings", rows, classes, &mut rng, seed)
}

/// A mini-batch: `labels.len()` labeled rows first, then unlabeled rows.
/// Unlabeled rows carry no label at all.
#[derive(Clone, Debug)]
pub struct Batch {
    pub x: Tensor,
    pub labels: Vec<usize>,
    pub labeled_idx: Vec<usize>,
    pub unlabeled_idx: Vec<usize>,
}

impl Batch {
    pub fn n_labeled(&self) -> usize {
        self.labels.len()
    }

    pub fn n_unlabeled(&self) -> usize {
        self.x.rows() - self.labels.len()
    }

    pub fn from_indices(ds: &Dataset, labeled_idx: Vec<usize>, unlabeled_idx: Vec<usize>) -> Result<Self> {
        let mut labels = Vec::with_capacity(labeled_idx.len());
        for &i in &labeled_idx {
            labels.push(
                ds.visible_label(i)
                    .ok_or_else(|| Error::contract(format!("row {i} is not labeled")))?,
            );
        }
        if let Some(&i) = unlabeled_idx.iter().find(|&&i| ds.is_labeled(i)) {
            return Err(Error::contract(format!("row {i} is labeled but was drawn as unlabeled")));
        }
        let all: Vec<usize> = labeled_idx.iter().chain(&unlabeled_idx).copied().collect();
        Ok(Self {
            x: ds.x.select_rows(&all),
            labels,
            labeled_idx,
            unlabeled_idx,
        })
    }
}

/// Without-replacement sampling over one index pool, reshuffled every epoch.
#[derive(Clone, Debug)]
struct EpochCycler {
    pool: Vec<usize>,
    order: Vec<usize>,
    cursor: usize,
}

impl EpochCycler {
    fn new(pool: Vec<usize>) -> Self {
        Self {
            order: Vec::new(),
            cursor: 0,
            pool,
        }
    }

    fn take(&mut self, k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let mut out = Vec::with_capacity(k);
        let avail = self.order.len() - self.cursor;
        let first = avail.min(k);
        out.extend_from_slice(&self.order[self.cursor..self.cursor + first]);
        self.cursor += first;
        if out.len() < k {
            // Start a new epoch. Rows already in this batch are skipped for
            // the fill and stay queued in the new epoch.
            let mut next = self.pool.clone();
            next.shuffle(rng);
            let need = k - out.len();
            let mut fill = Vec::with_capacity(need);
            let mut rest = Vec::with_capacity(next.len());
            for i in next {
                if fill.len() < need && !out.contains(&i) {
                    fill.push(i);
                } else {
                    rest.push(i);
                }
            }
            out.extend_from_slice(&fill);
            self.order = rest;
            self.cursor = 0;
        }
        out
    }
}

#[derive(Clone, Debug)]
pub struct BatchSampler {
    labeled: EpochCycler,
    unlabeled: EpochCycler,
    pub batch_labeled: usize,
    pub batch_unlabeled: usize,
}

impl BatchSampler {
    pub fn new(ds: &Dataset, batch_labeled: usize, batch_unlabeled: usize) -> Result<Self> {
        let l = ds.labeled_indices();
        let u = ds.unlabeled_indices();
        if l.is_empty() {
            return Err(Error::config("no labeled rows to sample"));
        }
        if batch_labeled > l.len() {
            return Err(Error::config(format!(
                "batch_labeled {batch_labeled} exceeds labeled pool of {}",
                l.len()
            )));
        }
        if batch_unlabeled > u.len() {
            return Err(Error::config(format!(
                "batch_unlabeled {batch_unlabeled} exceeds unlabeled pool of {}",
                u.len()
            )));
        }
        Ok(Self {
            labeled: EpochCycler::new(l),
            unlabeled: EpochCycler::new(u),
            batch_labeled,
            batch_unlabeled,
        })
    }

    pub fn sample(&mut self, ds: &Dataset, rng: &mut ChaCha8Rng) -> Result<Batch> {
        let l = self.labeled.take(self.batch_labeled, rng);
        let u = self.unlabeled.take(self.batch_unlabeled, rng);
        Batch::from_indices(ds, l, u)
    }
}
