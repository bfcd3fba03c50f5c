//! Soft Dice loss for training; Dice, ASD and HD95 for evaluation.

use std::cell::OnceCell;

use cats_autodiff::ops::{add, affine_scalar, div, mean, mul, permute, reshape, softmax, sum_keep_axis};
use cats_autodiff::{Element, Tensor};
use serde::Serialize;

use crate::error::{CatsError, Result};
use crate::registry::Registry;
use crate::volume::Grid3;

pub const DICE_EPS: f64 = 1e-5;

/// `1 - mean_c (2 sum p_c t_c + eps) / (sum p_c + sum t_c + eps)` with `p = softmax` over
/// classes; sums run over batch and space, background included.
pub fn dice_loss<T: Element>(logits: &Tensor<T>, targets: &[u16]) -> Result<Tensor<T>> {
    let s = logits.shape();
    if s.len() < 3 {
        return Err(CatsError::Data(format!("logits must be [B, K, ...], got {:?}", s)));
    }
    let (b, k) = (s[0], s[1]);
    let spatial: usize = s[2..].iter().product();
    if targets.len() != b * spatial {
        return Err(CatsError::Data(format!(
            "{} target voxels for logits {:?}",
            targets.len(),
            s
        )));
    }
    if let Some(&bad) = targets.iter().find(|&&t| t as usize >= k) {
        return Err(CatsError::Data(format!("target class {} outside [0, {}]", bad, k - 1)));
    }
    let mut onehot = vec![T::ZERO; b * k * spatial];
    let mut counts = vec![0.0; k];
    for n in 0..b {
        for (i, &t) in targets[n * spatial..(n + 1) * spatial].iter().enumerate() {
            onehot[(n * k + t as usize) * spatial + i] = T::ONE;
            counts[t as usize] += 1.0;
        }
    }
    let onehot = Tensor::from_vec(onehot, &[b, k, spatial])?;
    let p = reshape(&softmax(logits, 1)?, &[b, k, spatial])?;
    let per_class = |t: &Tensor<T>| -> Result<Tensor<T>> {
        Ok(sum_keep_axis(&reshape(&permute(t, &[1, 0, 2])?, &[k, b * spatial])?, 0)?)
    };
    let eps = T::from_f64(DICE_EPS);
    let intersection = per_class(&mul(&p, &onehot)?)?;
    let numerator = affine_scalar(&intersection, T::from_f64(2.0), eps);
    let target_sums = Tensor::from_vec(counts.iter().map(|&c| T::from_f64(c + DICE_EPS)).collect(), &[k])?;
    let denominator = add(&per_class(&p)?, &target_sums)?;
    let dice = div(&numerator, &denominator)?;
    Ok(affine_scalar(&mean(&dice), -T::ONE, T::ONE))
}

fn check_extents<A: Copy, B: Copy>(a: &Grid3<A>, b: &Grid3<B>) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(CatsError::Data(format!("extent mismatch: {:?} vs {:?}", a.dims(), b.dims())));
    }
    Ok(())
}

/// `2|P ∩ T| / (|P| + |T|)`; 1 when both are empty, 0 when exactly one is.
pub fn dice_score(pred: &Grid3<u16>, truth: &Grid3<u16>, class: u16) -> Result<f64> {
    check_extents(pred, truth)?;
    Ok(mask_dice(&pred.map(|v| v == class), &truth.map(|v| v == class)))
}

pub fn mask_dice(a: &Grid3<bool>, b: &Grid3<bool>) -> f64 {
    let (mut na, mut nb, mut both) = (0usize, 0usize, 0usize);
    for (&x, &y) in a.data().iter().zip(b.data()) {
        na += x as usize;
        nb += y as usize;
        both += (x && y) as usize;
    }
    if na + nb == 0 {
        1.0
    } else {
        2.0 * both as f64 / (na + nb) as f64
    }
}

/// Flat indices of mask voxels with a 6-neighbour outside the mask (or outside the grid).
pub fn surface_indices(mask: &Grid3<bool>) -> Vec<usize> {
    let [nw, nh, nd] = mask.dims();
    let inside = |w: isize, h: isize, d: isize| {
        w >= 0
            && h >= 0
            && d >= 0
            && (w as usize) < nw
            && (h as usize) < nh
            && (d as usize) < nd
            && mask.get(w as usize, h as usize, d as usize)
    };
    let mut out = Vec::new();
    for (i, &m) in mask.data().iter().enumerate() {
        if !m {
            continue;
        }
        let [w, h, d] = mask.coords(i).map(|c| c as isize);
        let exposed = [(1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)]
            .iter()
            .any(|&(a, b, c)| !inside(w + a, h + b, d + c));
        if exposed {
            out.push(i);
        }
    }
    out
}

/// Surface voxel centres in millimetres.
pub fn extract_surface(mask: &Grid3<bool>, spacing: [f64; 3]) -> Vec<[f64; 3]> {
    surface_indices(mask)
        .into_iter()
        .map(|i| {
            let c = mask.coords(i);
            [c[0] as f64 * spacing[0], c[1] as f64 * spacing[1], c[2] as f64 * spacing[2]]
        })
        .collect()
}

/// Squared distance transform along one line with sample spacing `s`
/// (lower envelope of parabolas; `f` is overwritten).
fn edt_line(f: &mut [f64], s: f64, v: &mut [usize], z: &mut [f64], scratch: &mut [f64]) {
    let n = f.len();
    scratch[..n].copy_from_slice(f);
    let g = &scratch[..n];
    let s2 = s * s;
    let pos = |q: usize| q as f64;
    let mut k: isize = -1;
    for q in 0..n {
        if !g[q].is_finite() {
            continue;
        }
        loop {
            if k < 0 {
                k = 0;
                v[0] = q;
                z[0] = f64::NEG_INFINITY;
                z[1] = f64::INFINITY;
                break;
            }
            let p = v[k as usize];
            let x = ((g[q] + s2 * pos(q) * pos(q)) - (g[p] + s2 * pos(p) * pos(p))) / (2.0 * s2 * (pos(q) - pos(p)));
            if x <= z[k as usize] {
                k -= 1;
                continue;
            }
            k += 1;
            v[k as usize] = q;
            z[k as usize] = x;
            z[k as usize + 1] = f64::INFINITY;
            break;
        }
    }
    if k < 0 {
        return;
    }
    let mut j = 0;
    for (q, out) in f.iter_mut().enumerate() {
        while z[j + 1] < pos(q) {
            j += 1;
        }
        let p = v[j];
        let d = (q as f64 - p as f64) * s;
        *out = d * d + g[p];
    }
}

/// Exact squared Euclidean distance (mm²) from every voxel to the nearest `sites` voxel.
pub fn squared_distance_map(dims: [usize; 3], sites: &[usize], spacing: [f64; 3]) -> Vec<f64> {
    let total: usize = dims.iter().product();
    let mut f = vec![f64::INFINITY; total];
    for &i in sites {
        f[i] = 0.0;
    }
    let longest = *dims.iter().max().unwrap();
    let (mut v, mut z, mut scratch, mut line) =
        (vec![0; longest], vec![0.0; longest + 1], vec![0.0; longest], vec![0.0; longest]);
    let strides = [dims[1] * dims[2], dims[2], 1];
    for axis in 0..3 {
        let n = dims[axis];
        let stride = strides[axis];
        for start in 0..total {
            if (start / stride) % n != 0 {
                continue;
            }
            for q in 0..n {
                line[q] = f[start + q * stride];
            }
            edt_line(&mut line[..n], spacing[axis], &mut v, &mut z, &mut scratch);
            for q in 0..n {
                f[start + q * stride] = line[q];
            }
        }
    }
    f
}

/// Pooled nearest-surface distances in both directions, lazily computed once per pair.
pub struct MaskPair<'a> {
    pub pred: &'a Grid3<bool>,
    pub truth: &'a Grid3<bool>,
    pub spacing: [f64; 3],
    distances: OnceCell<Option<Vec<f64>>>,
}

impl<'a> MaskPair<'a> {
    pub fn new(pred: &'a Grid3<bool>, truth: &'a Grid3<bool>, spacing: [f64; 3]) -> Result<Self> {
        check_extents(pred, truth)?;
        Ok(Self { pred, truth, spacing, distances: OnceCell::new() })
    }

    /// `None` when either mask is empty.
    pub fn surface_distances(&self) -> Option<&[f64]> {
        self.distances
            .get_or_init(|| {
                let sp = surface_indices(self.pred);
                let st = surface_indices(self.truth);
                if sp.is_empty() || st.is_empty() {
                    return None;
                }
                let dims = self.pred.dims();
                let to_truth = squared_distance_map(dims, &st, self.spacing);
                let to_pred = squared_distance_map(dims, &sp, self.spacing);
                let mut d: Vec<f64> = sp.iter().map(|&i| to_truth[i].sqrt()).collect();
                d.extend(st.iter().map(|&i| to_pred[i].sqrt()));
                Some(d)
            })
            .as_deref()
    }

    pub fn dice(&self) -> f64 {
        mask_dice(self.pred, self.truth)
    }

    pub fn asd(&self) -> Option<f64> {
        self.surface_distances().map(|d| d.iter().sum::<f64>() / d.len() as f64)
    }

    pub fn hd95(&self) -> Option<f64> {
        self.surface_distances().map(|d| percentile(d, 0.95))
    }
}

/// Linear interpolation between closest ranks at rank `q (n - 1)`.
pub fn percentile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = q * (v.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = (lo + 1).min(v.len() - 1);
    v[lo] + (rank - lo as f64) * (v[hi] - v[lo])
}

/// Average symmetric surface distance in mm (`None` if either mask is empty).
pub fn asd(pred: &Grid3<bool>, truth: &Grid3<bool>, spacing: [f64; 3]) -> Result<Option<f64>> {
    Ok(MaskPair::new(pred, truth, spacing)?.asd())
}

/// 95th percentile of the pooled symmetric surface distances in mm.
pub fn hd95(pred: &Grid3<bool>, truth: &Grid3<bool>, spacing: [f64; 3]) -> Result<Option<f64>> {
    Ok(MaskPair::new(pred, truth, spacing)?.hd95())
}

pub type MetricFn = fn(&MaskPair<'_>) -> Option<f64>;

/// Evaluation metrics by name: `dice`, `asd`, `hd95`.
pub fn metric_registry() -> Registry<MetricFn> {
    let mut r: Registry<MetricFn> = Registry::new("metric");
    r.register("dice", |p| Some(p.dice())).expect("fresh registry");
    r.register("asd", |p| p.asd()).expect("fresh registry");
    r.register("hd95", |p| p.hd95()).expect("fresh registry");
    r
}

/// One case, one class.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassMetrics {
    pub case: String,
    pub class: u16,
    pub dice: f64,
    /// `None` when either mask is empty.
    pub asd_mm: Option<f64>,
    pub hd95_mm: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
    /// Number of defined values the statistics are taken over.
    pub count: usize,
}

impl Summary {
    /// Population statistics of the defined values; `None` when there are none.
    pub fn of(values: impl IntoIterator<Item = Option<f64>>) -> Option<Self> {
        let v: Vec<f64> = values.into_iter().flatten().collect();
        if v.is_empty() {
            return None;
        }
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / v.len() as f64;
        Some(Self { mean, std: var.sqrt(), count: v.len() })
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct MetricsReport {
    pub classes: Vec<u16>,
    pub records: Vec<ClassMetrics>,
}

impl MetricsReport {
    pub fn new(classes: Vec<u16>) -> Self {
        Self { classes, records: Vec::new() }
    }

    /// Score one case for every reported class.
    pub fn add_case(&mut self, case: &str, pred: &Grid3<u16>, truth: &Grid3<u16>, spacing: [f64; 3]) -> Result<()> {
        check_extents(pred, truth)?;
        for &class in &self.classes {
            let p = pred.map(|v| v == class);
            let t = truth.map(|v| v == class);
            let pair = MaskPair::new(&p, &t, spacing)?;
            self.records.push(ClassMetrics {
                case: case.to_string(),
                class,
                dice: pair.dice(),
                asd_mm: pair.asd(),
                hd95_mm: pair.hd95(),
            });
        }
        Ok(())
    }

    pub fn class_records(&self, class: u16) -> impl Iterator<Item = &ClassMetrics> {
        self.records.iter().filter(move |r| r.class == class)
    }

    /// Across-case statistics of one metric for one class.
    pub fn summary(&self, class: u16, metric: Metric) -> Option<Summary> {
        Summary::of(self.class_records(class).map(|r| metric.of(r)))
    }

    /// Mean over classes of the per-class means.
    pub fn class_average(&self, metric: Metric) -> Option<f64> {
        let means: Vec<f64> = self.classes.iter().filter_map(|&c| self.summary(c, metric)).map(|s| s.mean).collect();
        (!means.is_empty()).then(|| means.iter().sum::<f64>() / means.len() as f64)
    }

    /// Mean foreground Dice over all records.
    pub fn mean_dice(&self) -> f64 {
        Summary::of(self.records.iter().map(|r| Some(r.dice))).map_or(0.0, |s| s.mean)
    }

    /// Tab-separated records, one line per case and class.
    pub fn to_tsv(&self) -> String {
        let fmt = |v: Option<f64>| v.map_or_else(|| "undefined".to_string(), |x| format!("{:.6}", x));
        let mut out = String::from("case\tclass\tdice\tasd_mm\thd95_mm\n");
        for r in &self.records {
            out.push_str(&format!(
                "{}\t{}\t{:.6}\t{}\t{}\n",
                r.case,
                r.class,
                r.dice,
                fmt(r.asd_mm),
                fmt(r.hd95_mm)
            ));
        }
        out
    }

    /// Aligned table: one row per metric, one column per class plus the class average.
    pub fn render_table(&self) -> String {
        let cases = self.records.iter().map(|r| r.case.as_str()).collect::<std::collections::BTreeSet<_>>().len();
        let mut header = vec!["metric".to_string()];
        header.extend(self.classes.iter().map(|c| format!("class {}", c)));
        header.push("Avg".into());
        let mut rows = vec![header];
        for metric in [Metric::Dice, Metric::Asd, Metric::Hd95] {
            let mut row = vec![metric.label().to_string()];
            for &c in &self.classes {
                row.push(self.summary(c, metric).map_or("n/a".into(), |s| format!("{:.4} ± {:.4}", s.mean, s.std)));
            }
            row.push(self.class_average(metric).map_or("n/a".into(), |v| format!("{:.4}", v)));
            rows.push(row);
        }
        let cols = rows[0].len();
        let widths: Vec<usize> =
            (0..cols).map(|j| rows.iter().map(|r| r[j].chars().count()).max().unwrap_or(0)).collect();
        let mut out = format!("{} case(s), mean ± std across cases\n", cases);
        for row in rows {
            let cells: Vec<String> = row
                .iter()
                .zip(&widths)
                .map(|(cell, &w)| format!("{}{}", cell, " ".repeat(w - cell.chars().count())))
                .collect();
            out.push_str(cells.join("  ").trim_end());
            out.push('\n');
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    Dice,
    Asd,
    Hd95,
}

impl Metric {
    pub fn of(self, r: &ClassMetrics) -> Option<f64> {
        match self {
            Metric::Dice => Some(r.dice),
            Metric::Asd => r.asd_mm,
            Metric::Hd95 => r.hd95_mm,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Metric::Dice => "Dice",
            Metric::Asd => "ASD (mm)",
            Metric::Hd95 => "HD95 (mm)",
        }
    }
}
