//! Central finite-difference verification of analytic gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::tensor::Tensor;

/// Which coordinates a gradient check perturbs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sampling {
    /// Every coordinate of every input.
    All,
    /// `n` coordinates drawn uniformly from the concatenation of all inputs.
    Random(usize),
    /// Up to `n` coordinates drawn from each input separately.
    PerInput(usize),
}

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    pub step: f64,
    pub sampling: Sampling,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self { step: 1e-5, sampling: Sampling::All, seed: 0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Discrepancy {
    pub input: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// max over checked coordinates of `|analytic - numeric| / max(1, |analytic|)`.
    pub max_rel_error: f64,
    pub checked: usize,
    pub worst: Option<Discrepancy>,
    /// Number of checked coordinates with a nonzero analytic gradient.
    pub nonzero: usize,
}

fn coordinates(sizes: &[usize], sampling: Sampling, seed: u64) -> Vec<(usize, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match sampling {
        Sampling::All => sizes.iter().enumerate().flat_map(|(i, &n)| (0..n).map(move |j| (i, j))).collect(),
        Sampling::PerInput(per) => sizes
            .iter()
            .enumerate()
            .flat_map(|(i, &n)| {
                let mut picks = sample(&mut rng, n, per.min(n)).into_vec();
                picks.sort_unstable();
                picks.into_iter().map(move |j| (i, j)).collect::<Vec<_>>()
            })
            .collect(),
        Sampling::Random(count) => {
            let total: usize = sizes.iter().sum();
            let mut flat = sample(&mut rng, total, count.min(total)).into_vec();
            flat.sort_unstable();
            flat.into_iter()
                .map(|mut j| {
                    let mut i = 0;
                    while j >= sizes[i] {
                        j -= sizes[i];
                        i += 1;
                    }
                    (i, j)
                })
                .collect()
        }
    }
}

/// Compare reverse-mode gradients of a scalar function against central differences.
///
/// `f` receives gradient-tracking copies of `inputs`; anything else it needs
/// should be captured as a constant.
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>], opts: GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&[Tensor<f64>]) -> Result<Tensor<f64>>,
{
    let tracked: Vec<Tensor<f64>> = inputs.iter().map(|t| t.with_requires_grad(true)).collect();
    let loss = f(&tracked)?;
    loss.backward()?;
    let analytic: Vec<Vec<f64>> = tracked
        .iter()
        .map(|t| t.grad().unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect();

    let sizes: Vec<usize> = inputs.iter().map(|t| t.numel()).collect();
    let h = opts.step;
    let mut report = GradCheckReport { max_rel_error: 0.0, checked: 0, worst: None, nonzero: 0 };
    for (i, j) in coordinates(&sizes, opts.sampling, opts.seed) {
        let base = inputs[i].data()[j];
        let mut probe: Vec<Tensor<f64>> = inputs.to_vec();
        probe[i] = inputs[i].with_element(j, base + h);
        let plus = f(&probe)?.item();
        probe[i] = inputs[i].with_element(j, base - h);
        let minus = f(&probe)?.item();
        let numeric = (plus - minus) / (2.0 * h);
        let a = analytic[i][j];
        let err = (a - numeric).abs() / a.abs().max(1.0);
        report.checked += 1;
        if a != 0.0 {
            report.nonzero += 1;
        }
        if report.worst.is_none() || err > report.max_rel_error {
            report.max_rel_error = err;
            report.worst = Some(Discrepancy { input: i, index: j, analytic: a, numeric });
        }
    }
    Ok(report)
}
