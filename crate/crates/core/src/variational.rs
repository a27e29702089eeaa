//! Histogram density estimates and the variational-optimal rectifier.
//!
//! For the objective
//!
//! ```text
//! L(g) = E_in[(g(z) - z)^2] - 2 lambda (E_in[g(z)] - E_out[g(z)])
//! ```
//!
//! the minimizer is `g*(z) = z + lambda (1 - p_out(z) / p_in(z))`. Densities
//! are estimated by additively smoothed histograms on a shared binning, and
//! `g*` is tabulated at the bin midpoints.

use crate::error::{Error, Result};
use crate::rectify::{bin_index, check_edges, FeatureTable};

pub const DEFAULT_BINS: usize = 200;
pub const DEFAULT_EPS: f64 = 0.5;
pub const DEFAULT_LAMBDA: f64 = 1.0;

/// `bins` equal-width bins spanning `[lo, hi]`. A degenerate range is widened
/// by half a unit on each side.
pub fn uniform_edges(lo: f64, hi: f64, bins: usize) -> Result<Vec<f64>> {
    if bins == 0 {
        return Err(Error::Parameter("bin count must be positive".into()));
    }
    if !(lo.is_finite() && hi.is_finite()) || lo > hi {
        return Err(Error::Parameter(format!("invalid histogram range [{lo}, {hi}]")));
    }
    let (lo, hi) = if lo == hi { (lo - 0.5, hi + 0.5) } else { (lo, hi) };
    let width = hi - lo;
    let mut edges: Vec<f64> = (0..bins)
        .map(|k| lo + width * (k as f64 / bins as f64))
        .collect();
    edges.push(hi);
    check_edges(&edges).map_err(Error::Parameter)?;
    Ok(edges)
}

/// Equal-width bins over the joint range of two samples.
pub fn union_edges(a: &[f64], b: &[f64], bins: usize) -> Result<Vec<f64>> {
    let (lo, hi) = a
        .iter()
        .chain(b)
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if lo > hi {
        return Err(Error::EmptyInput("no samples to bin".into()));
    }
    uniform_edges(lo, hi, bins)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Histogram {
    edges: Vec<f64>,
    counts: Vec<u64>,
    total: u64,
}

impl Histogram {
    pub fn edges(&self) -> &[f64] {
        &self.edges
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    pub fn bins(&self) -> usize {
        self.counts.len()
    }

    /// Adds the counts of a histogram over the same edges.
    pub fn merge(&self, other: &Histogram) -> Result<Histogram> {
        if self.edges != other.edges {
            return Err(Error::Parameter("cannot merge histograms with different edges".into()));
        }
        Ok(Histogram {
            edges: self.edges.clone(),
            counts: self.counts.iter().zip(&other.counts).map(|(a, b)| a + b).collect(),
            total: self.total + other.total,
        })
    }
}

/// Counts samples per bin. Bins are `[e_b, e_{b+1})` with the last bin
/// closed; samples outside the edges are clamped into the end bins.
pub fn fit_histogram(samples: &[f64], edges: &[f64]) -> Result<Histogram> {
    check_edges(edges).map_err(Error::Parameter)?;
    if let Some((index, &value)) = samples.iter().enumerate().find(|(_, v)| !v.is_finite()) {
        return Err(Error::NonFinite { index, value });
    }
    let mut counts = vec![0u64; edges.len() - 1];
    for &z in samples {
        counts[bin_index(edges, z)] += 1;
    }
    Ok(Histogram {
        edges: edges.to_vec(),
        counts,
        total: samples.len() as u64,
    })
}

/// Smoothed ID and OOD densities over one binning.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityPair {
    edges: Vec<f64>,
    pdf_in: Vec<f64>,
    pdf_out: Vec<f64>,
    eps: f64,
}

impl DensityPair {
    pub fn edges(&self) -> &[f64] {
        &self.edges
    }

    pub fn pdf_in(&self) -> &[f64] {
        &self.pdf_in
    }

    pub fn pdf_out(&self) -> &[f64] {
        &self.pdf_out
    }

    pub fn smoothing_eps(&self) -> f64 {
        self.eps
    }

    pub fn bins(&self) -> usize {
        self.pdf_in.len()
    }

    pub fn widths(&self) -> Vec<f64> {
        self.edges.windows(2).map(|w| w[1] - w[0]).collect()
    }

    pub fn midpoints(&self) -> Vec<f64> {
        self.edges.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect()
    }

    /// Probability mass per bin under `p_in`.
    pub fn mass_in(&self) -> Vec<f64> {
        self.pdf_in.iter().zip(self.widths()).map(|(p, w)| p * w).collect()
    }

    pub fn mass_out(&self) -> Vec<f64> {
        self.pdf_out.iter().zip(self.widths()).map(|(p, w)| p * w).collect()
    }
}

/// `pdf[b] = (count[b] + eps) / ((total + B eps) * width[b])`.
pub fn make_density_pair(h_in: &Histogram, h_out: &Histogram, eps: f64) -> Result<DensityPair> {
    if h_in.edges != h_out.edges {
        return Err(Error::Parameter("ID and OOD histograms use different edges".into()));
    }
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(Error::Parameter(format!("smoothing eps must be > 0, got {eps}")));
    }
    let bins = h_in.bins() as f64;
    let smooth = |h: &Histogram| -> Vec<f64> {
        let norm = h.total as f64 + bins * eps;
        h.counts
            .iter()
            .zip(h.edges.windows(2))
            .map(|(&c, w)| (c as f64 + eps) / (norm * (w[1] - w[0])))
            .collect()
    };
    Ok(DensityPair {
        edges: h_in.edges.clone(),
        pdf_in: smooth(h_in),
        pdf_out: smooth(h_out),
        eps,
    })
}

/// Anything that maps a scalar activation to a rectified value.
pub trait ScalarMap {
    fn eval(&self, z: f64) -> f64;
}

impl<F: Fn(f64) -> f64> ScalarMap for F {
    fn eval(&self, z: f64) -> f64 {
        self(z)
    }
}

impl ScalarMap for FeatureTable {
    fn eval(&self, z: f64) -> f64 {
        self.lookup(z)
    }
}

/// `g*` evaluated at bin midpoints.
#[derive(Debug, Clone, PartialEq)]
pub struct TabulatedG {
    edges: Vec<f64>,
    midpoints: Vec<f64>,
    displacement: Vec<f64>,
    values: Vec<f64>,
    lambda: f64,
}

impl TabulatedG {
    pub fn edges(&self) -> &[f64] {
        &self.edges
    }

    pub fn midpoints(&self) -> &[f64] {
        &self.midpoints
    }

    /// `g*(mid) = mid + displacement`.
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// `lambda (1 - p_out / p_in)` per bin, i.e. `g*(z) - z` at the midpoint.
    pub fn displacement(&self) -> &[f64] {
        &self.displacement
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn to_feature_table(&self) -> Result<FeatureTable> {
        FeatureTable::new(self.edges.clone(), self.values.clone())
    }

    /// Piecewise-constant lookup with constant extrapolation.
    pub fn lookup(&self, z: f64) -> f64 {
        self.values[bin_index(&self.edges, z)]
    }
}

impl ScalarMap for TabulatedG {
    fn eval(&self, z: f64) -> f64 {
        self.lookup(z)
    }
}

/// Tabulates `g*(z) = z + lambda (1 - p_out(z) / p_in(z))` at bin midpoints.
pub fn optimal_g(d: &DensityPair, lambda: f64) -> Result<TabulatedG> {
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(Error::Parameter(format!("lambda must be > 0, got {lambda}")));
    }
    let midpoints = d.midpoints();
    let displacement: Vec<f64> = d
        .pdf_in
        .iter()
        .zip(&d.pdf_out)
        .map(|(&pin, &pout)| lambda * (1.0 - pout / pin))
        .collect();
    let values = midpoints.iter().zip(&displacement).map(|(m, s)| m + s).collect();
    Ok(TabulatedG {
        edges: d.edges.clone(),
        midpoints,
        displacement,
        values,
        lambda,
    })
}

fn mean(values: impl Iterator<Item = f64>, n: usize) -> f64 {
    values.sum::<f64>() / n as f64
}

/// Plug-in estimate of the objective with expectations as sample means.
pub fn variational_objective<G: ScalarMap + ?Sized>(
    g: &G,
    in_samples: &[f64],
    out_samples: &[f64],
    lambda: f64,
) -> Result<f64> {
    if in_samples.is_empty() || out_samples.is_empty() {
        return Err(Error::EmptyInput("objective needs ID and OOD samples".into()));
    }
    let n_in = in_samples.len();
    let quadratic = mean(in_samples.iter().map(|&z| (g.eval(z) - z).powi(2)), n_in);
    let e_in = mean(in_samples.iter().map(|&z| g.eval(z)), n_in);
    let e_out = mean(out_samples.iter().map(|&z| g.eval(z)), out_samples.len());
    Ok(quadratic - 2.0 * lambda * (e_in - e_out))
}

/// Objective of a piecewise-constant `g` (one value per bin) under the
/// binned densities, with `z` represented by the bin midpoint.
pub fn binned_objective(d: &DensityPair, values: &[f64], lambda: f64) -> Result<f64> {
    if values.len() != d.bins() {
        return Err(Error::dims("piecewise values", d.bins(), values.len()));
    }
    let mids = d.midpoints();
    let (mi, mo) = (d.mass_in(), d.mass_out());
    Ok((0..d.bins())
        .map(|b| mi[b] * (values[b] - mids[b]).powi(2) - 2.0 * lambda * values[b] * (mi[b] - mo[b]))
        .sum())
}

/// Gap enlargement of `g*` over the identity, with the guaranteed lower bound.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GapBound {
    /// `E_in[g*] - E_out[g*]`.
    pub gap_gstar: f64,
    /// `E_in[z] - E_out[z]`.
    pub gap_identity: f64,
    pub improvement: f64,
    /// `E_in[(g* - z)^2] / (2 lambda)`.
    pub bound: f64,
    pub satisfied: bool,
}

/// Binned expectations for the gap bound, using midpoint quadrature on the
/// smoothed densities.
pub fn gap_bound_check(d: &DensityPair, lambda: f64) -> Result<GapBound> {
    let g = optimal_g(d, lambda)?;
    let (mi, mo) = (d.mass_in(), d.mass_out());
    let dot = |w: &[f64], v: &[f64]| w.iter().zip(v).map(|(a, b)| a * b).sum::<f64>();
    let gap_gstar = dot(&mi, &g.values) - dot(&mo, &g.values);
    let gap_identity = dot(&mi, &g.midpoints) - dot(&mo, &g.midpoints);
    let improvement = gap_gstar - gap_identity;
    let sq: Vec<f64> = g.displacement.iter().map(|s| s * s).collect();
    let bound = dot(&mi, &sq) / (2.0 * lambda);
    let satisfied = improvement >= bound - 1e-9 * bound.abs().max(1.0);
    Ok(GapBound {
        gap_gstar,
        gap_identity,
        improvement,
        bound,
        satisfied,
    })
}

/// `E_in[g(z)] - E_out[g(z)]` and `E_in[z] - E_out[z]` over raw samples.
pub fn sample_gap<G: ScalarMap + ?Sized>(g: &G, in_samples: &[f64], out_samples: &[f64]) -> Result<(f64, f64)> {
    if in_samples.is_empty() || out_samples.is_empty() {
        return Err(Error::EmptyInput("gap needs ID and OOD samples".into()));
    }
    let (n_in, n_out) = (in_samples.len(), out_samples.len());
    let gap_g = mean(in_samples.iter().map(|&z| g.eval(z)), n_in)
        - mean(out_samples.iter().map(|&z| g.eval(z)), n_out);
    let gap_z = mean(in_samples.iter().copied(), n_in) - mean(out_samples.iter().copied(), n_out);
    Ok((gap_g, gap_z))
}

/// One exported plotting row: bin bounds, both densities and `g*`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GstarRow {
    pub bin_left: f64,
    pub bin_right: f64,
    pub pdf_in: f64,
    pub pdf_out: f64,
    pub g_star: f64,
}

pub fn gstar_rows(d: &DensityPair, g: &TabulatedG) -> Vec<GstarRow> {
    (0..d.bins())
        .map(|b| GstarRow {
            bin_left: d.edges[b],
            bin_right: d.edges[b + 1],
            pdf_in: d.pdf_in[b],
            pdf_out: d.pdf_out[b],
            g_star: g.values[b],
        })
        .collect()
}

/// Histogram both samples on their joint range and smooth them.
pub fn density_pair_from_samples(in_samples: &[f64], out_samples: &[f64], bins: usize, eps: f64) -> Result<DensityPair> {
    if in_samples.is_empty() || out_samples.is_empty() {
        return Err(Error::EmptyInput("density estimation needs ID and OOD samples".into()));
    }
    let edges = union_edges(in_samples, out_samples, bins)?;
    make_density_pair(&fit_histogram(in_samples, &edges)?, &fit_histogram(out_samples, &edges)?, eps)
}
