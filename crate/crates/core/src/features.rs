//! Feature preparation: normalization, PCA, quantization, binary expansion,
//! sparse JL projection and fixed-point KL terms.

use std::collections::BTreeSet;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Seven ingested feature parts of one image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureBundle {
    pub rgb: Vec<f64>,
    pub hsv: Vec<f64>,
    pub lab: Vec<f64>,
    pub g: Vec<f64>,
    pub gq: Vec<f64>,
    pub h: Vec<f64>,
    pub hq: Vec<f64>,
}

/// Per-part dimensions; the nominal layout has 48/48/48/256/256/4096/4096.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartDims {
    pub rgb: usize,
    pub hsv: usize,
    pub lab: usize,
    pub g: usize,
    pub gq: usize,
    pub h: usize,
    pub hq: usize,
}

impl PartDims {
    pub const NOMINAL: PartDims = PartDims {
        rgb: 48,
        hsv: 48,
        lab: 48,
        g: 256,
        gq: 256,
        h: 4096,
        hq: 4096,
    };

    pub fn of(b: &FeatureBundle) -> Self {
        Self {
            rgb: b.rgb.len(),
            hsv: b.hsv.len(),
            lab: b.lab.len(),
            g: b.g.len(),
            gq: b.gq.len(),
            h: b.h.len(),
            hq: b.hq.len(),
        }
    }

    /// Length of the L1 vector after PCA with strength `x` on the h/hq parts.
    pub fn l1_dim(&self, x: usize) -> usize {
        self.rgb + self.hsv + self.g + self.gq + pca_target(self.h, x) + pca_target(self.hq, x)
    }
}

pub fn pca_target(dim: usize, strength: usize) -> usize {
    (dim / strength.max(1)).max(1)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureConfig {
    /// PCA strength X: h and hq are reduced to dim / X.
    pub pca_strength: usize,
    pub alpha: f64,
    pub gamma: f64,
    /// Expansion width and clamp for quantized L1 entries.
    pub beta: u32,
    /// Real [0, 2] to integer scale.
    pub quant_scale: f64,
    /// Scale applied to projected coordinates before rounding.
    pub proj_scale: f64,
    /// Nonzeros per column of the sparse projection.
    pub jl_nnz: usize,
    /// Fixed-point scale of the KL terms.
    pub kl_scale: f64,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            pca_strength: 32,
            alpha: 1.0,
            gamma: 100.0,
            beta: 999,
            quant_scale: 500.0,
            proj_scale: 16.0,
            jl_nnz: 4,
            kl_scale: 1e4,
        }
    }
}

impl FeatureConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidParams(m.to_string()));
        if self.pca_strength == 0 {
            return bad("PCA strength must be positive");
        }
        if !(self.alpha.is_finite()
            && self.alpha > 0.0
            && self.gamma.is_finite()
            && self.gamma > 1.0)
        {
            return bad("alpha must be positive and gamma above 1");
        }
        let positive = |x: f64| x.is_finite() && x > 0.0;
        if self.beta == 0
            || !positive(self.quant_scale)
            || !positive(self.proj_scale)
            || !(positive(self.kl_scale) && self.kl_scale >= 1.0)
        {
            return bad("quantization scales must be positive");
        }
        if self.jl_nnz == 0 {
            return bad("projection needs at least one nonzero per column");
        }
        Ok(())
    }

    pub fn m_hat(&self, m: usize) -> usize {
        approx_dim(m, self.alpha, self.gamma, self.beta)
    }
}

/// `round(alpha * m * log_gamma(beta + 1))`.
pub fn approx_dim(m: usize, alpha: f64, gamma: f64, beta: u32) -> usize {
    let v = alpha * m as f64 * (f64::from(beta) + 1.0).ln() / gamma.ln();
    (v.round() as usize).max(1)
}

/// Mean and principal axes (rows, descending variance, orthonormal).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PcaModel {
    pub mean: Vec<f64>,
    pub axes: Vec<Vec<f64>>,
}

impl PcaModel {
    pub fn fit(data: &[Vec<f64>], k: usize) -> Result<Self> {
        let n = data.len();
        if n == 0 {
            return Err(Error::EmptyCorpus);
        }
        let d = data[0].len();
        if let Some(bad) = data.iter().find(|r| r.len() != d) {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: bad.len(),
            });
        }
        if k == 0 || k > d {
            return Err(Error::InvalidParams(format!(
                "PCA target {k} outside 1..={d}"
            )));
        }
        let mean: Vec<f64> = (0..d)
            .map(|j| data.iter().map(|r| r[j]).sum::<f64>() / n as f64)
            .collect();
        let x = DMatrix::from_fn(n, d, |i, j| data[i][j] - mean[j]);

        let mut pairs: Vec<(f64, Vec<f64>)> = if n >= d {
            let cov = x.transpose() * &x;
            let eig = SymmetricEigen::new(cov);
            (0..d)
                .map(|i| {
                    (
                        eig.eigenvalues[i],
                        eig.eigenvectors.column(i).iter().copied().collect(),
                    )
                })
                .collect()
        } else {
            // Gram route: eigenvectors of X X^T map to axes through X^T.
            let gram = &x * x.transpose();
            let eig = SymmetricEigen::new(gram);
            (0..n)
                .map(|i| {
                    let u = eig.eigenvectors.column(i);
                    let a = x.transpose() * u;
                    (eig.eigenvalues[i], a.iter().copied().collect())
                })
                .collect()
        };
        pairs.sort_by(|a, b| b.0.total_cmp(&a.0));

        let scale = pairs.first().map_or(0.0, |p| p.0.abs()).max(1.0);
        let mut axes: Vec<Vec<f64>> = Vec::with_capacity(k);
        for (val, v) in pairs {
            if axes.len() == k || val <= 1e-10 * scale {
                break;
            }
            if let Some(a) = orthonormalize(v, &axes) {
                axes.push(a);
            }
        }
        // Rank-deficient corpora: complete with standard basis directions.
        let mut e = 0;
        while axes.len() < k && e < d {
            let mut basis = vec![0.0; d];
            basis[e] = 1.0;
            if let Some(a) = orthonormalize(basis, &axes) {
                axes.push(a);
            }
            e += 1;
        }
        Ok(Self { mean, axes })
    }

    pub fn input_dim(&self) -> usize {
        self.mean.len()
    }

    pub fn output_dim(&self) -> usize {
        self.axes.len()
    }

    pub fn project(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.mean.len() {
            return Err(Error::DimensionMismatch {
                expected: self.mean.len(),
                got: v.len(),
            });
        }
        Ok(self
            .axes
            .iter()
            .map(|a| {
                a.iter()
                    .zip(v.iter().zip(&self.mean))
                    .map(|(ai, (x, m))| ai * (x - m))
                    .sum()
            })
            .collect())
    }

    pub fn reconstruct(&self, z: &[f64]) -> Vec<f64> {
        let mut out = self.mean.clone();
        for (a, zi) in self.axes.iter().zip(z) {
            for (o, ai) in out.iter_mut().zip(a) {
                *o += ai * zi;
            }
        }
        out
    }

    /// Share of the total variance of `data` captured by the axes.
    pub fn retained_variance(&self, data: &[Vec<f64>]) -> Result<f64> {
        let mut total = 0.0;
        let mut kept = 0.0;
        for row in data {
            let z = self.project(row)?;
            kept += z.iter().map(|x| x * x).sum::<f64>();
            total += row
                .iter()
                .zip(&self.mean)
                .map(|(x, m)| (x - m) * (x - m))
                .sum::<f64>();
        }
        Ok(if total > 0.0 { kept / total } else { 1.0 })
    }
}

fn orthonormalize(mut v: Vec<f64>, basis: &[Vec<f64>]) -> Option<Vec<f64>> {
    for _ in 0..2 {
        for b in basis {
            let dot: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            for (x, y) in v.iter_mut().zip(b) {
                *x -= dot * y;
            }
        }
    }
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm < 1e-8 {
        return None;
    }
    for x in v.iter_mut() {
        *x /= norm;
    }
    // Fix the sign so that fits are reproducible.
    let lead = v.iter().copied().fold(
        0.0f64,
        |acc, x| if x.abs() > acc.abs() + 1e-12 { x } else { acc },
    );
    if lead < 0.0 {
        for x in v.iter_mut() {
            *x = -*x;
        }
    }
    Some(v)
}

pub fn l1_normalize(v: &[f64], part: &str) -> Result<Vec<f64>> {
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::Degenerate(format!("{part} has non-finite entries")));
    }
    let norm: f64 = v.iter().map(|x| x.abs()).sum();
    if norm == 0.0 {
        return Err(Error::Degenerate(format!("{part} has zero L1 norm")));
    }
    Ok(v.iter().map(|x| x / norm).collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct NormalizedFeature {
    /// Concatenated, normalized and shifted L1 parts, entries in [0, 2].
    pub v_l1: Vec<f64>,
    /// Normalized LAB histogram.
    pub v_kl: Vec<f64>,
}

/// PCA models for the two high-dimensional parts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PcaPair {
    pub h: PcaModel,
    pub hq: PcaModel,
}

impl PcaPair {
    /// Fits on the L1-normalized h and hq parts of a corpus.
    pub fn fit(bundles: &[FeatureBundle], strength: usize) -> Result<Self> {
        let first = bundles.first().ok_or(Error::EmptyCorpus)?;
        let dims = PartDims::of(first);
        let h: Vec<Vec<f64>> = bundles
            .iter()
            .map(|b| l1_normalize(&b.h, "h"))
            .collect::<Result<_>>()?;
        let hq: Vec<Vec<f64>> = bundles
            .iter()
            .map(|b| l1_normalize(&b.hq, "hq"))
            .collect::<Result<_>>()?;
        Ok(Self {
            h: PcaModel::fit(&h, pca_target(dims.h, strength))?,
            hq: PcaModel::fit(&hq, pca_target(dims.hq, strength))?,
        })
    }
}

fn push_shifted(out: &mut Vec<f64>, v: &[f64], part: &str) -> Result<()> {
    out.extend(l1_normalize(v, part)?.into_iter().map(|x| x + 1.0));
    Ok(())
}

/// Normalizes every part; h and hq are reduced by PCA before their own
/// normalization, which is why their entries may be negative before the shift.
pub fn preprocess(bundle: &FeatureBundle, pca: &PcaPair) -> Result<NormalizedFeature> {
    let mut v_l1 = Vec::new();
    push_shifted(&mut v_l1, &bundle.rgb, "rgb")?;
    push_shifted(&mut v_l1, &bundle.hsv, "hsv")?;
    push_shifted(&mut v_l1, &bundle.g, "g")?;
    push_shifted(&mut v_l1, &bundle.gq, "gq")?;
    let h = pca.h.project(&l1_normalize(&bundle.h, "h")?)?;
    push_shifted(&mut v_l1, &h, "h after PCA")?;
    let hq = pca.hq.project(&l1_normalize(&bundle.hq, "hq")?)?;
    push_shifted(&mut v_l1, &hq, "hq after PCA")?;
    if bundle.lab.iter().any(|&x| x < 0.0) {
        return Err(Error::Degenerate(
            "lab histogram has negative entries".into(),
        ));
    }
    let v_kl = l1_normalize(&bundle.lab, "lab")?;
    Ok(NormalizedFeature { v_l1, v_kl })
}

/// `clamp(round(scale * v), 0, beta)`.
pub fn quantize(v: &[f64], scale: f64, beta: u32) -> Vec<u32> {
    v.iter()
        .map(|x| (x * scale).round().clamp(0.0, f64::from(beta)) as u32)
        .collect()
}

/// Unary code: the first `v_j` of each width-`beta` block are 1.
pub fn binary_expand(v: &[u32], beta: u32) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(v.len() * beta as usize);
    for &x in v {
        if x > beta {
            return Err(Error::ExpansionOverflow { value: x, beta });
        }
        out.extend(std::iter::repeat_n(1u8, x as usize));
        out.extend(std::iter::repeat_n(0u8, (beta - x) as usize));
    }
    Ok(out)
}

/// Column-sparse sign matrix of shape `m_hat x (m * beta)`: every column has
/// `nnz` nonzero entries of value `±1/sqrt(nnz)` on distinct rows.
#[derive(Clone, Debug)]
pub struct JlProjector {
    m: usize,
    beta: u32,
    m_hat: usize,
    nnz: usize,
    rows: Vec<u32>,
    signs: Vec<i8>,
}

impl JlProjector {
    pub fn new(m: usize, beta: u32, m_hat: usize, nnz: usize, seed: u64) -> Self {
        let nnz = nnz.min(m_hat).max(1);
        let cols = m * beta as usize;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut rows = Vec::with_capacity(cols * nnz);
        let mut signs = Vec::with_capacity(cols * nnz);
        let mut picked: Vec<u32> = Vec::with_capacity(nnz);
        for _ in 0..cols {
            picked.clear();
            while picked.len() < nnz {
                let r = rng.gen_range(0..m_hat as u32);
                if !picked.contains(&r) {
                    picked.push(r);
                }
            }
            for &r in &picked {
                rows.push(r);
                signs.push(if rng.gen::<bool>() { 1 } else { -1 });
            }
        }
        Self {
            m,
            beta,
            m_hat,
            nnz,
            rows,
            signs,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.m
    }

    pub fn output_dim(&self) -> usize {
        self.m_hat
    }

    fn add_column(&self, acc: &mut [i64], col: usize) {
        let base = col * self.nnz;
        for k in base..base + self.nnz {
            acc[self.rows[k] as usize] += i64::from(self.signs[k]);
        }
    }

    /// Projection of an expanded binary vector, in units of `1/sqrt(nnz)`.
    pub fn project_expanded(&self, bits: &[u8]) -> Result<Vec<i64>> {
        let cols = self.m * self.beta as usize;
        if bits.len() != cols {
            return Err(Error::DimensionMismatch {
                expected: cols,
                got: bits.len(),
            });
        }
        let mut acc = vec![0i64; self.m_hat];
        for (col, &b) in bits.iter().enumerate() {
            if b != 0 {
                self.add_column(&mut acc, col);
            }
        }
        Ok(acc)
    }

    /// Same result as [`Self::project_expanded`] on `binary_expand(u)`, without
    /// materialising the expansion: only the unary prefix of each block is set.
    pub fn project_quantized(&self, u: &[u32]) -> Result<Vec<i64>> {
        if u.len() != self.m {
            return Err(Error::DimensionMismatch {
                expected: self.m,
                got: u.len(),
            });
        }
        let mut acc = vec![0i64; self.m_hat];
        for (i, &x) in u.iter().enumerate() {
            if x > self.beta {
                return Err(Error::ExpansionOverflow {
                    value: x,
                    beta: self.beta,
                });
            }
            let base = i * self.beta as usize;
            for t in 0..x as usize {
                self.add_column(&mut acc, base + t);
            }
        }
        Ok(acc)
    }

    /// `2 * round(proj_scale * P u)`; doubling keeps half-square terms integral.
    pub fn finish(&self, acc: &[i64], proj_scale: f64) -> Vec<i64> {
        let unit = proj_scale / (self.nnz as f64).sqrt();
        acc.iter()
            .map(|&a| 2 * (a as f64 * unit).round() as i64)
            .collect()
    }
}

/// L1 distance estimate from two approximated vectors.
pub fn approx_l1_distance(a: &[i64], b: &[i64], cfg: &FeatureConfig) -> f64 {
    squared_distance(a, b) as f64 / approx_unit(cfg)
}

/// Squared-distance units per unit of real L1 distance.
pub fn approx_unit(cfg: &FeatureConfig) -> f64 {
    4.0 * cfg.proj_scale * cfg.proj_scale * cfg.quant_scale
}

pub fn squared_distance(a: &[i64], b: &[i64]) -> i128 {
    a.iter()
        .zip(b)
        .map(|(x, y)| i128::from(x - y) * i128::from(x - y))
        .sum()
}

/// Fixed-point KL terms: `a_j = round(Q v_j)` and `L_j = round(Q ln(a_j / Q))`,
/// with `L_j = 0` for empty bins.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct KlFixed {
    pub a: Vec<i64>,
    pub log: Vec<i64>,
}

impl KlFixed {
    pub fn new(v_kl: &[f64], scale: f64) -> Self {
        let a: Vec<i64> = v_kl
            .iter()
            .map(|x| (x * scale).round().max(0.0) as i64)
            .collect();
        let log = a
            .iter()
            .map(|&x| {
                if x > 0 {
                    (scale * (x as f64 / scale).ln()).round() as i64
                } else {
                    0
                }
            })
            .collect();
        Self { a, log }
    }

    pub fn dim(&self) -> usize {
        self.a.len()
    }

    /// `sum a_j (L_j - L_cj)` over bins nonempty on both sides, in units of `Q^2`.
    pub fn divergence_units(&self, other: &KlFixed) -> i128 {
        self.a
            .iter()
            .zip(&self.log)
            .zip(other.a.iter().zip(&other.log))
            .filter(|((&a, _), (&c, _))| a > 0 && c > 0)
            .map(|((&a, &l), (_, &lc))| i128::from(a) * i128::from(l - lc))
            .sum()
    }
}

/// Real-valued KL divergence with empty bins on either side skipped.
pub fn kl_divergence(a: &[f64], c: &[f64]) -> f64 {
    a.iter()
        .zip(c)
        .filter(|(&x, &y)| x > 0.0 && y > 0.0)
        .map(|(x, y)| x * (x / y).ln())
        .sum()
}

pub fn l1_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()
}

/// Distinct split dimensions of a forest plan `(tree, node, dim)`, ascending.
pub fn split_fields(plan: &[(usize, usize, usize)]) -> Vec<usize> {
    plan.iter()
        .map(|&(_, _, d)| d)
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect()
}

/// Everything the encrypted layer needs from one image.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedFeature {
    pub normalized: NormalizedFeature,
    pub v_hat: Vec<i64>,
    pub kl: KlFixed,
}

/// Fitted preprocessing shared by the corpus and its requests.
#[derive(Clone, Debug)]
pub struct FeaturePipeline {
    pub config: FeatureConfig,
    pub dims: PartDims,
    pub pca: PcaPair,
    pub jl_seed: u64,
    jl: JlProjector,
}

impl FeaturePipeline {
    pub fn fit(bundles: &[FeatureBundle], config: FeatureConfig, jl_seed: u64) -> Result<Self> {
        config.validate()?;
        let first = bundles.first().ok_or(Error::EmptyCorpus)?;
        let dims = PartDims::of(first);
        if let Some(b) = bundles.iter().find(|b| PartDims::of(b) != dims) {
            return Err(Error::Validation(format!(
                "inconsistent part dims {:?} vs {:?}",
                PartDims::of(b),
                dims
            )));
        }
        let pca = PcaPair::fit(bundles, config.pca_strength)?;
        Ok(Self::from_parts(config, dims, pca, jl_seed))
    }

    pub fn from_parts(config: FeatureConfig, dims: PartDims, pca: PcaPair, jl_seed: u64) -> Self {
        let m = dims.rgb + dims.hsv + dims.g + dims.gq + pca.h.output_dim() + pca.hq.output_dim();
        let jl = JlProjector::new(m, config.beta, config.m_hat(m), config.jl_nnz, jl_seed);
        Self {
            config,
            dims,
            pca,
            jl_seed,
            jl,
        }
    }

    pub fn m_l1(&self) -> usize {
        self.jl.input_dim()
    }

    pub fn m_hat(&self) -> usize {
        self.jl.output_dim()
    }

    pub fn m_kl(&self) -> usize {
        self.dims.lab
    }

    pub fn projector(&self) -> &JlProjector {
        &self.jl
    }

    pub fn prepare(&self, bundle: &FeatureBundle) -> Result<PreparedFeature> {
        let got = PartDims::of(bundle);
        if got != self.dims {
            return Err(Error::Validation(format!(
                "part dims {got:?} do not match fitted {:?}",
                self.dims
            )));
        }
        let normalized = preprocess(bundle, &self.pca)?;
        let u = quantize(&normalized.v_l1, self.config.quant_scale, self.config.beta);
        let acc = self.jl.project_quantized(&u)?;
        let v_hat = self.jl.finish(&acc, self.config.proj_scale);
        let kl = KlFixed::new(&normalized.v_kl, self.config.kl_scale);
        Ok(PreparedFeature {
            normalized,
            v_hat,
            kl,
        })
    }
}
