//! Noise distributions, disturbance datasets and Gaussian MLE fitting.

use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Read, Write};

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::models::NoiseVec;
use crate::rng::{self, Domain, RandomStream};

/// Serializable distribution descriptor, as written in configs and dataset headers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NoiseSpec {
    UniformBox {
        lo: Vec<f64>,
        hi: Vec<f64>,
    },
    GaussianMixture {
        weights: Vec<f64>,
        means: Vec<Vec<f64>>,
        /// One row-major `n_w × n_w` matrix per component.
        covariances: Vec<Vec<f64>>,
    },
    Gaussian {
        mean: Vec<f64>,
        covariance: Vec<f64>,
    },
}

impl NoiseSpec {
    /// Uniform box `[-σ/5, -σ/5, -σ, -σ] … [σ/5, σ/5, σ, σ]`.
    pub fn dubins_uniform(sigma: f64) -> Self {
        let hi = vec![sigma / 5.0, sigma / 5.0, sigma, sigma];
        NoiseSpec::UniformBox {
            lo: hi.iter().map(|h| -h).collect(),
            hi,
        }
    }

    /// Zero-mean three-component mixture with means `{-0.5, 0, 0.5}·1`,
    /// covariance `0.05²·I` and weights `{0.1, 0.8, 0.1}`.
    pub fn dubins_mixture() -> Self {
        let cov: Vec<f64> = DMatrix::<f64>::from_diagonal_element(4, 4, 0.05 * 0.05)
            .transpose()
            .iter()
            .copied()
            .collect();
        NoiseSpec::GaussianMixture {
            weights: vec![0.1, 0.8, 0.1],
            means: vec![vec![-0.5; 4], vec![0.0; 4], vec![0.5; 4]],
            covariances: vec![cov.clone(), cov.clone(), cov],
        }
    }

    pub fn zero(n_w: usize) -> Self {
        NoiseSpec::UniformBox {
            lo: vec![0.0; n_w],
            hi: vec![0.0; n_w],
        }
    }

    pub fn build(&self) -> Result<NoiseDistribution> {
        match self {
            NoiseSpec::UniformBox { lo, hi } => NoiseDistribution::uniform(
                DVector::from_column_slice(lo),
                DVector::from_column_slice(hi),
            ),
            NoiseSpec::GaussianMixture {
                weights,
                means,
                covariances,
            } => {
                if means.len() != weights.len() || covariances.len() != weights.len() {
                    return Err(Error::Config(
                        "mixture weights, means and covariances differ in length".into(),
                    ));
                }
                let comps = means
                    .iter()
                    .zip(covariances)
                    .map(|(m, c)| {
                        let n = m.len();
                        if c.len() != n * n {
                            return Err(Error::Config(format!(
                                "mixture covariance must have {} entries",
                                n * n
                            )));
                        }
                        Ok((DVector::from_column_slice(m), DMatrix::from_row_slice(n, n, c)))
                    })
                    .collect::<Result<Vec<_>>>()?;
                NoiseDistribution::mixture(weights.clone(), comps)
            }
            NoiseSpec::Gaussian { mean, covariance } => {
                let n = mean.len();
                if covariance.len() != n * n {
                    return Err(Error::Config(format!("covariance must have {} entries", n * n)));
                }
                NoiseDistribution::gaussian(
                    DVector::from_column_slice(mean),
                    DMatrix::from_row_slice(n, n, covariance),
                )
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct Normal {
    mean: DVector<f64>,
    /// Lower Cholesky factor of the covariance.
    factor: DMatrix<f64>,
}

impl Normal {
    fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        check_dim("covariance", mean.len(), cov.nrows())?;
        check_dim("covariance", mean.len(), cov.ncols())?;
        if (&cov - cov.transpose()).amax() > 1e-12 * cov.amax().max(1.0) {
            return Err(Error::Config("covariance is not symmetric".into()));
        }
        let chol = Cholesky::<f64, Dyn>::new(cov)
            .ok_or_else(|| Error::Config("covariance is not positive definite".into()))?;
        Ok(Self {
            mean,
            factor: chol.l(),
        })
    }

    fn sample(&self, rng: &mut RandomStream) -> DVector<f64> {
        let z = DVector::from_fn(self.mean.len(), |_, _| rng.sample::<f64, _>(StandardNormal));
        &self.mean + &self.factor * z
    }
}

/// A validated noise distribution ready for sampling.
#[derive(Debug, Clone)]
pub enum NoiseDistribution {
    UniformBox { lo: DVector<f64>, hi: DVector<f64> },
    GaussianMixture { weights: Vec<f64>, components: Vec<(DVector<f64>, DMatrix<f64>)>, normals: Vec<Normal> },
    Gaussian { mean: DVector<f64>, covariance: DMatrix<f64>, normal: Normal },
}

impl NoiseDistribution {
    pub fn uniform(lo: DVector<f64>, hi: DVector<f64>) -> Result<Self> {
        check_dim("uniform box", lo.len(), hi.len())?;
        if lo.is_empty() {
            return Err(Error::Config("noise dimension must be positive".into()));
        }
        if lo.iter().zip(hi.iter()).any(|(l, h)| !(l <= h) || !l.is_finite() || !h.is_finite()) {
            return Err(Error::Config("uniform box needs finite lo <= hi".into()));
        }
        Ok(Self::UniformBox { lo, hi })
    }

    pub fn mixture(weights: Vec<f64>, components: Vec<(DVector<f64>, DMatrix<f64>)>) -> Result<Self> {
        if weights.is_empty() || weights.len() != components.len() {
            return Err(Error::Config("mixture needs one weight per component".into()));
        }
        if weights.iter().any(|w| !(*w > 0.0)) {
            return Err(Error::Config("mixture weights must be positive".into()));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::Config(format!("mixture weights sum to {total}, not 1")));
        }
        let dim = components[0].0.len();
        let normals = components
            .iter()
            .map(|(m, c)| {
                check_dim("mixture mean", dim, m.len())?;
                Normal::new(m.clone(), c.clone())
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self::GaussianMixture {
            weights,
            components,
            normals,
        })
    }

    pub fn gaussian(mean: DVector<f64>, covariance: DMatrix<f64>) -> Result<Self> {
        let normal = Normal::new(mean.clone(), covariance.clone())?;
        Ok(Self::Gaussian {
            mean,
            covariance,
            normal,
        })
    }

    pub fn dim(&self) -> usize {
        match self {
            Self::UniformBox { lo, .. } => lo.len(),
            Self::GaussianMixture { components, .. } => components[0].0.len(),
            Self::Gaussian { mean, .. } => mean.len(),
        }
    }

    /// One draw. Mixtures pick the component by weight, then sample it.
    pub fn sample(&self, rng: &mut RandomStream) -> NoiseVec {
        match self {
            Self::UniformBox { lo, hi } => DVector::from_fn(lo.len(), |i, _| {
                let u: f64 = rng.random();
                lo[i] + u * (hi[i] - lo[i])
            }),
            Self::GaussianMixture { weights, normals, .. } => {
                let u: f64 = rng.random();
                let mut acc = 0.0;
                let mut pick = weights.len() - 1;
                for (i, w) in weights.iter().enumerate() {
                    acc += w;
                    if u < acc {
                        pick = i;
                        break;
                    }
                }
                normals[pick].sample(rng)
            }
            Self::Gaussian { normal, .. } => normal.sample(rng),
        }
    }

    pub fn to_spec(&self) -> NoiseSpec {
        let flat = |m: &DMatrix<f64>| m.transpose().iter().copied().collect::<Vec<_>>();
        match self {
            Self::UniformBox { lo, hi } => NoiseSpec::UniformBox {
                lo: lo.iter().copied().collect(),
                hi: hi.iter().copied().collect(),
            },
            Self::GaussianMixture {
                weights, components, ..
            } => NoiseSpec::GaussianMixture {
                weights: weights.clone(),
                means: components.iter().map(|(m, _)| m.iter().copied().collect()).collect(),
                covariances: components.iter().map(|(_, c)| flat(c)).collect(),
            },
            Self::Gaussian {
                mean, covariance, ..
            } => NoiseSpec::Gaussian {
                mean: mean.iter().copied().collect(),
                covariance: flat(covariance),
            },
        }
    }
}

/// `K` independent length-`N` noise sequences.
#[derive(Debug, Clone, PartialEq)]
pub struct DisturbanceDataset {
    pub horizon: usize,
    pub n_w: usize,
    pub seed: u64,
    /// Descriptor of the generating distribution (may be an approximation of the true one).
    pub distribution: NoiseSpec,
    pub samples: Vec<Vec<NoiseVec>>,
}

impl DisturbanceDataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn pooled(&self) -> Vec<NoiseVec> {
        self.samples.iter().flatten().cloned().collect()
    }
}

/// Rollout `j` draws from its own substream, so generation order does not matter.
pub fn build_dataset(
    dist: &NoiseDistribution,
    k: usize,
    horizon: usize,
    seed: u64,
) -> Result<DisturbanceDataset> {
    if k == 0 || horizon == 0 {
        return Err(Error::Config("dataset needs K >= 1 and N >= 1".into()));
    }
    let samples = (0..k)
        .into_par_iter()
        .map(|j| {
            let mut rng = rng::stream(seed, Domain::Dataset, j as u64);
            (0..horizon).map(|_| dist.sample(&mut rng)).collect()
        })
        .collect();
    Ok(DisturbanceDataset {
        horizon,
        n_w: dist.dim(),
        seed,
        distribution: dist.to_spec(),
        samples,
    })
}

#[derive(Debug, Clone)]
pub struct GaussianFit {
    pub mean: DVector<f64>,
    /// MLE covariance (normalized by the sample count).
    pub covariance: DMatrix<f64>,
    /// The covariance was not positive definite.
    pub singular: bool,
}

impl GaussianFit {
    /// Covariance with `eps·I` added when the fit was singular.
    pub fn regularized(&self, eps: f64) -> DMatrix<f64> {
        if self.singular {
            &self.covariance + DMatrix::identity(self.covariance.nrows(), self.covariance.ncols()) * eps
        } else {
            self.covariance.clone()
        }
    }
}

pub fn fit_gaussian_mle(samples: &[NoiseVec]) -> Result<GaussianFit> {
    let n = samples.first().map(|s| s.len()).unwrap_or(0);
    if n == 0 || samples.len() < n + 1 {
        return Err(Error::Config(format!(
            "Gaussian fit needs at least n_w + 1 = {} samples, got {}",
            n + 1,
            samples.len()
        )));
    }
    let count = samples.len() as f64;
    let mut mean = DVector::zeros(n);
    for s in samples {
        check_dim("noise sample", n, s.len())?;
        mean += s;
    }
    mean /= count;
    let mut cov = DMatrix::zeros(n, n);
    for s in samples {
        let d = s - &mean;
        cov += &d * d.transpose();
    }
    cov /= count;
    let singular = Cholesky::<f64, Dyn>::new(cov.clone()).is_none();
    Ok(GaussianFit {
        mean,
        covariance: cov,
        singular,
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct DatasetHeader {
    #[serde(rename = "K")]
    k: usize,
    #[serde(rename = "N")]
    n: usize,
    n_w: usize,
    seed: u64,
    distribution: NoiseSpec,
}

/// Decimal with 17 significant digits; parses back to the identical `f64`.
pub(crate) fn fmt17(x: f64) -> String {
    if x.is_finite() {
        format!("{x:.16e}")
    } else if x.is_nan() {
        "nan".into()
    } else if x > 0.0 {
        "inf".into()
    } else {
        "-inf".into()
    }
}

pub(crate) fn parse_f64(s: &str) -> Result<f64> {
    s.trim()
        .parse::<f64>()
        .map_err(|e| Error::Format(format!("bad number {s:?}: {e}")))
}

/// Writes the dataset as one JSON header line followed by a CSV body
/// (`j,k,w_1..w_{n_w}`).
pub fn write_dataset<W: Write>(ds: &DisturbanceDataset, mut out: W) -> Result<()> {
    let header = DatasetHeader {
        k: ds.len(),
        n: ds.horizon,
        n_w: ds.n_w,
        seed: ds.seed,
        distribution: ds.distribution.clone(),
    };
    writeln!(out, "{}", serde_json::to_string(&header).map_err(|e| Error::Format(e.to_string()))?)?;
    let cols: Vec<String> = (1..=ds.n_w).map(|i| format!("w_{i}")).collect();
    writeln!(out, "j,k,{}", cols.join(","))?;
    let mut line = String::new();
    for (j, seq) in ds.samples.iter().enumerate() {
        for (k, w) in seq.iter().enumerate() {
            line.clear();
            let _ = write!(line, "{j},{k}");
            for x in w.iter() {
                line.push(',');
                line.push_str(&fmt17(*x));
            }
            writeln!(out, "{line}")?;
        }
    }
    Ok(())
}

pub fn read_dataset<R: Read>(input: R) -> Result<DisturbanceDataset> {
    let mut lines = BufReader::new(input).lines();
    let header_line = lines
        .next()
        .ok_or_else(|| Error::Format("empty dataset file".into()))??;
    let header: DatasetHeader =
        serde_json::from_str(&header_line).map_err(|e| Error::Format(e.to_string()))?;
    lines.next().ok_or_else(|| Error::Format("missing CSV header".into()))??;
    let mut samples = vec![vec![DVector::zeros(header.n_w); header.n]; header.k];
    let mut seen = 0usize;
    for line in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != header.n_w + 2 {
            return Err(Error::Format(format!("row has {} fields", fields.len())));
        }
        let j: usize = fields[0].parse().map_err(|_| Error::Format("bad rollout index".into()))?;
        let k: usize = fields[1].parse().map_err(|_| Error::Format("bad step index".into()))?;
        if j >= header.k || k >= header.n {
            return Err(Error::Format(format!("index ({j},{k}) out of range")));
        }
        for (i, f) in fields[2..].iter().enumerate() {
            samples[j][k][i] = parse_f64(f)?;
        }
        seen += 1;
    }
    if seen != header.k * header.n {
        return Err(Error::Format(format!(
            "expected {} rows, found {seen}",
            header.k * header.n
        )));
    }
    Ok(DisturbanceDataset {
        horizon: header.n,
        n_w: header.n_w,
        seed: header.seed,
        distribution: header.distribution,
        samples,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rng(i: u64) -> RandomStream {
        rng::stream(99, Domain::Synthetic, i)
    }

    #[test]
    fn degenerate_box_returns_constant() {
        let c = DVector::from_column_slice(&[0.3, -1.0]);
        let d = NoiseDistribution::uniform(c.clone(), c.clone()).unwrap();
        let mut r = rng(0);
        for _ in 0..10 {
            assert_eq!(d.sample(&mut r), c);
        }
    }

    #[test]
    fn uniform_case_stays_in_box() {
        let d = NoiseSpec::dubins_uniform(0.15).build().unwrap();
        let mut r = rng(1);
        for _ in 0..10_000 {
            let w = d.sample(&mut r);
            assert!(w.iter().all(|x| x.abs() <= 0.15));
            assert!(w[0].abs() <= 0.03 && w[1].abs() <= 0.03);
        }
    }

    #[test]
    fn mixture_is_zero_mean_with_correct_frequencies() {
        let d = NoiseSpec::dubins_mixture().build().unwrap();
        let mut r = rng(2);
        let n = 100_000;
        let mut sum = DVector::zeros(4);
        let mut sq = DVector::zeros(4);
        let mut counts = [0usize; 3];
        for _ in 0..n {
            let w = d.sample(&mut r);
            // Components are separated by 10 standard deviations.
            let c = if w[0] < -0.25 { 0 } else if w[0] > 0.25 { 2 } else { 1 };
            counts[c] += 1;
            sq += w.component_mul(&w);
            sum += w;
        }
        let nf = n as f64;
        for i in 0..4 {
            let mean = sum[i] / nf;
            let sd = (sq[i] / nf - mean * mean).sqrt();
            assert!(mean.abs() <= 3.0 * sd / nf.sqrt(), "component {i}: mean {mean}");
        }
        for (c, psi) in counts.iter().zip([0.1, 0.8, 0.1]) {
            let sigma = (nf * psi * (1.0 - psi)).sqrt();
            assert!((*c as f64 - nf * psi).abs() <= 3.0 * sigma, "count {c} vs {psi}");
        }
    }

    #[test]
    fn invalid_distributions_are_rejected() {
        assert!(NoiseDistribution::uniform(
            DVector::from_column_slice(&[1.0]),
            DVector::from_column_slice(&[0.0])
        )
        .is_err());
        let bad_cov = NoiseSpec::Gaussian {
            mean: vec![0.0, 0.0],
            covariance: vec![1.0, 2.0, 2.0, 1.0],
        };
        assert!(matches!(bad_cov.build(), Err(Error::Config(_))));
        let bad_weights = NoiseSpec::GaussianMixture {
            weights: vec![0.5, 0.6],
            means: vec![vec![0.0], vec![1.0]],
            covariances: vec![vec![1.0], vec![1.0]],
        };
        assert!(bad_weights.build().is_err());
    }

    #[test]
    fn dataset_shape_and_determinism() {
        let d = NoiseSpec::dubins_uniform(0.15).build().unwrap();
        let a = build_dataset(&d, 20, 200, 5).unwrap();
        assert_eq!(a.len(), 20);
        assert!(a.samples.iter().all(|s| s.len() == 200));
        let b = build_dataset(&d, 20, 200, 5).unwrap();
        assert_eq!(a, b);
        let c = build_dataset(&d, 20, 200, 6).unwrap();
        assert_ne!(a.samples, c.samples);
        assert!(build_dataset(&d, 0, 10, 1).is_err());
    }

    #[test]
    fn mle_hand_cases() {
        let same = vec![DVector::from_column_slice(&[2.0, 3.0]); 5];
        let fit = fit_gaussian_mle(&same).unwrap();
        assert_eq!(fit.mean, DVector::from_column_slice(&[2.0, 3.0]));
        assert_eq!(fit.covariance, DMatrix::zeros(2, 2));
        assert!(fit.singular);
        assert_eq!(fit.regularized(1e-9), DMatrix::identity(2, 2) * 1e-9);

        let pm = vec![DVector::from_element(1, -1.0), DVector::from_element(1, 1.0)];
        let fit = fit_gaussian_mle(&pm).unwrap();
        assert_eq!(fit.mean[0], 0.0);
        assert_eq!(fit.covariance[(0, 0)], 1.0);

        assert!(fit_gaussian_mle(&pm[..1]).is_err());
    }

    #[test]
    fn mle_recovers_uniform_variance() {
        let d = NoiseSpec::dubins_uniform(0.15).build().unwrap();
        let mut r = rng(3);
        let samples: Vec<_> = (0..100_000).map(|_| d.sample(&mut r)).collect();
        let fit = fit_gaussian_mle(&samples).unwrap();
        let expected = [0.03f64.powi(2) / 3.0, 0.03f64.powi(2) / 3.0, 0.0075, 0.0075];
        for (i, e) in expected.iter().enumerate() {
            let got = fit.covariance[(i, i)];
            assert!((got - e).abs() <= 0.1 * e, "var {i}: {got} vs {e}");
        }
    }

    #[test]
    fn spec_round_trips_through_distribution() {
        for spec in [NoiseSpec::dubins_uniform(0.15), NoiseSpec::dubins_mixture()] {
            assert_eq!(spec.build().unwrap().to_spec(), spec);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn dataset_file_round_trip_is_bit_exact(seed in any::<u64>(), k in 1usize..4, n in 1usize..6) {
            let d = NoiseSpec::dubins_mixture().build().unwrap();
            let ds = build_dataset(&d, k, n, seed).unwrap();
            let mut buf = Vec::new();
            write_dataset(&ds, &mut buf).unwrap();
            let back = read_dataset(buf.as_slice()).unwrap();
            prop_assert_eq!(back, ds);
        }
    }
}
