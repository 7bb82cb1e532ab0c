//! Flip rate, SSIM, a feature-space perceptual distance, and Fréchet distances
//! between Gaussian fits of frame-level and clip-level classifier features.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::classifier::{ClassifierParams, Prediction};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::video::Video;

pub fn flip_rate(results: &[(Prediction, usize)]) -> Result<f64> {
    if results.is_empty() {
        return Err(Error::Empty("flip_rate needs at least one result".into()));
    }
    let hits = results.iter().filter(|(p, t)| p.argmax() == *t).count();
    Ok(hits as f64 / results.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SSIMConstants {
    pub c1: f64,
    pub c2: f64,
}

impl Default for SSIMConstants {
    fn default() -> Self {
        SSIMConstants { c1: 0.01f64.powi(2), c2: 0.03f64.powi(2) }
    }
}

/// SSIM with one window covering the whole plane.
pub fn ssim_window(a: &[f32], b: &[f32], k: SSIMConstants) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().map(|&v| v as f64).sum::<f64>() / n;
    let mb = b.iter().map(|&v| v as f64).sum::<f64>() / n;
    let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        let (dx, dy) = (x as f64 - ma, y as f64 - mb);
        va += dx * dx;
        vb += dy * dy;
        cov += dx * dy;
    }
    let (va, vb, cov) = (va / n, vb / n, cov / n);
    ((2.0 * ma * mb + k.c1) * (2.0 * cov + k.c2)) / ((ma * ma + mb * mb + k.c1) * (va + vb + k.c2))
}

/// Mean over frames and channels of the global-window SSIM.
pub fn ssim(x_i: &Video, x_c: &Video, k: SSIMConstants) -> Result<f64> {
    if x_i.dims() != x_c.dims() {
        return Err(Error::Shape(format!("{:?} vs {:?}", x_i.dims(), x_c.dims())));
    }
    let [n, c, h, w] = x_i.dims();
    let p = h * w;
    let mut total = 0.0;
    for plane in 0..n * c {
        let r = plane * p..(plane + 1) * p;
        total += ssim_window(&x_i.data()[r.clone()], &x_c.data()[r], k);
    }
    Ok(total / (n * c) as f64)
}

fn check_extractor(x: &Video, ex: &ClassifierParams) -> Result<()> {
    let a = &ex.arch;
    let [_, c, h, w] = x.dims();
    if (c, h, w) != (a.channels, a.height, a.width) {
        return Err(Error::Shape(format!(
            "extractor expects {}x{}x{} frames, got {c}x{h}x{w}",
            a.channels, a.height, a.width
        )));
    }
    Ok(())
}

/// Unit-normalizes each feature vector along channels, per frame and pixel.
pub fn unit_normalize(layer: &Tensor) -> Tensor {
    let [f, c, h, w] = layer.dims4();
    let p = h * w;
    let mut out = layer.clone();
    let d = out.data_mut();
    for fi in 0..f {
        for px in 0..p {
            let idx = |ch: usize| (fi * c + ch) * p + px;
            let norm = (0..c).map(|ch| d[idx(ch)] * d[idx(ch)]).sum::<f64>().sqrt() + 1e-10;
            for ch in 0..c {
                d[idx(ch)] /= norm;
            }
        }
    }
    out
}

/// Layer-averaged, frame-averaged squared distance between unit-normalized feature maps,
/// each frame's distance being the spatial mean of the channel-summed squared difference.
pub fn perceptual_distance_from_layers(a: &[Tensor], b: &[Tensor]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::Shape("feature layer lists differ".into()));
    }
    let mut total = 0.0;
    for (la, lb) in a.iter().zip(b) {
        if la.shape() != lb.shape() {
            return Err(Error::Shape(format!("{:?} vs {:?}", la.shape(), lb.shape())));
        }
        let [f, _, h, w] = la.dims4();
        let (na, nb) = (unit_normalize(la), unit_normalize(lb));
        let sq: f64 = na.data().iter().zip(nb.data()).map(|(x, y)| (x - y) * (x - y)).sum();
        total += sq / (f * h * w) as f64;
    }
    Ok(total / a.len() as f64)
}

pub fn perceptual_distance(x_i: &Video, x_c: &Video, extractor: &ClassifierParams) -> Result<f64> {
    if x_i.dims() != x_c.dims() {
        return Err(Error::Shape(format!("{:?} vs {:?}", x_i.dims(), x_c.dims())));
    }
    check_extractor(x_i, extractor)?;
    let (la, _) = extractor.features(&x_i.to_tensor());
    let (lb, _) = extractor.features(&x_c.to_tensor());
    perceptual_distance_from_layers(&la, &lb)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureLevel {
    /// Spatial mean of the last block, one vector per frame.
    Frame,
    /// Global average over the clip, the classifier's penultimate vector.
    Clip,
}

/// Feature vectors of one video at the given level.
pub fn extract_features(x: &Video, extractor: &ClassifierParams, level: FeatureLevel) -> Result<Vec<Vec<f64>>> {
    check_extractor(x, extractor)?;
    let (layers, pooled) = extractor.features(&x.to_tensor());
    Ok(match level {
        FeatureLevel::Clip => vec![pooled],
        FeatureLevel::Frame => {
            let last = layers.last().expect("three blocks");
            let [f, c, h, w] = last.dims4();
            let p = h * w;
            (0..f)
                .map(|fi| (0..c).map(|ch| last.data()[(fi * c + ch) * p..(fi * c + ch + 1) * p].iter().sum::<f64>() / p as f64).collect())
                .collect()
        }
    })
}

/// Gaussian fit of a feature distribution; `cov` is row-major `dim × dim` and unbiased.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrechetStats {
    pub mean: Vec<f64>,
    pub cov: Vec<f64>,
    pub count: usize,
}

impl FrechetStats {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn from_features(features: &[Vec<f64>]) -> Result<Self> {
        let m = features.len();
        if m < 2 {
            return Err(Error::Empty(format!("feature statistics need at least 2 samples, got {m}")));
        }
        let d = features[0].len();
        if features.iter().any(|f| f.len() != d) {
            return Err(Error::Shape("feature vectors differ in length".into()));
        }
        let mut mean = vec![0.0; d];
        for f in features {
            for (acc, v) in mean.iter_mut().zip(f) {
                *acc += v;
            }
        }
        mean.iter_mut().for_each(|v| *v /= m as f64);
        let centered = DMatrix::from_fn(m, d, |r, c| features[r][c] - mean[c]);
        let cov = (centered.transpose() * &centered) / (m - 1) as f64;
        let cov = (&cov + cov.transpose()) * 0.5;
        Ok(FrechetStats { mean, cov: cov.transpose().as_slice().to_vec(), count: m })
    }

    /// Parametric stats, for analytic checks.
    pub fn gaussian(mean: Vec<f64>, cov: Vec<f64>) -> Result<Self> {
        if cov.len() != mean.len() * mean.len() {
            return Err(Error::Shape("covariance must be dim × dim".into()));
        }
        Ok(FrechetStats { mean, cov, count: 0 })
    }

    fn cov_matrix(&self) -> DMatrix<f64> {
        let d = self.dim();
        DMatrix::from_row_slice(d, d, &self.cov)
    }
}

pub fn feature_stats(videos: &[Video], extractor: &ClassifierParams, level: FeatureLevel) -> Result<FrechetStats> {
    let per: Vec<Vec<Vec<f64>>> = videos.par_iter().map(|v| extract_features(v, extractor, level)).collect::<Result<_>>()?;
    let all: Vec<Vec<f64>> = per.into_iter().flatten().collect();
    FrechetStats::from_features(&all)
}

const PSD_TOLERANCE: f64 = 1e-8;

fn psd_sqrt(m: DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    let scale = m.iter().fold(1.0f64, |a, v| a.max(v.abs()));
    let eig = SymmetricEigen::new(m);
    if let Some(&bad) = eig.eigenvalues.iter().find(|&&l| l < -PSD_TOLERANCE * scale) {
        return Err(Error::Numerical(format!("{what} is not positive semidefinite (eigenvalue {bad:e})")));
    }
    let roots = DVector::from_iterator(eig.eigenvalues.len(), eig.eigenvalues.iter().map(|l| l.max(0.0).sqrt()));
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose())
}

/// `‖μ_a − μ_b‖² + Tr(Σ_a + Σ_b − 2·(Σ_a^{1/2} Σ_b Σ_a^{1/2})^{1/2})`, clipped at 0.
pub fn frechet_distance(a: &FrechetStats, b: &FrechetStats) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!("feature dimensions {} vs {}", a.dim(), b.dim())));
    }
    let mean_term: f64 = a.mean.iter().zip(&b.mean).map(|(x, y)| (x - y) * (x - y)).sum();
    let (sa, sb) = (a.cov_matrix(), b.cov_matrix());
    let ra = psd_sqrt(sa.clone(), "first covariance")?;
    let inner = &ra * &sb * &ra;
    let inner = (&inner + inner.transpose()) * 0.5;
    let cross = psd_sqrt(inner, "covariance product")?;
    let d = mean_term + sa.trace() + sb.trace() - 2.0 * cross.trace();
    Ok(d.max(0.0))
}

/// Energy share of the largest 4-connected region of above-average perturbation.
/// Energy is the per-pixel squared difference averaged over frames and channels.
pub fn largest_region_energy_fraction(x_i: &Video, x_c: &Video) -> Result<f64> {
    if x_i.dims() != x_c.dims() {
        return Err(Error::Shape(format!("{:?} vs {:?}", x_i.dims(), x_c.dims())));
    }
    let [n, c, h, w] = x_i.dims();
    let p = h * w;
    let mut energy = vec![0.0; p];
    for plane in 0..n * c {
        for px in 0..p {
            let d = x_i.data()[plane * p + px] as f64 - x_c.data()[plane * p + px] as f64;
            energy[px] += d * d;
        }
    }
    let total: f64 = energy.iter().sum();
    if total == 0.0 {
        return Ok(0.0);
    }
    let threshold = total / p as f64;
    let mut seen = vec![false; p];
    let mut best = 0.0f64;
    let mut stack = Vec::new();
    for start in 0..p {
        if seen[start] || energy[start] <= threshold {
            continue;
        }
        seen[start] = true;
        stack.push(start);
        let mut region = 0.0;
        while let Some(i) = stack.pop() {
            region += energy[i];
            let (y, x) = (i / w, i % w);
            let mut visit = |j: usize| {
                if !seen[j] && energy[j] > threshold {
                    seen[j] = true;
                    stack.push(j);
                }
            };
            if y > 0 {
                visit(i - w);
            }
            if y + 1 < h {
                visit(i + w);
            }
            if x > 0 {
                visit(i - 1);
            }
            if x + 1 < w {
                visit(i + 1);
            }
        }
        best = best.max(region);
    }
    Ok(best / total)
}

/// Which feature extractor produced the Fréchet and perceptual numbers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExtractorProvenance {
    pub network: String,
    pub kind: String,
    pub checkpoint_sha256: String,
    pub frame_features: String,
    pub clip_features: String,
    pub perceptual_layers: usize,
    pub perceptual_weights: String,
}

impl ExtractorProvenance {
    pub fn of(extractor: &ClassifierParams) -> Self {
        ExtractorProvenance {
            network: "in-repo video classifier".into(),
            kind: format!("{:?}", extractor.kind).to_lowercase(),
            checkpoint_sha256: extractor.store.digest(),
            frame_features: format!("block-3 spatial mean per frame ({} dims)", extractor.arch.feature_dim()),
            clip_features: format!("global average pool ({} dims)", extractor.arch.feature_dim()),
            perceptual_layers: 3,
            perceptual_weights: "uniform".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleMetrics {
    pub index: usize,
    pub target: usize,
    pub predicted: usize,
    pub p_target: f64,
    pub flipped: bool,
    pub ssim: f64,
    pub perceptual: f64,
    /// Mean absolute pixel difference to the original.
    pub l1: f64,
    pub largest_region_energy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub count: usize,
    pub flip_rate: f64,
    pub ssim: f64,
    pub perceptual: f64,
    pub l1: f64,
    pub fid: f64,
    pub fvd: f64,
    pub extractor: ExtractorProvenance,
    pub samples: Vec<SampleMetrics>,
}

/// Metrics of `counterfactuals` against `originals`; flips are judged by `clf`,
/// features come from `extractor`.
pub fn evaluate_method(
    originals: &[Video],
    counterfactuals: &[Video],
    targets: &[usize],
    clf: &ClassifierParams,
    extractor: &ClassifierParams,
) -> Result<MetricsReport> {
    let m = originals.len();
    if counterfactuals.len() != m || targets.len() != m {
        return Err(Error::Shape(format!(
            "misaligned lists: {m} originals, {} counterfactuals, {} targets",
            counterfactuals.len(),
            targets.len()
        )));
    }
    if m == 0 {
        return Err(Error::Empty("no samples to evaluate".into()));
    }
    let samples: Vec<SampleMetrics> = (0..m)
        .into_par_iter()
        .map(|i| {
            let (xi, xc, t) = (&originals[i], &counterfactuals[i], targets[i]);
            let pred = clf.predict(xc)?;
            let p_target = *pred.probs.get(t).ok_or(Error::ClassIndex { index: t, classes: pred.probs.len() })?;
            Ok(SampleMetrics {
                index: i,
                target: t,
                predicted: pred.argmax(),
                p_target,
                flipped: pred.argmax() == t,
                ssim: ssim(xi, xc, SSIMConstants::default())?,
                perceptual: perceptual_distance(xi, xc, extractor)?,
                l1: xi.mean_abs_diff(xc),
                largest_region_energy: largest_region_energy_fraction(xi, xc)?,
            })
        })
        .collect::<Result<_>>()?;
    let mean = |f: fn(&SampleMetrics) -> f64| samples.iter().map(f).sum::<f64>() / m as f64;
    let (fid, fvd) = if m >= 2 {
        let fa = feature_stats(originals, extractor, FeatureLevel::Frame)?;
        let fb = feature_stats(counterfactuals, extractor, FeatureLevel::Frame)?;
        let ca = feature_stats(originals, extractor, FeatureLevel::Clip)?;
        let cb = feature_stats(counterfactuals, extractor, FeatureLevel::Clip)?;
        (frechet_distance(&fa, &fb)?, frechet_distance(&ca, &cb)?)
    } else {
        (f64::NAN, f64::NAN)
    };
    Ok(MetricsReport {
        count: m,
        flip_rate: mean(|s| if s.flipped { 1.0 } else { 0.0 }),
        ssim: mean(|s| s.ssim),
        perceptual: mean(|s| s.perceptual),
        l1: mean(|s| s.l1),
        fid,
        fvd,
        extractor: ExtractorProvenance::of(extractor),
        samples,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pred(winner: usize) -> Prediction {
        let mut l = vec![0.0; 4];
        l[winner] = 5.0;
        Prediction::from_logits(l)
    }

    #[test]
    fn flip_rate_cases() {
        let r: Vec<_> = (0..4).map(|i| (pred(i), i)).collect();
        assert_eq!(flip_rate(&r).unwrap(), 1.0);
        let r: Vec<_> = (0..4).map(|i| (pred(i), (i + 1) % 4)).collect();
        assert_eq!(flip_rate(&r).unwrap(), 0.0);
        let r = vec![(pred(0), 0), (pred(1), 1), (pred(2), 2), (pred(3), 0)];
        assert_eq!(flip_rate(&r).unwrap(), 0.75);
        assert!(flip_rate(&[]).is_err());
    }

    #[test]
    fn hand_statistics() {
        let s = FrechetStats::from_features(&[vec![0.0], vec![2.0]]).unwrap();
        assert_eq!(s.mean, vec![1.0]);
        assert_eq!(s.cov, vec![2.0]);
        let same = FrechetStats::from_features(&vec![vec![1.0, 2.0]; 5]).unwrap();
        assert!(same.cov.iter().all(|&v| v == 0.0));
        assert!(FrechetStats::from_features(&[vec![1.0]]).is_err());
    }

    #[test]
    fn region_fraction() {
        let a = Video::filled(2, 1, 4, 4, 0.0).unwrap();
        let mut d = vec![0.0f64; 32];
        d[5] = 1.0;
        d[16 + 5] = 1.0;
        let b = Video::from_f64(2, 1, 4, 4, &d).unwrap();
        assert_eq!(largest_region_energy_fraction(&a, &b).unwrap(), 1.0);
        assert_eq!(largest_region_energy_fraction(&a, &a).unwrap(), 0.0);
    }
}
