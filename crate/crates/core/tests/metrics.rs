use bttf_core::classifier::{ClassifierArch, ClassifierKind, ClassifierParams, Prediction};
use bttf_core::metrics::{
    evaluate_method, extract_features, frechet_distance, perceptual_distance, ssim, FeatureLevel, FrechetStats,
    SSIMConstants,
};
use bttf_core::rng::{rng_from_seed, standard_normal};
use bttf_core::Video;
use proptest::prelude::*;

fn random_video(seed: u64, dims: [usize; 4]) -> Video {
    let [n, c, h, w] = dims;
    let v: Vec<f64> = standard_normal(&mut rng_from_seed(seed), n * c * h * w)
        .into_iter()
        .map(|x| 1.0 / (1.0 + (-x).exp()))
        .collect();
    Video::from_f64(n, c, h, w, &v).unwrap()
}

fn small_extractor() -> ClassifierParams {
    let arch = ClassifierArch { height: 16, width: 16, widths: [4, 6, 8], ..Default::default() };
    ClassifierParams::new(arch, ClassifierKind::Robust, 11).unwrap()
}

#[test]
fn frechet_analytic_cases() {
    let a = FrechetStats::gaussian(vec![0.3, -1.0], vec![2.0, 0.5, 0.5, 1.0]).unwrap();
    assert!(frechet_distance(&a, &a).unwrap().abs() <= 1e-9);

    let n0 = FrechetStats::gaussian(vec![0.0], vec![1.0]).unwrap();
    let n1 = FrechetStats::gaussian(vec![1.0], vec![1.0]).unwrap();
    assert!((frechet_distance(&n0, &n1).unwrap() - 1.0).abs() <= 1e-9);

    let i = FrechetStats::gaussian(vec![0.0, 0.0], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
    let four = FrechetStats::gaussian(vec![0.0, 0.0], vec![4.0, 0.0, 0.0, 4.0]).unwrap();
    assert!((frechet_distance(&i, &four).unwrap() - 2.0).abs() <= 1e-8);

    let bad = FrechetStats::gaussian(vec![0.0], vec![-1.0]).unwrap();
    assert!(matches!(frechet_distance(&bad, &n0), Err(bttf_core::Error::Numerical(_))));
    assert!(frechet_distance(&n0, &i).is_err());
}

#[test]
fn stats_match_two_pass_oracle() {
    let feats: Vec<Vec<f64>> = (0..30).map(|i| standard_normal(&mut rng_from_seed(100 + i), 5)).collect();
    let s = FrechetStats::from_features(&feats).unwrap();
    let m = feats.len() as f64;
    for c in 0..5 {
        let mean = feats.iter().map(|f| f[c]).sum::<f64>() / m;
        assert!((s.mean[c] - mean).abs() < 1e-12);
    }
    for a in 0..5 {
        for b in 0..5 {
            let cov = feats.iter().map(|f| (f[a] - s.mean[a]) * (f[b] - s.mean[b])).sum::<f64>() / (m - 1.0);
            assert!((s.cov[a * 5 + b] - cov).abs() < 1e-12);
        }
    }
}

#[test]
fn ssim_constant_frames() {
    let k = SSIMConstants::default();
    let a = Video::filled(2, 3, 4, 4, 0.5).unwrap();
    assert_eq!(ssim(&a, &a, k).unwrap(), 1.0);
    let lo = Video::filled(2, 3, 4, 4, 0.25).unwrap();
    let hi = Video::filled(2, 3, 4, 4, 0.75).unwrap();
    let (c1, c2) = (1e-4, 9e-4);
    let luminance = (2.0 * 0.25 * 0.75 + c1) / (0.25f64 * 0.25 + 0.75 * 0.75 + c1);
    let structure = c2 / c2;
    assert!((ssim(&lo, &hi, k).unwrap() - luminance * structure).abs() < 1e-12);
    assert!(ssim(&lo, &Video::filled(2, 3, 4, 2, 0.1).unwrap(), k).is_err());
}

#[test]
fn perceptual_matches_recomputation_from_feature_maps() {
    let ex = small_extractor();
    let (a, b) = (random_video(1, [3, 3, 16, 16]), random_video(2, [3, 3, 16, 16]));
    let got = perceptual_distance(&a, &b, &ex).unwrap();
    let (la, _) = ex.features(&a.to_tensor());
    let (lb, _) = ex.features(&b.to_tensor());
    let mut layer_sum = 0.0;
    for (x, y) in la.iter().zip(&lb) {
        let [f, c, h, w] = x.dims4();
        let mut frame_sum = 0.0;
        for fi in 0..f {
            let mut d = 0.0;
            for py in 0..h * w {
                let at = |t: &bttf_core::Tensor, ch: usize| t.data()[(fi * c + ch) * h * w + py];
                let nx = (0..c).map(|ch| at(x, ch).powi(2)).sum::<f64>().sqrt() + 1e-10;
                let ny = (0..c).map(|ch| at(y, ch).powi(2)).sum::<f64>().sqrt() + 1e-10;
                d += (0..c).map(|ch| (at(x, ch) / nx - at(y, ch) / ny).powi(2)).sum::<f64>();
            }
            frame_sum += d / (h * w) as f64;
        }
        layer_sum += frame_sum / f as f64;
    }
    assert!((got - layer_sum / la.len() as f64).abs() < 1e-12);
    assert_eq!(perceptual_distance(&a, &a, &ex).unwrap(), 0.0);
    assert_eq!(got, perceptual_distance(&b, &a, &ex).unwrap());
    assert!(perceptual_distance(&random_video(3, [2, 3, 8, 8]), &random_video(4, [2, 3, 8, 8]), &ex).is_err());
}

#[test]
fn identical_sets_give_a_perfect_report() {
    let ex = small_extractor();
    let vids: Vec<Video> = (0..4).map(|i| random_video(20 + i, [2, 3, 16, 16])).collect();
    let preds: Vec<usize> = vids.iter().map(|v| ex.predict(v).unwrap().argmax()).collect();
    let r = evaluate_method(&vids, &vids, &preds, &ex, &ex).unwrap();
    assert_eq!(r.flip_rate, 1.0);
    assert_eq!(r.ssim, 1.0);
    assert_eq!(r.perceptual, 0.0);
    assert!(r.fid.abs() < 1e-9 && r.fvd.abs() < 1e-9);
    let mean_ssim = r.samples.iter().map(|s| s.ssim).sum::<f64>() / r.count as f64;
    assert_eq!(mean_ssim, r.ssim);
    assert_eq!(extract_features(&vids[0], &ex, FeatureLevel::Frame).unwrap().len(), 2);
    assert!(evaluate_method(&vids, &vids[..3], &preds, &ex, &ex).is_err());
    let _ = Prediction::from_logits(vec![0.0; 4]);
}

fn stats_strategy(d: usize) -> impl Strategy<Value = FrechetStats> {
    prop::collection::vec(prop::collection::vec(-3.0f64..3.0, d), 3..12)
        .prop_map(|f| FrechetStats::from_features(&f).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn frechet_is_symmetric_and_nonnegative(a in stats_strategy(3), b in stats_strategy(3)) {
        let ab = frechet_distance(&a, &b).unwrap();
        let ba = frechet_distance(&b, &a).unwrap();
        prop_assert!(ab >= 0.0);
        prop_assert!((ab - ba).abs() <= 1e-7 * (1.0 + ab));
        prop_assert!(frechet_distance(&a, &a).unwrap() <= 1e-9 * (1.0 + a.cov.iter().map(|v| v.abs()).sum::<f64>()));
    }

    #[test]
    fn covariance_is_symmetric_psd(a in stats_strategy(4)) {
        for i in 0..4 {
            for j in 0..4 {
                prop_assert_eq!(a.cov[i * 4 + j], a.cov[j * 4 + i]);
            }
        }
        let m = nalgebra::DMatrix::from_row_slice(4, 4, &a.cov);
        prop_assert!(m.symmetric_eigenvalues().iter().all(|&l| l >= -1e-8));
    }

    #[test]
    fn ssim_is_symmetric_and_one_on_identity(s1 in 0u64..1000, s2 in 0u64..1000) {
        let (a, b) = (random_video(s1, [2, 3, 8, 8]), random_video(s2 + 1000, [2, 3, 8, 8]));
        let k = SSIMConstants::default();
        prop_assert_eq!(ssim(&a, &a, k).unwrap(), 1.0);
        let (ab, ba) = (ssim(&a, &b, k).unwrap(), ssim(&b, &a, k).unwrap());
        prop_assert_eq!(ab, ba);
        prop_assert!((-1.0..=1.0).contains(&ab));
    }
}
