use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use robust_esi::chvb::{chvb_fit, chvb_fit_from, ChvbConfig};
use robust_esi::hvb::{hvb_fit, HvbConfig};
use robust_esi::likelihood::{fit_score_matching, ResidualSample, ScoreMatchConfig};
use robust_esi::metrics::evaluate;
use robust_esi::sim::{
    forward_project, inject_noise, make_leadfield, make_sources, Leadfield, NoiseModel, SnrSpec, SourceGroundTruth,
};
use robust_esi::EsiError;

struct Case {
    g: Leadfield,
    truth: SourceGroundTruth,
    b: DMatrix<f64>,
}

fn case(noise: &NoiseModel, snr_db: f64, seed: u64) -> Case {
    let g = make_leadfield(32, 120, seed).unwrap();
    let truth = make_sources(120, 60, 6, seed + 1).unwrap();
    let clean = forward_project(&g, &truth).unwrap();
    let b = inject_noise(&clean, noise, SnrSpec::Db(snr_db), seed + 2).unwrap().b;
    Case { g, truth, b }
}

fn small_chvb() -> ChvbConfig {
    ChvbConfig {
        outer_max_iters: 150,
        ..ChvbConfig::default()
    }
}

fn rises(trace: &[f64]) -> usize {
    trace.windows(2).filter(|w| w[1] - w[0] > 1e-8 * w[0].abs()).count()
}

#[test]
fn heavy_tailed_noise_favours_the_robust_fit() {
    let noise = NoiseModel::mixture(32, 0.1, 100.0);
    let mut gains = Vec::new();
    for seed in [10, 20, 30] {
        let c = case(&noise, 0.0, seed);
        let warm = hvb_fit(&c.b, &c.g, &HvbConfig::default()).unwrap();
        let robust = chvb_fit_from(&c.b, &c.g, &small_chvb(), &warm).unwrap();
        let base = evaluate(&warm.j_hat, &c.truth.j_star, &c.truth.active).unwrap();
        let better = evaluate(&robust.j_hat, &c.truth.j_star, &c.truth.active).unwrap();
        gains.push(better.aggregate - base.aggregate);
        assert!(
            better.rmse < base.rmse,
            "seed {seed}: rmse {} vs {}",
            better.rmse,
            base.rmse
        );
    }
    assert!(gains.iter().all(|&g| g > 0.0), "aggregate gains {gains:?}");
}

#[test]
fn objective_traces_do_not_rise() {
    let c = case(&NoiseModel::mixture(32, 0.1, 100.0), 10.0, 40);
    let state = chvb_fit(&c.b, &c.g, &small_chvb()).unwrap();
    let warm = hvb_fit(&c.b, &c.g, &HvbConfig::default()).unwrap();
    assert_eq!(rises(&warm.objective_trace), 0);
    assert_eq!(rises(&state.objective_trace), 0);
    assert!(state.objective_trace.len() >= 2);
}

#[test]
fn fits_are_reproducible() {
    let c = case(&NoiseModel::gaussian(32), 5.0, 50);
    let a = chvb_fit(&c.b, &c.g, &small_chvb()).unwrap();
    let b = chvb_fit(&c.b, &c.g, &small_chvb()).unwrap();
    assert_eq!(a.j_hat, b.j_hat);
    assert_eq!(a.objective_trace, b.objective_trace);
}

#[test]
fn wrong_channel_count_is_rejected() {
    let c = case(&NoiseModel::gaussian(32), 5.0, 60);
    let short = c.b.rows(0, 31).into_owned();
    let err = hvb_fit(&short, &c.g, &HvbConfig::default()).unwrap_err();
    assert!(matches!(err.root(), EsiError::DimensionMismatch(_)), "{err}");
    let err = chvb_fit(&short, &c.g, &small_chvb()).unwrap_err();
    assert!(matches!(err.root(), EsiError::DimensionMismatch(_)), "{err}");
}

#[test]
fn score_matching_tracks_the_noise_scale() {
    let mut rng = ChaCha8Rng::seed_from_u64(70);
    let normal = Normal::new(0.0, 2.0).unwrap();
    let sample: Vec<f64> = (0..20_000).map(|_| normal.sample(&mut rng)).collect();
    let fit = fit_score_matching(&ResidualSample::new(sample).unwrap(), &ScoreMatchConfig::default()).unwrap();
    // Gaussian limit: eta is the precision and the kernel is much wider than the noise
    assert!((fit.params.eta() - 0.25).abs() < 0.025, "eta {}", fit.params.eta());
    assert!(fit.params.bandwidth().sqrt() > 10.0, "h {}", fit.params.h());
}
