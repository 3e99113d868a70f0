use quantgam::data::Dataset;
use quantgam::formula::parse_formula;
use quantgam::model::{
    check, crossing_report, fit_multi, fit_quantile, predict, term_effect, term_effect_at, FitOptions,
};
use quantgam::simulate::{simulate, Preset};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn normal_sample(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| StandardNormal.sample(&mut rng)).collect()
}

fn prop_below(y: &[f64], fit: &[f64]) -> f64 {
    y.iter().zip(fit).filter(|(y, f)| y < f).count() as f64 / y.len() as f64
}

#[test]
fn intercept_only_coverage() {
    let y = normal_sample(5000, 11);
    let data = Dataset::new(5000).with_scalar("y", y.clone()).unwrap();
    let spec = parse_formula("y ~ 1").unwrap();
    let m = fit_quantile(&spec, &data, 0.9, &FitOptions::default()).unwrap();
    let p = prop_below(&y, &m.fitted);
    assert!((0.88..=0.92).contains(&p), "{p}");
    assert_eq!(m.tau, 0.9);
}

#[test]
fn appendix_a_median_curve() {
    let data = simulate(Preset::AppendixA, 1000, 5523).unwrap();
    let spec = parse_formula("y ~ s(x)").unwrap();
    let m = fit_quantile(&spec, &data, 0.5, &FitOptions::default()).unwrap();
    let x = data.scalar("x").unwrap();
    let close = x
        .iter()
        .zip(&m.fitted)
        .filter(|(x, f)| (*f - Preset::AppendixA.true_quantile(**x, 0.5)).abs() <= 0.35)
        .count();
    assert!(close as f64 >= 0.9 * 1000.0, "{close}");
    assert!(m.converged());
}

#[test]
fn preconditions() {
    let data = simulate(Preset::Sine, 100, 1).unwrap();
    let spec = parse_formula("y ~ s(x)").unwrap();
    for tau in [0.0, 1.0, -0.2, 1.5, f64::NAN] {
        assert!(fit_quantile(&spec, &data, tau, &FitOptions::default()).is_err());
    }
    assert!(fit_multi(&spec, &data, &[0.9, 0.1], &FitOptions::default()).is_err());
    assert!(fit_multi(&spec, &data, &[0.5, 0.5], &FitOptions::default()).is_err());
    assert!(fit_multi(&spec, &data, &[], &FitOptions::default()).is_err());
}

#[test]
fn multi_matches_single_and_is_deterministic() {
    let data = simulate(Preset::Sine, 400, 3).unwrap();
    let spec = parse_formula("y ~ s(x)").unwrap();
    let opts = FitOptions::default();
    let single = fit_quantile(&spec, &data, 0.5, &opts).unwrap();
    let again = fit_quantile(&spec, &data, 0.5, &opts).unwrap();
    assert_eq!(single, again);
    let multi = fit_multi(&spec, &data, &[0.5], &opts).unwrap();
    assert_eq!(multi[0].as_ref().unwrap(), &single);
    let three = fit_multi(&spec, &data, &[0.2, 0.5, 0.8], &opts).unwrap();
    assert_eq!(three[1].as_ref().unwrap(), &single);
}

#[test]
fn predictions() {
    let data = simulate(Preset::Sine, 300, 4).unwrap();
    let spec = parse_formula("y ~ s(x)").unwrap();
    let m = fit_quantile(&spec, &data, 0.7, &FitOptions::default()).unwrap();
    let p = predict(&m, &data, true, false).unwrap();
    assert_eq!(p.fit, m.fitted);
    assert!(p.clamped.iter().all(|c| !c));
    assert!(p.se.as_ref().unwrap().iter().all(|s| *s > 0.0));

    let x = data.scalar("x").unwrap();
    let new = Dataset::new(4).with_scalar("x", vec![x[7], x[7], -5.0, 0.5]).unwrap();
    let q = predict(&m, &new, true, true).unwrap();
    assert_eq!(q.fit[0], q.fit[1]);
    assert_eq!(q.fit[0], m.fitted[7]);
    assert_eq!(q.clamped, vec![false, false, true, false]);

    let mut zero = m.clone();
    zero.beta.iter_mut().for_each(|b| *b = 0.0);
    let z = predict(&zero, &data, true, false).unwrap();
    assert!(z.fit.iter().all(|f| *f == 0.0));
    assert!(z.se.unwrap().iter().all(|s| *s > 0.0));

    assert!(predict(&m, &Dataset::new(2).with_scalar("z", vec![1.0, 2.0]).unwrap(), false, false).is_err());
}

#[test]
fn unseen_factor_level_is_rejected() {
    let n = 300;
    let base = simulate(Preset::Sine, n, 9).unwrap();
    let g: Vec<&str> = (0..n).map(|i| if i % 2 == 0 { "a" } else { "b" }).collect();
    let data = base.clone().with_factor("g", &g).unwrap();
    let spec = parse_formula("y ~ s(x) + f:g").unwrap();
    let m = fit_quantile(&spec, &data, 0.5, &FitOptions::default()).unwrap();
    let new = Dataset::new(2)
        .with_scalar("x", vec![0.5, 0.6])
        .unwrap()
        .with_factor("g", &["a", "c"])
        .unwrap();
    let err = predict(&m, &new, false, false).unwrap_err().to_string();
    assert!(err.contains("row 2"), "{err}");
}

#[test]
fn check_report_is_consistent() {
    let data = simulate(Preset::HeteroNormal, 1000, 21).unwrap();
    let spec = parse_formula("y ~ s(x) | s(x)").unwrap();
    let m = fit_quantile(&spec, &data, 0.8, &FitOptions::default()).unwrap();
    let r = check(&m, &data).unwrap();
    assert_eq!(r.theor_prop_neg, 0.8);
    assert!((0.0..=1.0).contains(&r.actual_prop_neg));
    assert_eq!(r.binned.len(), 10);
    let total: usize = r.binned.iter().map(|b| b.count).sum();
    let neg: usize = r.binned.iter().map(|b| b.negatives).sum();
    assert_eq!(total, 1000);
    assert_eq!(neg as f64 / 1000.0, r.actual_prop_neg);
    let weighted: f64 = r.binned.iter().map(|b| b.proportion * b.count as f64).sum::<f64>() / 1000.0;
    assert!((weighted - r.actual_prop_neg).abs() < 1e-15);
    for b in &r.binned {
        assert!(b.lo <= 0.8 && 0.8 <= b.hi && b.fit_lo <= b.fit_hi);
    }
    assert_eq!(r.bias_histogram.iter().map(|b| b.count).sum::<usize>(), 1000);
    assert!(r.integrated_abs_bias <= r.bias_bound);
    assert_eq!(r.edf_vs_kprime.len(), 2);
    assert!(r.edf_vs_kprime.iter().all(|t| t.edf <= t.k_prime as f64 + 1e-6));
    assert_eq!(r.laml.n_coefficients, 10);
}

#[test]
fn symmetric_median_has_no_smoothing_bias() {
    let y = normal_sample(1000, 5);
    let data = Dataset::new(1000).with_scalar("y", y).unwrap();
    let m = fit_quantile(&parse_formula("y ~ 1").unwrap(), &data, 0.5, &FitOptions::default()).unwrap();
    let r = check(&m, &data).unwrap();
    assert!(r.integrated_abs_bias < 0.01, "{}", r.integrated_abs_bias);
}

#[test]
fn crossing() {
    let y = normal_sample(800, 8);
    let data = Dataset::new(800).with_scalar("y", y).unwrap();
    let spec = parse_formula("y ~ 1").unwrap();
    let fits: Vec<_> = fit_multi(&spec, &data, &[0.25, 0.75], &FitOptions::default())
        .unwrap()
        .into_iter()
        .map(Result::unwrap)
        .collect();
    let grid = Dataset::new(3);
    assert!(crossing_report(&fits, &grid).unwrap().min_gap > 0.0);
    let swapped = vec![fits[1].clone(), fits[0].clone()];
    assert!(crossing_report(&swapped, &grid).unwrap().min_gap < 0.0);
    let dup = vec![fits[0].clone(), fits[0].clone()];
    assert_eq!(crossing_report(&dup, &grid).unwrap().min_gap, 0.0);
    assert!(crossing_report(&fits[..1], &grid).is_err());
}

#[test]
fn term_effects() {
    let base = simulate(Preset::Sine, 500, 12).unwrap();
    let z: Vec<f64> = (0..500).map(|i| (i % 7) as f64).collect();
    let data = base.with_scalar("z", z).unwrap();
    let spec = parse_formula("y ~ s(x) + z").unwrap();
    let m = fit_quantile(&spec, &data, 0.5, &FitOptions::default()).unwrap();
    let e = term_effect(&m, "s(x)", 200).unwrap();
    assert_eq!(e.x.len(), 200);
    assert_eq!(e.effect.len(), 200);
    assert!(e.se.iter().all(|s| *s >= 0.0));
    let linear = term_effect(&m, "z", 10).unwrap_err().to_string();
    assert!(linear.contains("not a smooth term"), "{linear}");
    let at = term_effect_at(&m, "x", data.scalar("x").unwrap()).unwrap();
    assert_eq!(at.term, "s(x)");
    let mean = at.effect.iter().sum::<f64>() / at.effect.len() as f64;
    assert!(mean.abs() < 1e-10, "{mean}");
    assert!(term_effect(&m, "s(w)", 10).is_err());
}

/// Half width of the binomial 99% band for a proportion `p` at `n` rows.
fn band99(p: f64, n: usize) -> f64 {
    2.576 * (p * (1.0 - p) / n as f64).sqrt()
}

#[test]
fn appendix_a_err_bound_and_coverage() {
    let data = simulate(Preset::AppendixA, 1000, 5523).unwrap();
    let spec = parse_formula("y ~ s(x)").unwrap();
    let mut biases = Vec::new();
    for err in [0.01, 0.05, 0.1, 0.3, 0.5] {
        let opts = FitOptions { err: Some(err), ..FitOptions::default() };
        let m = fit_quantile(&spec, &data, 0.95, &opts).unwrap();
        let r = check(&m, &data).unwrap();
        assert_eq!(r.err, Some(err));
        assert!(r.integrated_abs_bias <= err, "err {err}: bias {}", r.integrated_abs_bias);
        if err == 0.05 {
            assert!((r.actual_prop_neg - 0.95).abs() <= band99(0.95, 1000), "{}", r.actual_prop_neg);
        }
        biases.push(r.integrated_abs_bias);
    }
    let inversions: Vec<f64> =
        biases.windows(2).filter(|w| w[1] < w[0]).map(|w| (w[0] - w[1]) / w[0]).collect();
    assert!(inversions.len() <= 1 && inversions.iter().all(|r| *r < 0.2), "{biases:?}");
}

#[test]
fn appendix_a_multi_quantile_coverage() {
    let data = simulate(Preset::AppendixA, 1000, 77).unwrap();
    let spec = parse_formula("y ~ s(x)").unwrap();
    let taus = [0.1, 0.5, 0.9];
    let fits = fit_multi(&spec, &data, &taus, &FitOptions::default()).unwrap();
    let y = data.scalar("y").unwrap();
    let mut props = Vec::new();
    for (fit, tau) in fits.iter().zip(taus) {
        let p = prop_below(y, &fit.as_ref().unwrap().fitted);
        assert!((p - tau).abs() <= band99(tau, 1000), "tau {tau}: {p}");
        props.push(p);
    }
    assert!(props.windows(2).all(|w| w[0] <= w[1]));
}

#[test]
fn low_noise_functional_fit_converges() {
    // Nearly noiseless response: the Gaussian preliminary fit runs with very large weights.
    let (n, m) = (300, 15);
    let probs: Vec<f64> = (0..m).map(|l| 0.02 + 0.96 * l as f64 / (m - 1) as f64).collect();
    let coef = |i: usize, j: usize| (((i * 31 + j * 17) % 29) as f64 / 29.0) - 0.5;
    let quantile = |i: usize, p: f64| {
        let t = p - 0.5;
        coef(i, 0) + (1.0 + coef(i, 1)) * t + coef(i, 2) * t * t + coef(i, 3) * t * t * t
    };
    let p = nalgebra::DMatrix::from_fn(n, m, |_, l| probs[l]);
    let q = nalgebra::DMatrix::from_fn(n, m, |i, l| quantile(i, probs[l]));
    let y: Vec<f64> = (0..n)
        .map(|i| {
            let signal = (0..m).map(|l| 2.0 * probs[l] * q[(i, l)]).sum::<f64>() / m as f64;
            signal + 0.05 * (((i * 7919) % 97) as f64 / 97.0 - 0.5)
        })
        .collect();
    let data = Dataset::new(n).with_matrix("p", p).unwrap().with_matrix("q", q).unwrap().with_scalar("y", y).unwrap();
    let model = fit_quantile(&parse_formula("y ~ s(p, by=q)").unwrap(), &data, 0.5, &FitOptions::default()).unwrap();
    assert!(model.converged());
    let residual = data.scalar("y").unwrap().iter().zip(&model.fitted).map(|(y, f)| (y - f).abs()).fold(0.0, f64::max);
    assert!(residual < 0.05, "max residual {residual}");
}
