use super::special::*;
use super::*;
use proptest::prelude::*;

/// Composite Simpson rule.
fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, intervals: usize) -> f64 {
    let n = intervals + intervals % 2;
    let h = (b - a) / n as f64;
    let mut acc = f(a) + f(b);
    for i in 1..n {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        acc += w * f(a + i as f64 * h);
    }
    acc * h / 3.0
}

/// Two-sided t tail by quadrature of the unnormalized density, mapped onto
/// a finite interval with `x = tan θ`.
fn t_tail_oracle(t: f64, df: f64) -> f64 {
    let g = |th: f64| {
        let x = th.tan();
        let c = th.cos();
        (1.0 + x * x / df).powf(-(df + 1.0) / 2.0) / (c * c)
    };
    let half_pi = std::f64::consts::FRAC_PI_2;
    let z = simpson(g, 0.0, half_pi, 20_000);
    simpson(g, t.abs().atan(), half_pi, 20_000) / z
}

/// Upper F tail by quadrature with `x = u / (1 − u)`; needs `d2 > 2` so the
/// mapped integrand vanishes at `u = 1`.
fn f_tail_oracle(f: f64, d1: f64, d2: f64) -> f64 {
    assert!(d2 > 2.0);
    let g = |u: f64| {
        if u >= 1.0 {
            return 0.0;
        }
        let x = u / (1.0 - u);
        x.powf(d1 / 2.0 - 1.0) * (1.0 + d1 * x / d2).powf(-(d1 + d2) / 2.0) / ((1.0 - u) * (1.0 - u))
    };
    let z = simpson(g, 0.0, 1.0, 40_000);
    simpson(g, f / (1.0 + f), 1.0, 40_000) / z
}

#[test]
fn t_p_values_match_quadrature() {
    for df in 2..=30 {
        for &t in &[0.3, 1.0, 2.1, 4.5] {
            let p = t_two_sided_p(t, df as f64);
            let oracle = t_tail_oracle(t, df as f64);
            assert!((p - oracle).abs() < 1e-6, "df {df} t {t}: {p} vs {oracle}");
        }
    }
}

#[test]
fn f_p_values_match_quadrature() {
    for d1 in [2usize, 3, 4, 7] {
        for d2 in [4usize, 10, 20, 30] {
            for &f in &[0.5, 1.5, 3.0, 6.44] {
                let p = f_sf(f, d1 as f64, d2 as f64);
                let oracle = f_tail_oracle(f, d1 as f64, d2 as f64);
                assert!((p - oracle).abs() < 1e-6, "({d1},{d2}) F {f}: {p} vs {oracle}");
            }
        }
    }
}

/// Five values with exactly the given mean and sample sd.
fn with_moments(mean: f64, sd: f64) -> Vec<f64> {
    let z = [-2.0, -1.0, 0.0, 1.0, 2.0];
    let z_sd = (10.0f64 / 4.0).sqrt();
    z.iter().map(|v| mean + sd * v / z_sd).collect()
}

#[test]
fn baseline_row_confidence_interval_and_cv() {
    let xs = SampleSet::new("uniform_distributed", with_moments(7.51, 0.59));
    let s = summarize(&xs).unwrap();
    assert!((s.mean - 7.51).abs() < 1e-12);
    assert!((s.sd - 0.59).abs() < 1e-12);
    assert!((s.ci95_low - 6.78).abs() <= 0.02, "{}", s.ci95_low);
    assert!((s.ci95_high - 8.24).abs() <= 0.02, "{}", s.ci95_high);
    assert!((s.cv_percent - 7.9).abs() <= 0.1, "{}", s.cv_percent);
}

#[test]
fn constant_sample_summary() {
    let s = summarize(&SampleSet::new("c", vec![5.0; 3])).unwrap();
    assert_eq!((s.sd, s.cv_percent, s.ci95_low, s.ci95_high), (0.0, 0.0, 5.0, 5.0));
    assert!(matches!(summarize(&SampleSet::new("one", vec![1.0])), Err(Error::TooFewSamples { .. })));
    assert!(matches!(summarize(&SampleSet::new("z", vec![-1.0, 1.0])), Err(Error::ZeroMean)));
}

#[test]
fn paired_identical_samples() {
    let a = SampleSet::new("a", vec![1.0, 2.5, 3.0, 0.2]);
    let r = paired_t(&a, &a).unwrap();
    assert_eq!((r.mean_diff, r.t, r.p), (0.0, 0.0, 1.0));
}

#[test]
fn paired_textbook_example() {
    let diffs = [0.30, 0.27, 0.33, 0.41, 0.34];
    let a = SampleSet::new("a", vec![7.0, 7.5, 8.0, 6.5, 7.2]);
    let b = SampleSet::new("b", a.values.iter().zip(diffs).map(|(x, d)| x + d).collect());
    let r = paired_t(&a, &b).unwrap();
    // independent hand route: d̄ = 1.65/5, Σ(d − d̄)² = 0.011
    let sd = (0.011f64 / 4.0).sqrt();
    let t = 0.33 / (sd / 5f64.sqrt());
    assert!((r.mean_diff - 0.33).abs() < 1e-12);
    assert!((r.sd_diff - sd).abs() < 1e-9);
    assert!((r.t - t).abs() < 1e-6 && (r.t - 14.07).abs() < 0.01, "{}", r.t);
    assert!((r.cohens_d - 0.33 / sd).abs() < 1e-6 && (r.cohens_d - 6.29).abs() < 0.01);
    assert!(r.p < 0.001);
    assert!((r.cohens_d * 5f64.sqrt() - r.t).abs() < 1e-9);
}

#[test]
fn paired_constant_shift_is_degenerate() {
    let a = SampleSet::new("a", vec![1.0, 2.0, 4.0, 8.0, 16.0]);
    let b = SampleSet::new("b", a.values.iter().map(|x| x + 0.25).collect());
    assert!(matches!(paired_t(&a, &b), Err(Error::DegenerateDifferences)));
    let short = SampleSet::new("s", vec![1.0, 2.0]);
    assert!(matches!(paired_t(&a, &short), Err(Error::UnequalSamples(5, 2))));
}

#[test]
fn anova_reconstructs_reported_f() {
    let table = [(7.51, 0.59), (7.84, 0.58), (7.92, 0.57), (8.28, 0.58), (9.25, 0.61)];
    let groups: Vec<SampleSet> = table
        .iter()
        .enumerate()
        .map(|(i, &(m, s))| SampleSet::new(format!("g{i}"), with_moments(m, s)))
        .collect();
    let a = one_way_anova(&groups).unwrap();
    assert!((6.2..=6.7).contains(&a.f), "F = {}", a.f);
    assert!((0.001..=0.003).contains(&a.p), "p = {}", a.p);
    assert_eq!((a.df_between, a.df_within), (4, 20));
}

#[test]
fn anova_identical_groups() {
    let g = SampleSet::new("g", vec![1.0, 2.0, 3.0]);
    let a = one_way_anova(&[g.clone(), g.clone(), g]).unwrap();
    assert_eq!(a.f, 0.0);
    assert_eq!(a.p, 1.0);
    let flat = SampleSet::new("f", vec![2.0, 2.0]);
    assert!(matches!(
        one_way_anova(&[flat.clone(), SampleSet::new("h", vec![3.0, 3.0])]),
        Err(Error::DegenerateWithinVariance)
    ));
}

#[test]
fn two_group_anova_is_pooled_t_squared() {
    let a = SampleSet::new("a", vec![3.1, 2.7, 3.8, 3.3, 2.9]);
    let b = SampleSet::new("b", vec![3.9, 4.2, 3.5, 4.8, 4.0]);
    let n = 5.0;
    let sp2 = (sample_sd(&a.values).powi(2) + sample_sd(&b.values).powi(2)) / 2.0;
    let t = (b.mean() - a.mean()) / (sp2 * 2.0 / n).sqrt();
    let anova = one_way_anova(&[a, b]).unwrap();
    assert!((anova.f - t * t).abs() < 1e-9);
    assert!((anova.p - t_two_sided_p(t, 8.0)).abs() < 1e-12);
}

#[test]
fn bonferroni_examples() {
    assert_eq!(bonferroni(&[0.01, 0.02]).unwrap(), vec![0.02, 0.04]);
    assert_eq!(bonferroni(&[0.9, 0.9, 0.9]).unwrap(), vec![1.0, 1.0, 1.0]);
    assert_eq!(bonferroni(&[0.3]).unwrap(), vec![0.3]);
    assert!(matches!(bonferroni(&[0.5, 1.5]), Err(Error::InvalidProbability(_))));
}

#[test]
fn ci_width_shrinks_with_replication() {
    let base = [4.0, 5.5, 6.1, 4.9];
    let mut last = f64::INFINITY;
    for reps in 1..6 {
        let xs: Vec<f64> = base.iter().cycle().take(base.len() * reps).copied().collect();
        let s = summarize(&SampleSet::new("r", xs.clone())).unwrap();
        let width = s.ci95_high - s.ci95_low;
        let n = xs.len() as f64;
        let expected = 2.0 * t_quantile(0.975, n - 1.0) * sample_sd(&xs) / n.sqrt();
        assert!((width - expected).abs() < 1e-12);
        assert!(width < last);
        last = width;
    }
}

proptest! {
    #[test]
    fn cohens_d_times_root_n_is_t(values in prop::collection::vec((-5.0f64..5.0, -1.0f64..1.0), 2..12)) {
        let a = SampleSet::new("a", values.iter().map(|v| v.0).collect());
        let b = SampleSet::new("b", values.iter().map(|v| v.0 + v.1).collect());
        if let Ok(r) = paired_t(&a, &b) {
            prop_assert!((r.cohens_d * (r.n as f64).sqrt() - r.t).abs() <= 1e-9 * r.t.abs().max(1.0));
            prop_assert!((0.0..=1.0).contains(&r.p));
        }
    }

    #[test]
    fn shift_plus_vanishing_noise_recovers_shift(
        base in prop::collection::vec(-3.0f64..3.0, 5),
        shift in 0.1f64..2.0,
        scale in 1e-6f64..1e-3,
    ) {
        let noise = [0.3, -0.7, 0.1, 0.5, -0.2];
        let a = SampleSet::new("a", base.clone());
        let b = SampleSet::new("b", base.iter().zip(noise).map(|(x, e)| x + shift + scale * e).collect());
        let r = paired_t(&a, &b).unwrap();
        prop_assert!((r.mean_diff - shift).abs() < 1e-3);
    }
}
