//! Property tests over randomly generated inputs.

use chrono::{Duration, NaiveDate, NaiveDateTime};
use nalgebra::{DMatrix, SymmetricEigen};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tcorb::analogs::{
    adjusted_rand_index, affinity, bandwidth, distance_matrix, find_analogs, normalized_laplacian, spectral_cluster,
    Window,
};
use tcorb::eval::metrics::{intensity_metrics, structural_metrics, IntensityForecast, ForecastSet, TruthSet};
use tcorb::eval::{split_of, Split};
use tcorb::eval::config::SplitConfig;
use tcorb::ingest::hurdat2::STATUS_CODES;
use tcorb::ingest::{
    build_samples, interpolate_center, parse_hurdat2, regrid_to_storm, write_hurdat2, CenteredImage, GridSpec,
    IrFrame, SampleConfig, StormTrack, TrackFix,
};
use tcorb::intensity::{fit_gam, fit_logistic_lasso, GamConfig, IntensityTable, LassoOptions};
use tcorb::latent::{fit_pca, RankRule};
use tcorb::orb::{asymmetry_profile, levelset_area, radial_profile, OrbConfig, RadialStatistic};
use tcorb::structfc::{fit_var, forecast_var, VarModel};
use tcorb::synth::{render_scene, simulate_dynamics, StormSimConfig, MAX_SIM_KT, MIN_SIM_KT};

fn t0() -> NaiveDateTime {
    NaiveDate::from_ymd_opt(2015, 7, 1).unwrap().and_hms_opt(0, 0, 0).unwrap()
}

fn small_grid() -> GridSpec {
    GridSpec {
        half_width_km: 60.0,
        step_km: 4.0,
    }
}

fn small_orb() -> OrbConfig {
    OrbConfig {
        r_step_km: 4.0,
        r_max_km: 60.0,
        ..OrbConfig::default()
    }
}

/// Random image with temperatures on a quarter-kelvin lattice.
fn random_image(seed: u64, grid: GridSpec) -> CenteredImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = grid.side();
    CenteredImage {
        center_lat: 0.0,
        center_lon: 0.0,
        grid,
        valid_time: t0(),
        temps: (0..n * n).map(|_| f64::from(rng.random_range(720..1240)) / 4.0).collect(),
    }
}

fn transposed(img: &CenteredImage) -> CenteredImage {
    let n = img.side();
    let mut out = img.clone();
    for r in 0..n {
        for c in 0..n {
            out.temps[c * n + r] = img.temps[r * n + c];
        }
    }
    out
}

fn random_rows(seed: u64, n: usize, d: usize) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scales: Vec<f64> = (0..d).map(|_| rng.random_range(0.1..10.0)).collect();
    (0..n)
        .map(|_| scales.iter().map(|s| s * rng.random_range(-1.0..1.0)).collect())
        .collect()
}

fn fix_strategy() -> impl Strategy<Value = (Option<char>, usize, i32, i32, Option<i32>, Option<i32>)> {
    (
        prop_oneof![Just(None), Just(Some('L')), Just(Some('I'))],
        0..STATUS_CODES.len(),
        -899..=899i32,
        -1799..=1800i32,
        prop::option::of(0..=250i32),
        prop::option::of(800..=1100i32),
    )
}

fn track_strategy() -> impl Strategy<Value = StormTrack> {
    (1..=99u32, 1851..=2099i32, "[A-Z]{1,10}", prop::collection::vec(fix_strategy(), 1..30)).prop_map(
        |(num, year, name, fixes)| StormTrack {
            storm_id: format!("AL{:02}{}", num, year),
            name,
            fixes: fixes
                .into_iter()
                .enumerate()
                .map(|(i, (rid, st, lat, lon, vmax, pmin))| TrackFix {
                    time: t0() + Duration::hours(6 * i as i64),
                    record_id: rid,
                    status: STATUS_CODES[st].to_string(),
                    lat: f64::from(lat) / 10.0,
                    lon: f64::from(lon) / 10.0,
                    vmax,
                    pmin,
                })
                .collect(),
        },
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    // ------------------------------------------------------------ ingest

    #[test]
    fn hurdat2_round_trip(tracks in prop::collection::vec(track_strategy(), 1..5)) {
        let parsed = parse_hurdat2(&write_hurdat2(&tracks));
        prop_assert!(parsed.rejected.is_empty());
        prop_assert_eq!(parsed.tracks, tracks);
    }

    #[test]
    fn centre_is_exact_at_fixes_and_continuous(track in track_strategy(), frac in 0.0f64..1.0) {
        for f in &track.fixes {
            let (lat, lon) = interpolate_center(&track, f.time).unwrap();
            prop_assert_eq!(lat, f.lat);
            prop_assert!(lon == f.lon || (lon - f.lon).abs() == 360.0);
        }
        if track.fixes.len() >= 2 {
            // fastest segment motion per millisecond bounds the change over 1 ms
            let rate = track
                .fixes
                .windows(2)
                .map(|w| {
                    let ms = (w[1].time - w[0].time).num_milliseconds() as f64;
                    let dlon = (w[1].lon - w[0].lon).abs();
                    (w[1].lat - w[0].lat).abs().max(dlon.min(360.0 - dlon)) / ms
                })
                .fold(0.0, f64::max);
            let span = (track.fixes.last().unwrap().time - track.fixes[0].time).num_seconds() - 1;
            let t = track.fixes[0].time + Duration::seconds((span as f64 * frac) as i64);
            let a = interpolate_center(&track, t).unwrap();
            let b = interpolate_center(&track, t + Duration::milliseconds(1)).unwrap();
            prop_assert!((a.0 - b.0).abs() <= rate + 1e-9);
            let dlon = (a.1 - b.1).abs();
            prop_assert!(dlon.min(360.0 - dlon) <= rate + 1e-9);
        }
    }

    #[test]
    fn constant_frame_regrids_to_constant(lat in -40.0f64..40.0, lon in -179.0f64..179.0, temp in 190.0f32..300.0) {
        let frame = IrFrame {
            valid_time: t0(),
            channel: "IR".into(),
            origin_lat: lat + 2.0,
            origin_lon: lon - 2.0,
            step_deg: 0.05,
            width: 81,
            height: 81,
            temps: vec![temp; 81 * 81],
        };
        let img = regrid_to_storm(&frame, (lat, lon), small_grid()).unwrap();
        prop_assert_eq!(img.missing_count(), 0);
        // bilinear weights sum to one only up to rounding
        prop_assert!(img.temps.iter().all(|&t| (t - f64::from(temp)).abs() <= 1e-9));
    }

    #[test]
    fn sample_times_are_increasing_on_cadence(start_min in 0i64..1440, n in 2usize..20, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let start = t0() + Duration::minutes(start_min);
        let fixes: Vec<TrackFix> = (0..n)
            .map(|i| TrackFix {
                time: start + Duration::hours(6 * i as i64),
                record_id: None,
                status: "TS".into(),
                lat: 20.0,
                lon: -60.0,
                vmax: Some(50),
                pmin: None,
            })
            .collect();
        let track = StormTrack { storm_id: "AL012015".into(), name: "P".into(), fixes };
        let frames: Vec<IrFrame> = (0..(6 * n))
            .filter(|_| rng.random_range(0..3) != 0)
            .map(|i| IrFrame {
                valid_time: start + Duration::hours(i as i64) - Duration::hours(2),
                channel: "IR".into(),
                origin_lat: 22.0,
                origin_lon: -62.0,
                step_deg: 0.1,
                width: 41,
                height: 41,
                temps: vec![250.0; 41 * 41],
            })
            .collect();
        let cfg = SampleConfig { grid: GridSpec { half_width_km: 40.0, step_km: 8.0 }, ..SampleConfig::default() };
        let (samples, _) = build_samples(&frames, &track, &cfg).unwrap();
        for w in samples.windows(2) {
            prop_assert!(w[0].time < w[1].time);
        }
        for s in &samples {
            let secs = (s.time - s.time.date().and_hms_opt(0, 0, 0).unwrap()).num_seconds();
            prop_assert_eq!(secs % (6 * 3600), 0);
        }
    }

    // ------------------------------------------------------------ orb

    #[test]
    fn levelset_is_a_bounded_cumulative_fraction(seed in any::<u64>()) {
        let img = random_image(seed, small_grid());
        let area = levelset_area(&img, &small_orb()).unwrap().values;
        prop_assert!(area.iter().all(|a| (0.0..=1.0).contains(a)));
        prop_assert!(area.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn quarter_turns_leave_mean_and_levelset_unchanged(seed in any::<u64>()) {
        let cfg = small_orb();
        let img = random_image(seed, small_grid());
        let mean = radial_profile(&img, RadialStatistic::Mean, &cfg).values;
        let area = levelset_area(&img, &cfg).unwrap().values;
        let mut rot = img.clone();
        for _ in 0..3 {
            rot = rot.rotated_quarter();
            prop_assert_eq!(&radial_profile(&rot, RadialStatistic::Mean, &cfg).values, &mean);
            prop_assert_eq!(&levelset_area(&rot, &cfg).unwrap().values, &area);
        }
    }

    #[test]
    fn asymmetry_ignores_a_constant_offset(seed in any::<u64>(), offset in -40i32..40) {
        let cfg = small_orb();
        let img = random_image(seed, small_grid());
        let mut shifted = img.clone();
        shifted.temps.iter_mut().for_each(|t| *t += f64::from(offset));
        let a = asymmetry_profile(&img, 1, &cfg).unwrap().values;
        let b = asymmetry_profile(&shifted, 1, &cfg).unwrap().values;
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() <= 1e-9, "{} vs {}", x, y);
        }
    }

    #[test]
    fn traversal_order_does_not_matter(seed in any::<u64>()) {
        // transposing keeps every radius and permutes the pixel order
        let cfg = small_orb();
        let img = random_image(seed, small_grid());
        let tr = transposed(&img);
        for stat in [RadialStatistic::Mean, RadialStatistic::Stdev] {
            prop_assert_eq!(radial_profile(&img, stat, &cfg).values, radial_profile(&tr, stat, &cfg).values);
        }
        prop_assert_eq!(levelset_area(&img, &cfg).unwrap().values, levelset_area(&tr, &cfg).unwrap().values);
        let a = asymmetry_profile(&img, 1, &cfg).unwrap().values;
        let b = asymmetry_profile(&tr, 1, &cfg).unwrap().values;
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() <= 1e-9);
        }
    }

    // ------------------------------------------------------------ latent

    #[test]
    fn pca_basis_properties(seed in any::<u64>(), n in 3usize..25, d in 1usize..10, f in 0.3f64..1.0) {
        let rows = random_rows(seed, n, d);
        let basis = fit_pca(&rows, RankRule::VarianceFraction(f)).unwrap();
        let k = basis.k();
        prop_assert!(k >= 1 && k <= (n - 1).min(d));
        let gram = &basis.components * basis.components.transpose();
        prop_assert!((gram - DMatrix::identity(k, k)).abs().max() <= 1e-10);
        prop_assert!(basis.singular_values.windows(2).all(|w| w[0] >= w[1]));
        prop_assert!(basis.explained_fraction.windows(2).all(|w| w[0] <= w[1]));
        let z: Vec<f64> = (0..k).map(|i| (i as f64 - 1.5) * 0.7).collect();
        let back = basis.project(&basis.reconstruct(&z).unwrap()).unwrap();
        for (a, b) in z.iter().zip(&back) {
            prop_assert!((a - b).abs() <= 1e-10);
        }
        let again = fit_pca(&rows, RankRule::VarianceFraction(f)).unwrap();
        prop_assert_eq!(again, basis);
    }

    #[test]
    fn full_rank_explains_everything(seed in any::<u64>(), d in 1usize..8) {
        let rows = random_rows(seed, d + 6, d);
        let basis = fit_pca(&rows, RankRule::Fixed(d)).unwrap();
        prop_assert!((basis.explained_fraction.last().unwrap() - 1.0).abs() <= 1e-8);
    }

    // ------------------------------------------------------------ structfc

    #[test]
    fn exact_var_has_no_residual(seed in any::<u64>(), p in 1usize..4, k in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let coefs: Vec<DMatrix<f64>> = (0..p)
            .map(|_| DMatrix::from_fn(k, k, |_, _| rng.random_range(-0.3..0.3) / p as f64))
            .collect();
        let b: Vec<f64> = (0..k).map(|_| rng.random_range(-1.0..1.0)).collect();
        let truth = VarModel { order: p, intercept: b, coefs, lambda: 0.0, residual_var: vec![0.0; k] };
        let series: Vec<Vec<Vec<f64>>> = (0..3)
            .map(|_| {
                let mut s: Vec<Vec<f64>> = (0..p).map(|_| (0..k).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
                for _ in 0..40 {
                    let next = truth.predict_next(&s);
                    s.push(next);
                }
                s
            })
            .collect();
        let fit = fit_var(&series, p, 0.0).unwrap();
        for s in &series {
            for t in p..s.len() {
                let pred = fit.predict_next(&s[..t]);
                for (a, b) in pred.iter().zip(&s[t]) {
                    prop_assert!((a - b).abs() <= 1e-8);
                }
            }
        }
    }

    #[test]
    fn ridge_norm_shrinks(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let series: Vec<Vec<Vec<f64>>> = (0..2)
            .map(|_| (0..30).map(|_| (0..3).map(|_| rng.random_range(-1.0..1.0)).collect()).collect())
            .collect();
        let norms: Vec<f64> = [0.0, 0.01, 0.1, 1.0, 10.0, 100.0]
            .iter()
            .map(|&l| fit_var(&series, 2, l).unwrap().coef_norm())
            .collect();
        prop_assert!(norms.windows(2).all(|w| w[1] <= w[0] + 1e-12), "{:?}", norms);
    }

    #[test]
    fn forecast_is_linear_in_history_without_intercept(seed in any::<u64>(), a in -2.0f64..2.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (p, k) = (2, 3);
        let model = VarModel {
            order: p,
            intercept: vec![0.0; k],
            coefs: (0..p).map(|_| DMatrix::from_fn(k, k, |_, _| rng.random_range(-0.5..0.5))).collect(),
            lambda: 0.0,
            residual_var: vec![0.0; k],
        };
        let h = |rng: &mut ChaCha8Rng| -> Vec<Vec<f64>> { (0..p).map(|_| (0..k).map(|_| rng.random_range(-3.0..3.0)).collect()).collect() };
        let (h1, h2) = (h(&mut rng), h(&mut rng));
        let mix: Vec<Vec<f64>> = h1.iter().zip(&h2).map(|(x, y)| x.iter().zip(y).map(|(u, v)| a * u + (1.0 - a) * v).collect()).collect();
        let (f1, f2, fm) = (forecast_var(&model, &h1, 4).unwrap(), forecast_var(&model, &h2, 4).unwrap(), forecast_var(&model, &mix, 4).unwrap());
        for s in 0..4 {
            for j in 0..k {
                prop_assert!((fm[s][j] - (a * f1[s][j] + (1.0 - a) * f2[s][j])).abs() <= 1e-10);
            }
        }
    }

    // ------------------------------------------------------------ synth

    #[test]
    fn rendered_scenes_stay_in_physical_range(seed in any::<u64>(), noise in 0.0f64..200.0, amp in 0.0f64..100.0) {
        let mut p = StormSimConfig::shallow_asymmetric().scene;
        p.noise_sd = noise;
        p.asym_amp = amp;
        p.seed = seed;
        let img = render_scene(&p, GridSpec { half_width_km: 160.0, step_km: 8.0 }).unwrap();
        prop_assert!(img.temps.iter().all(|t| (150.0..=340.0).contains(t)));
    }

    #[test]
    fn simulated_intensities_stay_in_range(seed in any::<u64>(), gamma in 0.0f64..5.0, sd in 0.0f64..30.0) {
        let cfg = StormSimConfig { gamma, intensity_noise_sd: sd, depth_noise_sd: sd, ..StormSimConfig::deep_symmetric() };
        let (_, v) = simulate_dynamics(&cfg, seed).unwrap();
        prop_assert!(v.iter().all(|x| (MIN_SIM_KT..=MAX_SIM_KT).contains(x)));
    }

    #[test]
    fn noise_free_structure_drives_intensity(d0 in 65.0f64..85.0, gamma in 0.1f64..0.8) {
        let cfg = StormSimConfig {
            gamma,
            depth_noise_sd: 0.0,
            intensity_noise_sd: 0.0,
            initial_depth: Some(d0),
            initial_intensity: 100.0,
            steps: 12,
            ..StormSimConfig::deep_symmetric()
        };
        let (d, v) = simulate_dynamics(&cfg, 1).unwrap();
        prop_assume!(d0 != cfg.reference_depth);
        prop_assert!(v.iter().all(|x| *x > MIN_SIM_KT && *x < MAX_SIM_KT));
        let xs: Vec<f64> = d[..d.len() - 1].iter().map(|x| x - cfg.reference_depth).collect();
        let ys: Vec<f64> = v.windows(2).map(|w| w[1] - w[0]).collect();
        let mx = xs.iter().sum::<f64>() / xs.len() as f64;
        let my = ys.iter().sum::<f64>() / ys.len() as f64;
        let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
        let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
        let syy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
        prop_assert!((sxy / (sxx * syy).sqrt() - 1.0).abs() <= 1e-9);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    // ------------------------------------------------------------ intensity

    #[test]
    fn gam_smoothers_are_centred_and_objective_falls(seed in any::<u64>(), d in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<Vec<f64>> = (0..80).map(|_| (0..d).map(|_| rng.random_range(-3.0..3.0)).collect()).collect();
        let y: Vec<f64> = x.iter().map(|r| r.iter().map(|v| v.sin() + 0.1 * v * v).sum::<f64>() + rng.random_range(-0.2..0.2)).collect();
        let names: Vec<String> = (0..d).map(|j| format!("x{}", j)).collect();
        let fit = fit_gam(&x, &y, &names, &GamConfig::default()).unwrap();
        for (j, s) in fit.model.smoothers.iter().enumerate() {
            let m = x.iter().map(|r| s.eval(r[j])).sum::<f64>() / x.len() as f64;
            prop_assert!(m.abs() <= 1e-8);
        }
        for w in fit.objective.windows(2) {
            prop_assert!(w[1] <= w[0] * (1.0 + 1e-12));
        }
    }

    #[test]
    fn lasso_support_shrinks_with_lambda(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<Vec<f64>> = (0..60).map(|_| (0..5).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
        let y: Vec<bool> = x.iter().map(|r| r[0] - 0.5 * r[1] + rng.random_range(-1.5..1.5) > 0.0).collect();
        prop_assume!(y.iter().any(|&b| b) && y.iter().any(|&b| !b));
        let counts: Vec<usize> = [0.001, 0.01, 0.1, 1.0]
            .iter()
            .map(|&l| fit_logistic_lasso(&x, &y, l, &LassoOptions::default()).unwrap().model.nonzero())
            .collect();
        prop_assert!(counts.windows(2).all(|w| w[1] <= w[0]), "{:?}", counts);
    }

    #[test]
    fn lasso_predictions_survive_affine_rescaling(seed in any::<u64>(), a in prop_oneof![-5.0f64..-0.2, 0.2f64..5.0], b in -10.0f64..10.0, col in 0usize..3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<Vec<f64>> = (0..50).map(|_| (0..3).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
        let y: Vec<bool> = x.iter().map(|r| r[0] + r[2] + rng.random_range(-1.0..1.0) > 0.0).collect();
        prop_assume!(y.iter().any(|&v| v) && y.iter().any(|&v| !v));
        let xs: Vec<Vec<f64>> = x.iter().map(|r| { let mut r = r.clone(); r[col] = a * r[col] + b; r }).collect();
        let opts = LassoOptions::default();
        let m1 = fit_logistic_lasso(&x, &y, 0.02, &opts).unwrap().model;
        let m2 = fit_logistic_lasso(&xs, &y, 0.02, &opts).unwrap().model;
        for (r, rs) in x.iter().zip(&xs) {
            prop_assert!((m1.predict_ri(r).unwrap() - m2.predict_ri(rs).unwrap()).abs() <= 1e-6);
        }
    }

    // ------------------------------------------------------------ analogs

    #[test]
    fn graph_matrices_are_well_formed(seed in any::<u64>(), n in 2usize..30) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let windows: Vec<Window> = (0..n)
            .map(|i| Window {
                storm_id: format!("SY{:02}2000", i + 1),
                start: t0(),
                values: (0..3).map(|_| (0..2).map(|_| rng.random_range(-3.0..3.0)).collect()).collect(),
            })
            .collect();
        let d = distance_matrix(&windows).unwrap();
        let a = affinity(&d, bandwidth(&d));
        for i in 0..n {
            prop_assert_eq!(a[(i, i)], 1.0);
            for j in 0..n {
                prop_assert!(a[(i, j)] > 0.0 && a[(i, j)] <= 1.0);
            }
        }
        let lap = normalized_laplacian(&a);
        prop_assert!((&lap - lap.transpose()).abs().max() <= 1e-12);
        let ev = SymmetricEigen::new(lap).eigenvalues;
        prop_assert!(ev.min() >= -1e-8);
        prop_assert!(ev.min() <= 1e-8);

        let found = find_analogs(&windows[0], &windows, n, false).unwrap();
        prop_assert!(found.windows(2).all(|w| w[0].distance <= w[1].distance));
    }

    #[test]
    fn cluster_labels_survive_permutation(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let windows: Vec<Window> = (0..24)
            .map(|i| {
                let c = if i % 2 == 0 { 0.0 } else { 6.0 };
                Window {
                    storm_id: format!("SY{:02}2000", i + 1),
                    start: t0(),
                    values: (0..3).map(|_| (0..2).map(|_| c + rng.random_range(-1.0..1.0)).collect()).collect(),
                }
            })
            .collect();
        let base = spectral_cluster(&distance_matrix(&windows).unwrap(), 2, 3).unwrap().labels;
        let mut perm: Vec<usize> = (0..windows.len()).collect();
        for i in (1..perm.len()).rev() {
            perm.swap(i, rng.random_range(0..=i));
        }
        let permuted: Vec<Window> = perm.iter().map(|&i| windows[i].clone()).collect();
        let labels = spectral_cluster(&distance_matrix(&permuted).unwrap(), 2, 3).unwrap().labels;
        let mut back = vec![0; labels.len()];
        for (pos, &i) in perm.iter().enumerate() {
            back[i] = labels[pos];
        }
        prop_assert_eq!(adjusted_rand_index(&back, &base), 1.0);
    }

    // ------------------------------------------------------------ evalcli

    #[test]
    fn rmse_bounds_bias(errs in prop::collection::vec(-50.0f64..50.0, 1..40)) {
        let mut table = IntensityTable::default();
        let mut fc = Vec::new();
        for (i, e) in errs.iter().enumerate() {
            let t = t0() + Duration::hours(6 * i as i64);
            table.insert("AL012015", t + Duration::hours(6), 80.0);
            fc.push(IntensityForecast { storm_id: "AL012015".into(), issue_time: t, horizon_hours: 6, model: "m".into(), v_hat: 80.0 + e });
        }
        let r = intensity_metrics(&fc, &table, &[6]);
        let row = r.get(6, "m").unwrap();
        prop_assert_eq!(row.n, errs.len());
        prop_assert!(row.rmse.unwrap() + 1e-12 >= row.bias.unwrap().abs());
    }

    #[test]
    fn structural_report_is_symmetric(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows = random_rows(seed, 10, 5);
        let basis = fit_pca(&rows, RankRule::Fixed(3)).unwrap();
        let (mut a, mut b, mut truth) = (ForecastSet::new(), ForecastSet::new(), TruthSet::new());
        for i in 0..8 {
            let t = t0() + Duration::hours(6 * i);
            let v = |rng: &mut ChaCha8Rng| -> Vec<f64> { (0..5).map(|_| rng.random_range(-3.0..3.0)).collect() };
            truth.insert(("AL012015".into(), t + Duration::hours(6)), v(&mut rng));
            a.insert(("AL012015".into(), t, 6), v(&mut rng));
            if rng.random_range(0..4) != 0 {
                b.insert(("AL012015".into(), t, 6), v(&mut rng));
            }
        }
        let ab = structural_metrics(&a, &b, &truth, &basis, &[6]).unwrap();
        let ba = structural_metrics(&b, &a, &truth, &basis, &[6]).unwrap();
        prop_assert_eq!(ab.get(6, "A_vs_B"), ba.get(6, "A_vs_B"));
        prop_assert_eq!(ab.get(6, "A_vs_truth").unwrap().mean_distance, ba.get(6, "B_vs_truth").unwrap().mean_distance);
    }

    #[test]
    fn storm_split_is_a_function_of_the_id(ids in prop::collection::vec("[A-Z]{2}[0-9]{6}", 1..50)) {
        let cfg = SplitConfig::default();
        for id in &ids {
            let s = split_of(id, &cfg);
            prop_assert_eq!(s, split_of(id, &cfg));
            prop_assert!(matches!(s, Split::Train | Split::Validation | Split::Test));
        }
    }
}
