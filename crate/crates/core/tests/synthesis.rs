use std::f64::consts::PI;

use lfm_audio::audio_io::{AudioBuffer, EnvelopeMatrix};
use lfm_audio::demod::demodulate;
use lfm_audio::filterbank::{analyze, design_filterbank, DEFAULT_CHANNELS, DEFAULT_F_HI, DEFAULT_F_LO};
use lfm_audio::gpssm::{kernel_to_ssm, sample_gp, KernelParams};
use lfm_audio::lfm::{build_layout, softplus, LfmParams};
use lfm_audio::synthesis::{
    fit_carriers, fit_modulator, fit_se_lengthscale, generate_envelopes, render, sample_latents, sample_modulator, sub_seed,
    CarrierModel, ChannelCarrier, ModulatorModel,
};
use lfm_audio::Error;
use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

const FRAME_RATE: f64 = 1600.0;

fn one_channel(damping: f64, s0: f64) -> (LfmParams, lfm_audio::lfm::StateLayout) {
    let mut p = LfmParams::new(1, 0, vec![KernelParams::new(0.05, 1.0).unwrap()], 1e-3, vec![], vec![0]);
    p.damping[0] = damping;
    p.sensitivity[0][0][0] = s0;
    (p, build_layout(1, 1, 0, 2).unwrap())
}

#[test]
fn constant_latents_give_a_flat_modulator() {
    let m = fit_modulator(&DMatrix::from_element(2, 800, 0.7), FRAME_RATE).unwrap();
    assert!(m.se_variance < 1e-12);
    let path = sample_modulator(&m, 500, FRAME_RATE, 3).unwrap();
    assert!(path.iter().all(|v| (v - path[0]).abs() < 1e-12));
}

fn two_bursts(frames: usize, centres: [f64; 2], width: f64) -> DMatrix<f64> {
    DMatrix::from_fn(1, frames, |_, k| {
        let t = k as f64 / FRAME_RATE;
        let bump: f64 = centres.iter().map(|c| (-0.5 * ((t - c) / width).powi(2)).exp()).sum();
        (0.05 + bump) * (2.0 * PI * 40.0 * t).sin()
    })
}

#[test]
fn burst_separation_bounds_the_modulator_lengthscale() {
    let lat = two_bursts(3200, [0.5, 1.5], 0.12);
    let m = fit_modulator(&lat, FRAME_RATE).unwrap();
    assert!(m.se_lengthscale < 1.0, "lengthscale {}", m.se_lengthscale);
    assert!(m.se_variance > 0.0);
    assert_eq!(m, fit_modulator(&lat, FRAME_RATE).unwrap());
}

/// Profile SE likelihood written out directly, variance maximized in closed form.
fn grid_oracle_nll(times: &[f64], y: &DVector<f64>, l: f64) -> f64 {
    let n = times.len();
    let k = DMatrix::from_fn(n, n, |i, j| (-0.5 * ((times[i] - times[j]) / l).powi(2)).exp() + if i == j { 1e-4 } else { 0.0 });
    let chol = k.cholesky().unwrap();
    let v = y.dot(&chol.solve(y)) / n as f64;
    0.5 * n as f64 * v.ln() + chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>()
}

#[test]
fn lengthscale_fit_matches_fine_grid_search() {
    let times: Vec<f64> = (0..200).map(|i| i as f64 * 0.01).collect();
    let sample = sample_gp(&kernel_to_ssm(&KernelParams::new(0.2, 1.0).unwrap()), 0.01, 200, 4).unwrap();
    let y = DVector::from_vec(sample);
    let (fitted, _) = fit_se_lengthscale(&times, &y);
    let grid: Vec<f64> = (0..400).map(|i| (0.02f64.ln() + (2.0f64.ln() - 0.02f64.ln()) * i as f64 / 399.0).exp()).collect();
    let best = grid.iter().copied().min_by(|a, b| grid_oracle_nll(&times, &y, *a).total_cmp(&grid_oracle_nll(&times, &y, *b))).unwrap();
    assert!((fitted / best - 1.0).abs() < 0.02, "fit {fitted} vs grid {best}");
    assert!(grid_oracle_nll(&times, &y, fitted) <= grid_oracle_nll(&times, &y, best) + 1e-6);
}

#[test]
fn identity_modulator_leaves_prior_samples_unchanged() {
    let (p, _) = one_channel(5.0, 1.0);
    let lat = sample_latents(&p, &ModulatorModel::identity(), 300, FRAME_RATE, 8).unwrap();
    let raw = sample_gp(&kernel_to_ssm(&p.kernels[0]), 1.0 / FRAME_RATE, 300, sub_seed(8, 0)).unwrap();
    assert_eq!(lat.row(0).iter().copied().collect::<Vec<_>>(), raw);
    assert_eq!(lat, sample_latents(&p, &ModulatorModel::identity(), 300, FRAME_RATE, 8).unwrap());
}

#[test]
fn modulation_makes_latents_sparser() {
    let (mut p, _) = one_channel(5.0, 1.0);
    p.kernels[0] = KernelParams::new(0.01, 1.0).unwrap();
    let m = ModulatorModel {
        se_lengthscale: 0.3,
        se_variance: 1.0,
        mean_offset: 0.0,
    };
    let small_fraction = |x: &DMatrix<f64>| {
        let peak = x.amax();
        x.iter().filter(|v| v.abs() < 0.1 * peak).count() as f64 / x.len() as f64
    };
    for seed in 0..5 {
        let plain = sample_latents(&p, &ModulatorModel::identity(), 8000, FRAME_RATE, seed).unwrap();
        let modulated = sample_latents(&p, &m, 8000, FRAME_RATE, seed).unwrap();
        assert!(small_fraction(&modulated) > small_fraction(&plain), "seed {seed}");
    }
}

#[test]
fn silent_forcing_decays_monotonically() {
    let (p, layout) = one_channel(20.0, 3.0);
    let lat = DMatrix::from_element(1, 400, -50.0);
    let env = generate_envelopes(&p, &layout, &lat, FRAME_RATE, &[1.0]).unwrap();
    let row: Vec<f64> = env.values.row(0).iter().copied().collect();
    assert!(row.windows(2).all(|w| w[1] < w[0]));
    assert!(row[399] < 0.01);
}

#[test]
fn step_input_settles_at_the_fixed_point() {
    let d = 30.0;
    let u = 0.8;
    let steps = (5.0 / (d / FRAME_RATE)).ceil() as usize;
    let settle = |s0: f64| {
        let (p, layout) = one_channel(d, s0);
        let lat = DMatrix::from_element(1, steps + 1, u);
        generate_envelopes(&p, &layout, &lat, FRAME_RATE, &[0.0]).unwrap().values[(0, steps)]
    };
    let fixed = 2.0 * softplus(u) / d;
    assert!((settle(2.0) / fixed - 1.0).abs() < 0.02);
    assert!((settle(4.0) / settle(2.0) - 2.0).abs() < 1e-9);
}

#[test]
fn runaway_parameters_name_the_step() {
    let (mut p, layout) = one_channel(1.0, 1.0);
    p.damping[0] = 0.0;
    p.sensitivity[0][0][0] = 1e307;
    let lat = DMatrix::from_element(1, 200, 800.0);
    match generate_envelopes(&p, &layout, &lat, FRAME_RATE, &[0.0]) {
        Err(Error::Unstable { step }) => assert!(step > 0),
        other => panic!("{other:?}"),
    }
}

fn bank() -> lfm_audio::filterbank::ErbFilterbank {
    design_filterbank(DEFAULT_F_LO, DEFAULT_F_HI, DEFAULT_CHANNELS, 16_000).unwrap()
}

#[test]
fn carrier_analysis_separates_tones_from_noise() {
    let fb = bank();
    let n = 16_000;
    let m = 8;
    let f0 = fb.center_freqs[m] * 1.01;
    let tone: Vec<f64> = (0..n).map(|i| (2.0 * PI * f0 * i as f64 / 16_000.0).sin()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let white: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
    let noise = fb.filter_channel(m, &white);
    let mut carriers = vec![vec![0.0; n]; fb.channels()];
    carriers[m] = tone;
    let cm = fit_carriers(&carriers, &fb).unwrap();
    let c = cm.channels[m];
    assert!(c.sinusoid_power / c.noise_power > 10.0);
    assert!((c.sinusoid_freq - f0).abs() < 2.0);
    assert_eq!((cm.channels[0].sinusoid_power, cm.channels[0].noise_power), (0.0, 0.0));

    carriers[m] = noise;
    let c = fit_carriers(&carriers, &fb).unwrap().channels[m];
    assert!(c.sinusoid_power / c.noise_power < 1.0, "{c:?}");
}

fn centre_tones(fb: &lfm_audio::filterbank::ErbFilterbank, noise_power: f64) -> CarrierModel {
    CarrierModel {
        channels: fb
            .center_freqs
            .iter()
            .map(|&f| ChannelCarrier {
                sinusoid_freq: f,
                sinusoid_power: 1.0,
                noise_power,
            })
            .collect(),
    }
}

#[test]
fn silence_renders_silence() {
    let fb = bank();
    let env = EnvelopeMatrix::new(DMatrix::zeros(fb.channels(), 100), FRAME_RATE, Vec::new()).unwrap();
    let out = render(&env, &centre_tones(&fb, 1.0), &fb, 1).unwrap();
    assert_eq!(out.len(), 1000);
    assert!(out.samples.iter().all(|s| *s == 0.0));
}

fn correlation(a: &[f64], b: &[f64]) -> f64 {
    let ma = a.iter().sum::<f64>() / a.len() as f64;
    let mb = b.iter().sum::<f64>() / b.len() as f64;
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

#[test]
fn rendered_subbands_carry_the_supplied_envelopes() {
    let fb = bank();
    let frames = 3200;
    let env = DMatrix::from_fn(fb.channels(), frames, |m, k| {
        let t = k as f64 / FRAME_RATE;
        1.0 + 0.8 * (2.0 * PI * (1.0 + 0.1 * m as f64) * t + m as f64).sin()
    });
    let env = EnvelopeMatrix::new(env, FRAME_RATE, Vec::new()).unwrap();
    // narrowband noise has slow envelope fluctuations of its own in the low
    // channels, so the carriers here are mostly tonal
    let cm = centre_tones(&fb, 0.1);
    let out = render(&env, &cm, &fb, 5).unwrap();
    assert!((out.peak() - 0.9).abs() < 1e-12);
    assert!(out.samples.iter().all(|s| s.is_finite()));
    assert_eq!(out, render(&env, &cm, &fb, 5).unwrap());
    let bands = analyze(&AudioBuffer::new(out.samples.clone(), 16_000).unwrap(), &fb).unwrap();
    // 100 ms at either end are left out
    let range = 160..frames - 160;
    for m in 0..fb.channels() {
        let d = demodulate(&bands.subbands[m], 20.0, 16_000.0, 10).unwrap();
        let supplied: Vec<f64> = env.values.row(m).iter().copied().collect();
        let r = correlation(&d.envelope[range.clone()], &supplied[range.clone()]);
        assert!(r > 0.9, "channel {m}: {r}");
    }
}
