//! Shared oracles for the integration tests.
#![allow(dead_code)]

use tcorb::ingest::CenteredImage;
use tcorb::orb::OrbConfig;

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub struct Oracle {
    pub mean: Vec<f64>,
    pub stdev: Vec<f64>,
    pub asym: Vec<f64>,
    pub area: Vec<f64>,
}

/// Direct per-pixel enumeration. Needs integer-km grid and annulus steps so
/// membership can be decided in exact integer arithmetic.
pub fn brute_force_orb(img: &CenteredImage, cfg: &OrbConfig) -> Oracle {
    let n = img.side();
    let c = (n as i64 - 1) / 2;
    let step = img.grid.step_km as i64;
    let r_step = cfg.r_step_km as i64;
    assert_eq!(step as f64, img.grid.step_km);
    assert_eq!(r_step as f64, cfg.r_step_km);
    let nr = cfg.n_annuli();
    let mut members: Vec<Vec<(f64, f64)>> = vec![Vec::new(); nr];
    for row in 0..n as i64 {
        for col in 0..n as i64 {
            let x = (col - c) * step;
            let y = (c - row) * step;
            let r2 = x * x + y * y;
            let k = (0..nr as i64).find(|&k| (k * r_step).pow(2) <= r2 && r2 < ((k + 1) * r_step).pow(2));
            if let Some(k) = k {
                let t = img.temps[(row * n as i64 + col) as usize];
                members[k as usize].push((t, (y as f64).atan2(x as f64)));
            }
        }
    }
    let mut o = Oracle {
        mean: Vec::new(),
        stdev: Vec::new(),
        asym: Vec::new(),
        area: Vec::new(),
    };
    for m in &members {
        let cnt = m.len() as f64;
        let mean = m.iter().map(|p| p.0).sum::<f64>() / cnt;
        let var = m.iter().map(|p| (p.0 - mean).powi(2)).sum::<f64>() / cnt;
        let re: f64 = m.iter().map(|&(t, th)| (t - mean) * th.cos()).sum();
        let im: f64 = m.iter().map(|&(t, th)| -(t - mean) * th.sin()).sum();
        o.mean.push(mean);
        o.stdev.push(var.sqrt());
        o.asym.push(2.0 / cnt * (re * re + im * im).sqrt());
    }
    for thr in cfg.c_grid() {
        let below = img.temps.iter().filter(|&&t| t <= thr).count();
        o.area.push(below as f64 / img.temps.len() as f64);
    }
    o
}
