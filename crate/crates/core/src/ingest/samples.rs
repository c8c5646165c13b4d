use chrono::{Duration, NaiveDateTime, Timelike};

use super::frames::IrFrame;
use super::hurdat2::StormTrack;
use super::regrid::{regrid_to_storm, CenteredImage, GridSpec};
use crate::error::{Error, Result};

/// Storm-centred image paired with the best-track intensity at a synoptic time.
#[derive(Debug, Clone)]
pub struct Sample {
    pub storm_id: String,
    pub time: NaiveDateTime,
    pub image: CenteredImage,
    pub vmax: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct SampleConfig {
    pub cadence_hours: u32,
    pub tolerance_minutes: i64,
    pub grid: GridSpec,
}

impl Default for SampleConfig {
    fn default() -> Self {
        SampleConfig {
            cadence_hours: 6,
            tolerance_minutes: 90,
            grid: GridSpec::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SampleSummary {
    pub synoptic_times: usize,
    pub emitted: usize,
    pub no_frame: usize,
    pub no_vmax: usize,
}

/// Linear interpolation of the track centre at `t`.
pub fn interpolate_center(track: &StormTrack, t: NaiveDateTime) -> Result<(f64, f64)> {
    let fixes = &track.fixes;
    let (first, last) = match (fixes.first(), fixes.last()) {
        (Some(a), Some(b)) => (a, b),
        _ => return Err(Error::InsufficientData(format!("track {} has no fixes", track.storm_id))),
    };
    if t < first.time || t > last.time {
        return Err(Error::OutOfRange(t.to_string()));
    }
    let i = fixes.partition_point(|f| f.time <= t);
    // i >= 1 because t >= first.time
    let a = &fixes[i - 1];
    if a.time == t || i == fixes.len() {
        return Ok((a.lat, a.lon));
    }
    let b = &fixes[i];
    let span = (b.time - a.time).num_milliseconds() as f64;
    let w = (t - a.time).num_milliseconds() as f64 / span;
    let mut dlon = b.lon - a.lon;
    if dlon > 180.0 {
        dlon -= 360.0;
    } else if dlon < -180.0 {
        dlon += 360.0;
    }
    let mut lon = a.lon + w * dlon;
    if lon > 180.0 {
        lon -= 360.0;
    } else if lon <= -180.0 {
        lon += 360.0;
    }
    Ok((a.lat + w * (b.lat - a.lat), lon))
}

/// Synoptic times (multiples of `cadence_hours` from 00Z) within the track span.
pub fn synoptic_times(track: &StormTrack, cadence_hours: u32) -> Vec<NaiveDateTime> {
    let (Some(start), Some(end)) = (track.start(), track.end()) else {
        return Vec::new();
    };
    let cadence = i64::from(cadence_hours.max(1)) * 3600;
    let day = start.date().and_hms_opt(0, 0, 0).unwrap();
    let since = (start - day).num_seconds();
    let first = day + Duration::seconds((since + cadence - 1) / cadence * cadence);
    let mut out = Vec::new();
    let mut t = first;
    while t <= end {
        out.push(t);
        t += Duration::seconds(cadence);
    }
    out
}

/// Index of the frame nearest `t` within `tol`; ties go to the earlier frame.
pub fn nearest_frame(frames: &[IrFrame], t: NaiveDateTime, tol: Duration) -> Option<usize> {
    let i = frames.partition_point(|f| f.valid_time < t);
    let mut best: Option<(usize, Duration)> = None;
    for j in [i.wrapping_sub(1), i] {
        if let Some(f) = frames.get(j) {
            let d = (f.valid_time - t).abs();
            if d <= tol && best.is_none_or(|(_, bd)| d < bd) {
                best = Some((j, d));
            }
        }
    }
    best.map(|(j, _)| j)
}

/// Pair each synoptic time that has an intensity with the nearest frame.
pub fn build_samples(
    frames: &[IrFrame],
    track: &StormTrack,
    cfg: &SampleConfig,
) -> Result<(Vec<Sample>, SampleSummary)> {
    let times = synoptic_times(track, cfg.cadence_hours);
    let mut summary = SampleSummary {
        synoptic_times: times.len(),
        ..Default::default()
    };
    if frames.is_empty() {
        log::warn!("storm {}: no frames", track.storm_id);
        summary.no_frame = times.len();
        return Ok((Vec::new(), summary));
    }
    let tol = Duration::minutes(cfg.tolerance_minutes);
    let (start, end) = (track.start().unwrap(), track.end().unwrap());
    let mut out = Vec::new();
    for t in times {
        let Some(vmax) = track.vmax_at(t) else {
            summary.no_vmax += 1;
            continue;
        };
        let Some(fi) = nearest_frame(frames, t, tol) else {
            summary.no_frame += 1;
            continue;
        };
        let frame = &frames[fi];
        // frames just outside the span use the nearest end of the track
        let ft = frame.valid_time.clamp(start, end);
        let center = interpolate_center(track, ft)?;
        let image = regrid_to_storm(frame, center, cfg.grid)?;
        out.push(Sample {
            storm_id: track.storm_id.clone(),
            time: t,
            image,
            vmax: f64::from(vmax),
        });
    }
    summary.emitted = out.len();
    debug_assert!(out.iter().all(|s| s.time.minute() == 0));
    Ok((out, summary))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::hurdat2::TrackFix;

    fn t0() -> NaiveDateTime {
        NaiveDateTime::parse_from_str("2011-08-21 00:00", "%Y-%m-%d %H:%M").unwrap()
    }

    fn track(points: &[(i64, f64, f64, Option<i32>)]) -> StormTrack {
        StormTrack {
            storm_id: "AL012011".into(),
            name: "TEST".into(),
            fixes: points
                .iter()
                .map(|&(h, lat, lon, v)| TrackFix {
                    time: t0() + Duration::hours(h),
                    record_id: None,
                    status: "TS".into(),
                    lat,
                    lon,
                    vmax: v,
                    pmin: None,
                })
                .collect(),
        }
    }

    fn frame_at(minutes: i64) -> IrFrame {
        IrFrame {
            valid_time: t0() + Duration::minutes(minutes),
            channel: "IR".into(),
            origin_lat: 20.0,
            origin_lon: -60.0,
            step_deg: 0.1,
            width: 100,
            height: 100,
            temps: vec![250.0; 100 * 100],
        }
    }

    #[test]
    fn interpolation_endpoints_and_midpoint() {
        let tr = track(&[(0, 10.0, -50.0, Some(30)), (6, 12.0, -52.0, Some(35))]);
        assert_eq!(interpolate_center(&tr, t0()).unwrap(), (10.0, -50.0));
        let mid = interpolate_center(&tr, t0() + Duration::hours(3)).unwrap();
        assert!((mid.0 - 11.0).abs() < 1e-12 && (mid.1 + 51.0).abs() < 1e-12);
        assert!(matches!(
            interpolate_center(&tr, t0() - Duration::minutes(1)),
            Err(Error::OutOfRange(_))
        ));
    }

    #[test]
    fn interpolation_is_continuous() {
        let tr = track(&[(0, 10.0, -50.0, Some(30)), (6, 12.0, -52.0, Some(35)), (12, 13.0, -55.0, Some(40))]);
        // fastest segment moves 3 degrees of longitude in 6 h
        let rate = 3.0 / 21600.0;
        for h in [1i64, 6, 11] {
            let t = t0() + Duration::hours(h);
            let a = interpolate_center(&tr, t).unwrap();
            let b = interpolate_center(&tr, t - Duration::seconds(1)).unwrap();
            assert!((a.0 - b.0).abs() <= rate + 1e-6 && (a.1 - b.1).abs() <= rate + 1e-6);
            let c = interpolate_center(&tr, t - Duration::milliseconds(1)).unwrap();
            assert!((a.0 - c.0).abs() < 1e-6 && (a.1 - c.1).abs() < 1e-6);
        }
    }

    #[test]
    fn single_fix_track() {
        let tr = track(&[(0, 10.0, -50.0, Some(30))]);
        assert_eq!(interpolate_center(&tr, t0()).unwrap(), (10.0, -50.0));
        assert!(interpolate_center(&tr, t0() + Duration::hours(1)).is_err());
    }

    #[test]
    fn five_samples_over_a_day() {
        let tr = track(&(0..5).map(|i| (6 * i, 15.0, -55.0, Some(40))).collect::<Vec<_>>());
        let frames: Vec<_> = (0..5).map(|i| frame_at(360 * i)).collect();
        let cfg = SampleConfig {
            grid: GridSpec { half_width_km: 40.0, step_km: 4.0 },
            ..Default::default()
        };
        let (s, sum) = build_samples(&frames, &tr, &cfg).unwrap();
        assert_eq!(s.len(), 5);
        assert_eq!(sum.emitted, 5);
        for (i, smp) in s.iter().enumerate() {
            assert_eq!(smp.time, t0() + Duration::hours(6 * i as i64));
        }
    }

    #[test]
    fn gap_and_missing_vmax_are_skipped() {
        let tr = track(&[
            (0, 15.0, -55.0, Some(40)),
            (6, 15.0, -55.0, None),
            (12, 15.0, -55.0, Some(40)),
            (18, 15.0, -55.0, Some(40)),
        ]);
        // 12Z frame is 100 minutes late, outside the 90 minute window
        let frames = vec![frame_at(0), frame_at(360), frame_at(720 + 100), frame_at(1080 - 30)];
        let cfg = SampleConfig {
            grid: GridSpec { half_width_km: 40.0, step_km: 4.0 },
            ..Default::default()
        };
        let (s, sum) = build_samples(&frames, &tr, &cfg).unwrap();
        let hours: Vec<i64> = s.iter().map(|x| (x.time - t0()).num_hours()).collect();
        assert_eq!(hours, vec![0, 18]);
        assert_eq!(sum.no_vmax, 1);
        assert_eq!(sum.no_frame, 1);
    }

    #[test]
    fn empty_frames() {
        let tr = track(&[(0, 15.0, -55.0, Some(40)), (6, 15.0, -55.0, Some(40))]);
        let (s, sum) = build_samples(&[], &tr, &SampleConfig::default()).unwrap();
        assert!(s.is_empty());
        assert_eq!(sum.no_frame, 2);
    }

    #[test]
    fn synoptic_times_start_on_cadence() {
        let tr = track(&[(1, 15.0, -55.0, Some(40)), (13, 15.0, -55.0, Some(40))]);
        let hours: Vec<i64> = synoptic_times(&tr, 6).iter().map(|x| (*x - t0()).num_hours()).collect();
        assert_eq!(hours, vec![6, 12]);
    }
}
