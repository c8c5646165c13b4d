//! HURDAT2 best-track text.
//!
//! A storm block is a header line `AL092011, IRENE, 39,` followed by the
//! declared number of data lines:
//!
//! ```text
//! 20110821, 0000,  , TS, 15.0N,  59.0W,  45, 1011, ...wind radii...
//! ```
//!
//! Only the first eight data fields are read. A malformed block is rejected on
//! its own and parsing carries on with the next header.

use std::fmt::Write as _;

use chrono::{NaiveDate, NaiveDateTime, NaiveTime};

use crate::error::Error;

/// Status codes accepted in the status column.
pub const STATUS_CODES: &[&str] = &["TD", "TS", "HU", "EX", "SD", "SS", "LO", "WV", "DB"];

/// One best-track record.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackFix {
    /// Valid time, UTC.
    pub time: NaiveDateTime,
    /// Record identifier (`L` = landfall, ...), `None` when blank.
    pub record_id: Option<char>,
    pub status: String,
    /// Degrees north.
    pub lat: f64,
    /// Degrees east.
    pub lon: f64,
    /// Maximum sustained wind, kt.
    pub vmax: Option<i32>,
    /// Minimum central pressure, mb.
    pub pmin: Option<i32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StormTrack {
    pub storm_id: String,
    pub name: String,
    pub fixes: Vec<TrackFix>,
}

impl StormTrack {
    pub fn start(&self) -> Option<NaiveDateTime> {
        self.fixes.first().map(|f| f.time)
    }

    pub fn end(&self) -> Option<NaiveDateTime> {
        self.fixes.last().map(|f| f.time)
    }

    /// The fix valid exactly at `t`, if any.
    pub fn fix_at(&self, t: NaiveDateTime) -> Option<&TrackFix> {
        self.fixes
            .binary_search_by(|f| f.time.cmp(&t))
            .ok()
            .map(|i| &self.fixes[i])
    }

    /// Intensity at `t`, only when a fix exists at that time and reports it.
    pub fn vmax_at(&self, t: NaiveDateTime) -> Option<i32> {
        self.fix_at(t).and_then(|f| f.vmax)
    }
}

/// Tracks that parsed, plus one diagnostic per rejected block.
#[derive(Debug, Default)]
pub struct Hurdat2Parse {
    pub tracks: Vec<StormTrack>,
    pub rejected: Vec<Error>,
}

pub fn is_storm_id(s: &str) -> bool {
    let b = s.as_bytes();
    b.len() == 8 && b[..2].iter().all(u8::is_ascii_uppercase) && b[2..].iter().all(u8::is_ascii_digit)
}

struct Block {
    storm_id: String,
    name: String,
    declared: Option<usize>,
    header_line: usize,
    fixes: Vec<TrackFix>,
    rows: usize,
    failure: Option<Error>,
}

impl Block {
    fn fail(&mut self, line: usize, msg: impl Into<String>) {
        if self.failure.is_none() {
            self.failure = Some(Error::Track {
                storm_id: self.storm_id.clone(),
                line,
                msg: msg.into(),
            });
        }
    }

    fn finish(mut self, out: &mut Hurdat2Parse) {
        if self.failure.is_none() {
            match self.declared {
                Some(n) if n != self.rows => {
                    let line = self.header_line;
                    self.fail(line, format!("header declares {} rows, found {}", n, self.rows))
                }
                _ => {}
            }
        }
        match self.failure {
            Some(e) => out.rejected.push(e),
            None => out.tracks.push(StormTrack {
                storm_id: self.storm_id,
                name: self.name,
                fixes: self.fixes,
            }),
        }
    }
}

fn fields(line: &str) -> Vec<&str> {
    let mut f: Vec<&str> = line.split(',').map(str::trim).collect();
    while f.last().is_some_and(|s| s.is_empty()) {
        f.pop();
    }
    f
}

fn parse_coord(s: &str, pos: char, neg: char) -> Result<f64, String> {
    let suffix = s.chars().last().ok_or("empty coordinate")?;
    let body = &s[..s.len() - suffix.len_utf8()];
    let v: f64 = body
        .trim()
        .parse()
        .map_err(|_| format!("bad coordinate '{}'", s))?;
    if v < 0.0 || !v.is_finite() {
        return Err(format!("bad coordinate '{}'", s));
    }
    if suffix == pos {
        Ok(v)
    } else if suffix == neg {
        Ok(-v)
    } else {
        Err(format!("bad hemisphere in '{}'", s))
    }
}

fn parse_optional(s: &str, sentinel: i32, lo: i32, hi: i32, what: &str) -> Result<Option<i32>, String> {
    let v: i32 = s.parse().map_err(|_| format!("bad {} '{}'", what, s))?;
    if v == sentinel {
        Ok(None)
    } else if (lo..=hi).contains(&v) {
        Ok(Some(v))
    } else {
        Err(format!("{} {} outside [{}, {}]", what, v, lo, hi))
    }
}

fn parse_row(f: &[&str]) -> Result<TrackFix, String> {
    if f.len() < 8 {
        return Err(format!("data row has {} fields, need at least 8", f.len()));
    }
    let date = NaiveDate::parse_from_str(f[0], "%Y%m%d").map_err(|_| format!("bad date '{}'", f[0]))?;
    if f[1].len() != 4 {
        return Err(format!("bad time '{}'", f[1]));
    }
    let time = NaiveTime::parse_from_str(f[1], "%H%M").map_err(|_| format!("bad time '{}'", f[1]))?;
    let record_id = match f[2].len() {
        0 => None,
        1 => f[2].chars().next(),
        _ => return Err(format!("bad record identifier '{}'", f[2])),
    };
    let status = f[3];
    if !STATUS_CODES.contains(&status) {
        return Err(format!("unknown status '{}'", status));
    }
    let lat = parse_coord(f[4], 'N', 'S')?;
    let lon = parse_coord(f[5], 'E', 'W')?;
    if lat.abs() > 90.0 || lon.abs() > 180.0 {
        return Err(format!("position {} {} out of range", f[4], f[5]));
    }
    let vmax = parse_optional(f[6], -99, 0, 250, "vmax")?;
    let pmin = parse_optional(f[7], -999, 800, 1100, "pmin")?;
    Ok(TrackFix {
        time: date.and_time(time),
        record_id,
        status: status.to_string(),
        lat,
        lon,
        vmax,
        pmin,
    })
}

/// Parse HURDAT2 text. Never fails as a whole; bad blocks land in `rejected`.
pub fn parse_hurdat2(text: &str) -> Hurdat2Parse {
    let mut out = Hurdat2Parse::default();
    let mut current: Option<Block> = None;

    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let f = fields(line);
        if is_storm_id(f[0]) {
            if let Some(b) = current.take() {
                b.finish(&mut out);
            }
            let mut block = Block {
                storm_id: f[0].to_string(),
                name: f.get(1).map(|s| s.to_string()).unwrap_or_default(),
                declared: None,
                header_line: line_no,
                fixes: Vec::new(),
                rows: 0,
                failure: None,
            };
            if f.len() != 3 {
                block.fail(line_no, format!("header has {} fields, expected 3", f.len()));
            } else {
                match f[2].parse::<usize>() {
                    Ok(n) => block.declared = Some(n),
                    Err(_) => block.fail(line_no, format!("bad row count '{}'", f[2])),
                }
            }
            current = Some(block);
            continue;
        }
        match current.as_mut() {
            None => out.rejected.push(Error::Track {
                storm_id: String::new(),
                line: line_no,
                msg: "data row before any header".into(),
            }),
            Some(block) => {
                block.rows += 1;
                if block.failure.is_some() {
                    continue;
                }
                match parse_row(&f) {
                    Ok(fix) => {
                        if let Some(prev) = block.fixes.last() {
                            if fix.time <= prev.time {
                                block.fail(line_no, "fix times not strictly increasing");
                                continue;
                            }
                        }
                        block.fixes.push(fix);
                    }
                    Err(msg) => block.fail(line_no, msg),
                }
            }
        }
    }
    if let Some(b) = current.take() {
        b.finish(&mut out);
    }
    out
}

fn fmt_coord(v: f64, pos: char, neg: char) -> String {
    let h = if v < 0.0 { neg } else { pos };
    format!("{:.1}{}", v.abs(), h)
}

/// Serialize tracks in the HURDAT2 column layout (wind radii written as -999).
pub fn write_hurdat2(tracks: &[StormTrack]) -> String {
    let mut s = String::new();
    for t in tracks {
        let _ = writeln!(s, "{},{:>19},{:>7},", t.storm_id, t.name, t.fixes.len());
        for f in &t.fixes {
            let _ = write!(
                s,
                "{}, {}, {:>1}, {}, {:>5}, {:>6}, {:>3}, {:>4},",
                f.time.format("%Y%m%d"),
                f.time.format("%H%M"),
                f.record_id.unwrap_or(' '),
                f.status,
                fmt_coord(f.lat, 'N', 'S'),
                fmt_coord(f.lon, 'E', 'W'),
                f.vmax.unwrap_or(-99),
                f.pmin.unwrap_or(-999),
            );
            for _ in 0..12 {
                s.push_str(" -999,");
            }
            s.push('\n');
        }
    }
    s
}
