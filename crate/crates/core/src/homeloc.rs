//! Home-area inference from GPS pings and time-windowed tile aggregation.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt;
use std::io::Read;
use std::path::Path;
use std::str::FromStr;

use chrono::NaiveDate;
use indexmap::IndexMap;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{AreaSet, CountTable, Ping, PingStream};

/// Minutes after local midnight, `0..1440`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct ClockTime(u16);

impl ClockTime {
    pub fn new(hour: u16, minute: u16) -> Result<Self> {
        if hour > 23 || minute > 59 {
            return Err(Error::domain(format!("invalid clock time {hour}:{minute}")));
        }
        Ok(ClockTime(hour * 60 + minute))
    }

    pub fn minutes(self) -> u16 {
        self.0
    }
}

impl FromStr for ClockTime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (h, m) = s
            .trim()
            .split_once(':')
            .ok_or_else(|| Error::schema(format!("clock time `{s}` is not HH:MM")))?;
        let h = h.parse().map_err(|_| Error::schema(format!("bad hour in `{s}`")))?;
        let m = m.parse().map_err(|_| Error::schema(format!("bad minute in `{s}`")))?;
        ClockTime::new(h, m)
    }
}

impl fmt::Display for ClockTime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:02}:{:02}", self.0 / 60, self.0 % 60)
    }
}

impl Serialize for ClockTime {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for ClockTime {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Rule for assigning a device to a home area.
///
/// A device is homed in the area holding the most nighttime pings when the
/// device has at least `min_night_pings` mapped nighttime pings in total and
/// that area's share is strictly above `modal_share_threshold`. A tie for the
/// top area yields no home.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HomeRule {
    pub night_start: ClockTime,
    pub night_end: ClockTime,
    pub min_night_pings: u32,
    pub modal_share_threshold: f64,
    /// Offset of the data's local civil time from UTC.
    pub utc_offset_minutes: i32,
}

impl Default for HomeRule {
    fn default() -> Self {
        HomeRule {
            night_start: ClockTime(22 * 60),
            night_end: ClockTime(6 * 60),
            min_night_pings: 2,
            modal_share_threshold: 0.5,
            utc_offset_minutes: 0,
        }
    }
}

impl HomeRule {
    pub fn validate(&self) -> Result<()> {
        if self.night_start == self.night_end {
            return Err(Error::domain("night window is empty"));
        }
        if self.min_night_pings < 1 {
            return Err(Error::domain("min_night_pings must be at least 1"));
        }
        if !(self.modal_share_threshold > 0.0 && self.modal_share_threshold <= 1.0) {
            return Err(Error::domain("modal_share_threshold must lie in (0, 1]"));
        }
        Ok(())
    }

    /// Parse and apply a `HH:MM-HH:MM` window.
    pub fn with_night_window(mut self, window: &str) -> Result<Self> {
        let (a, b) = window
            .split_once('-')
            .ok_or_else(|| Error::schema(format!("night window `{window}` is not HH:MM-HH:MM")))?;
        self.night_start = a.parse()?;
        self.night_end = b.parse()?;
        self.validate()?;
        Ok(self)
    }

    /// Whether a UTC epoch timestamp falls in the night window, in local time.
    pub fn is_night(&self, timestamp: i64) -> bool {
        let local = timestamp + i64::from(self.utc_offset_minutes) * 60;
        let minute = (local.rem_euclid(86_400) / 60) as u16;
        let (s, e) = (self.night_start.0, self.night_end.0);
        if s < e {
            minute >= s && minute < e
        } else {
            minute >= s || minute < e
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct HomeOutcome {
    pub home: Option<String>,
    /// Nighttime pings that mapped to an area.
    pub night_pings: usize,
    /// Nighttime pings outside every area.
    pub unmapped: usize,
}

/// Infer one device's home area.
pub fn detect_home(pings: &[Ping], areas: &AreaSet, rule: &HomeRule) -> HomeOutcome {
    let mut per_area: BTreeMap<usize, usize> = BTreeMap::new();
    let mut unmapped = 0;
    for p in pings.iter().filter(|p| rule.is_night(p.timestamp)) {
        match areas.locate([p.lon, p.lat]) {
            Some(i) => *per_area.entry(i).or_default() += 1,
            None => unmapped += 1,
        }
    }
    let total: usize = per_area.values().sum();
    let mut home = None;
    if total >= rule.min_night_pings as usize {
        let top = per_area.values().copied().max().unwrap_or(0);
        let mut leaders = per_area.iter().filter(|(_, &c)| c == top);
        if let (Some((&idx, _)), None) = (leaders.next(), leaders.next()) {
            if top as f64 / total as f64 > rule.modal_share_threshold {
                home = Some(areas.areas()[idx].id.clone());
            }
        }
    }
    HomeOutcome {
        home,
        night_pings: total,
        unmapped,
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct HomeDetection {
    /// Device id to home area id, for homed devices only.
    pub homes: BTreeMap<String, String>,
    pub n_devices: usize,
    pub unmapped_pings: usize,
}

/// Run [`detect_home`] for every device in the stream.
pub fn detect_homes(stream: &PingStream, areas: &AreaSet, rule: &HomeRule) -> HomeDetection {
    let mut by_device: BTreeMap<&str, Vec<Ping>> = BTreeMap::new();
    for p in &stream.pings {
        by_device.entry(p.device_id.as_str()).or_default().push(p.clone());
    }
    let outcomes: Vec<(&str, HomeOutcome)> = by_device
        .par_iter()
        .map(|(d, pings)| (*d, detect_home(pings, areas, rule)))
        .collect();
    let mut out = HomeDetection {
        n_devices: outcomes.len(),
        ..Default::default()
    };
    for (device, o) in outcomes {
        out.unmapped_pings += o.unmapped;
        if let Some(h) = o.home {
            out.homes.insert(device.to_string(), h);
        }
    }
    out
}

/// Count homed devices per area. Every area gets a row, zero when empty.
pub fn aggregate_homes(homes: &BTreeMap<String, String>, areas: &AreaSet, source_id: &str) -> Result<CountTable> {
    let mut counts: IndexMap<String, f64> = areas.ids().map(|id| (id.to_string(), 0.0)).collect();
    for (device, area) in homes {
        match counts.get_mut(area) {
            Some(c) => *c += 1.0,
            None => {
                return Err(Error::MissingKey {
                    key: format!("{area} (home of {device})"),
                    table: "area set".into(),
                })
            }
        }
    }
    Ok(CountTable {
        source_id: source_id.to_string(),
        reference_period: None,
        rows: counts,
    })
}

/// Bing Maps tile address.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TileKey {
    level: u8,
    x: u32,
    y: u32,
}

pub const MIN_TILE_LEVEL: u8 = 1;
pub const MAX_TILE_LEVEL: u8 = 23;

impl TileKey {
    pub fn new(level: u8, x: u32, y: u32) -> Result<Self> {
        if !(MIN_TILE_LEVEL..=MAX_TILE_LEVEL).contains(&level) {
            return Err(Error::domain(format!("tile level {level} outside [1, 23]")));
        }
        let side = 1u32 << level;
        if x >= side || y >= side {
            return Err(Error::domain(format!("tile ({x}, {y}) outside level {level}")));
        }
        Ok(TileKey { level, x, y })
    }

    pub fn level(&self) -> u8 {
        self.level
    }

    pub fn x(&self) -> u32 {
        self.x
    }

    pub fn y(&self) -> u32 {
        self.y
    }

    pub fn from_quadkey(quadkey: &str) -> Result<Self> {
        let level = u8::try_from(quadkey.len()).map_err(|_| Error::domain("quadkey too long"))?;
        if !(MIN_TILE_LEVEL..=MAX_TILE_LEVEL).contains(&level) {
            return Err(Error::domain(format!("quadkey `{quadkey}` has level outside [1, 23]")));
        }
        let (mut x, mut y) = (0u32, 0u32);
        for (i, ch) in quadkey.chars().enumerate() {
            let mask = 1u32 << (level as usize - 1 - i);
            match ch {
                '0' => {}
                '1' => x |= mask,
                '2' => y |= mask,
                '3' => {
                    x |= mask;
                    y |= mask;
                }
                _ => return Err(Error::domain(format!("quadkey `{quadkey}` has digit `{ch}`"))),
            }
        }
        TileKey::new(level, x, y)
    }

    pub fn quadkey(&self) -> String {
        (1..=self.level)
            .rev()
            .map(|i| {
                let mask = 1u32 << (i - 1);
                let mut digit = b'0';
                if self.x & mask != 0 {
                    digit += 1;
                }
                if self.y & mask != 0 {
                    digit += 2;
                }
                digit as char
            })
            .collect()
    }

    fn map_size(level: u8) -> f64 {
        256.0 * f64::from(1u32 << level)
    }

    /// Tile containing a lon/lat point at `level`.
    pub fn containing(lon: f64, lat: f64, level: u8) -> Result<Self> {
        if !(MIN_TILE_LEVEL..=MAX_TILE_LEVEL).contains(&level) {
            return Err(Error::domain(format!("tile level {level} outside [1, 23]")));
        }
        let lat = lat.clamp(-crate::ingest::MAX_MERCATOR_LAT, crate::ingest::MAX_MERCATOR_LAT);
        let lon = lon.clamp(-180.0, 180.0);
        let size = Self::map_size(level);
        let sin_lat = lat.to_radians().sin();
        let px = (lon + 180.0) / 360.0 * size;
        let py = (0.5 - ((1.0 + sin_lat) / (1.0 - sin_lat)).ln() / (4.0 * PI)) * size;
        let max = (1u32 << level) - 1;
        let tile = |p: f64| ((p / 256.0).floor().max(0.0) as u32).min(max);
        TileKey::new(level, tile(px), tile(py))
    }

    /// Lon/lat of a global pixel coordinate at this tile's level.
    fn pixel_to_lonlat(&self, px: f64, py: f64) -> (f64, f64) {
        let size = Self::map_size(self.level);
        let lon = px / size * 360.0 - 180.0;
        let yy = 0.5 - py / size;
        let lat = 90.0 - 360.0 * (-yy * 2.0 * PI).exp().atan() / PI;
        (lon, lat)
    }
}

impl fmt::Display for TileKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.quadkey())
    }
}

/// WGS84 centre of a tile.
pub fn tile_center(key: &TileKey) -> (f64, f64) {
    key.pixel_to_lonlat((f64::from(key.x) + 0.5) * 256.0, (f64::from(key.y) + 0.5) * 256.0)
}

/// The three daily 8-hour aggregation windows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TimeWindow {
    /// 00:00-08:00
    W1,
    /// 08:00-16:00
    W2,
    /// 16:00-24:00
    W3,
}

impl FromStr for TimeWindow {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.trim() {
            "W1" | "w1" | "00-08" | "00:00-08:00" => TimeWindow::W1,
            "W2" | "w2" | "08-16" | "08:00-16:00" => TimeWindow::W2,
            "W3" | "w3" | "16-24" | "16:00-24:00" | "16:00-00:00" => TimeWindow::W3,
            other => return Err(Error::schema(format!("unknown time window `{other}`"))),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TileCountRecord {
    pub date: NaiveDate,
    pub window: TimeWindow,
    pub tile: TileKey,
    pub count: f64,
}

/// Load a CSV with header `date,window,quadkey,count`.
pub fn load_tile_counts(path: &Path) -> Result<Vec<TileCountRecord>> {
    read_tile_counts(std::fs::File::open(path).map_err(|e| Error::Io {
        path: path.into(),
        source: e,
    })?)
}

pub fn read_tile_counts<R: Read>(input: R) -> Result<Vec<TileCountRecord>> {
    let mut rdr = csv::Reader::from_reader(input);
    let header: Vec<String> = rdr
        .headers()
        .map_err(|e| Error::Parse {
            line: 1,
            message: e.to_string(),
        })?
        .iter()
        .map(|s| s.trim().to_string())
        .collect();
    if header != ["date", "window", "quadkey", "count"] {
        return Err(Error::schema(format!(
            "expected header `date,window,quadkey,count`, found `{}`",
            header.join(",")
        )));
    }
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::Parse {
            line: e.position().map(|p| p.line()).unwrap_or(0),
            message: e.to_string(),
        })?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        let field = |i: usize| rec.get(i).unwrap_or("").trim();
        let parse_err = |message: String| Error::Parse { line, message };
        let date = NaiveDate::parse_from_str(field(0), "%Y-%m-%d")
            .map_err(|e| parse_err(format!("bad date `{}`: {e}", field(0))))?;
        let window = field(1).parse().map_err(|e: Error| parse_err(e.to_string()))?;
        let tile = TileKey::from_quadkey(field(2)).map_err(|e| parse_err(e.to_string()))?;
        let count: f64 = field(3)
            .parse()
            .map_err(|_| parse_err(format!("count `{}` is not a number", field(3))))?;
        if !count.is_finite() || count < 0.0 {
            return Err(Error::domain(format!("tile count on line {line} is negative or not finite")));
        }
        out.push(TileCountRecord {
            date,
            window,
            tile,
            count,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct WindowAggregate {
    pub table: CountTable,
    /// Quadkeys of tiles whose centre fell outside every area.
    pub dropped_tiles: Vec<String>,
}

/// Average each tile's counts over the dates it reports in the selected
/// window, then assign each tile mean to the area containing the tile centre.
pub fn window_average_counts(
    records: &[TileCountRecord],
    window: TimeWindow,
    areas: &AreaSet,
    source_id: &str,
) -> Result<WindowAggregate> {
    let mut per_tile: BTreeMap<TileKey, BTreeMap<NaiveDate, f64>> = BTreeMap::new();
    for r in records.iter().filter(|r| r.window == window) {
        let dates = per_tile.entry(r.tile).or_default();
        if dates.insert(r.date, r.count).is_some() {
            return Err(Error::DuplicateKey(format!("{} {} {:?}", r.date, r.tile, r.window)));
        }
    }
    if per_tile.is_empty() {
        return Err(Error::EmptySelection(format!("no tile counts for window {window:?}")));
    }
    let mut counts: IndexMap<String, f64> = areas.ids().map(|id| (id.to_string(), 0.0)).collect();
    let mut dropped_tiles = Vec::new();
    for (tile, dates) in &per_tile {
        let mean = dates.values().sum::<f64>() / dates.len() as f64;
        let (lon, lat) = tile_center(tile);
        match areas.locate([lon, lat]) {
            Some(i) => counts[i] += mean,
            None => {
                log::warn!("tile {tile} centre ({lon:.5}, {lat:.5}) lies in no area; dropped");
                dropped_tiles.push(tile.quadkey());
            }
        }
    }
    Ok(WindowAggregate {
        table: CountTable {
            source_id: source_id.to_string(),
            reference_period: None,
            rows: counts,
        },
        dropped_tiles,
    })
}
