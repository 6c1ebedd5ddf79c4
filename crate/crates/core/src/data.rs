//! Chips, the chip archive container, per-band standardisation and the
//! synthetic chip generator.
//!
//! Archive layout (all integers and floats little-endian):
//!
//! ```text
//! "GMCH" | version: u32 | header_len: u32 | header JSON (UTF-8) | records
//! record = H*W*C f32 pixels | lat, lon, week, hour: f32 | label field
//! ```
//!
//! The label field is empty (`none`), one `u32` (`single`) or a bitmask of
//! `ceil(classes / 8)` bytes with class `i` at bit `i % 8` of byte `i / 8`
//! (`multi`).

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const ARCHIVE_MAGIC: [u8; 4] = *b"GMCH";
pub const ARCHIVE_VERSION: u32 = 1;
const META_BYTES: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelMode {
    None,
    Single,
    Multi,
}

impl std::str::FromStr for LabelMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "single" => Ok(Self::Single),
            "multi" => Ok(Self::Multi),
            other => Err(Error::InvalidArgument(format!("unknown label mode {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Labels {
    None,
    Single(u32),
    /// Sorted, de-duplicated class indices.
    Multi(Vec<u32>),
}

impl Labels {
    pub fn mode(&self) -> LabelMode {
        match self {
            Labels::None => LabelMode::None,
            Labels::Single(_) => LabelMode::Single,
            Labels::Multi(_) => LabelMode::Multi,
        }
    }

    fn max_class(&self) -> Option<u32> {
        match self {
            Labels::None => None,
            Labels::Single(c) => Some(*c),
            Labels::Multi(cs) => cs.iter().copied().max(),
        }
    }
}

/// Geo-temporal acquisition attributes of a chip.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GeoTime {
    /// Degrees in `[-90, 90]`.
    pub lat: f32,
    /// Degrees in `[-180, 180)`.
    pub lon: f32,
    /// Week of year in `[0, 52)`.
    pub week: f32,
    /// Hour of day in `[0, 24)`.
    pub hour: f32,
}

impl GeoTime {
    pub fn validate(&self) -> Result<()> {
        let ok = |v: f32, lo: f32, hi: f32, closed: bool| {
            v.is_finite() && v >= lo && if closed { v <= hi } else { v < hi }
        };
        if !ok(self.lat, -90.0, 90.0, true) {
            return Err(Error::InvalidArgument(format!("latitude {} outside [-90, 90]", self.lat)));
        }
        if !ok(self.lon, -180.0, 180.0, false) {
            return Err(Error::InvalidArgument(format!("longitude {} outside [-180, 180)", self.lon)));
        }
        if !ok(self.week, 0.0, 52.0, false) {
            return Err(Error::InvalidArgument(format!("week {} outside [0, 52)", self.week)));
        }
        if !ok(self.hour, 0.0, 24.0, false) {
            return Err(Error::InvalidArgument(format!("hour {} outside [0, 24)", self.hour)));
        }
        Ok(())
    }
}

/// One multispectral image, stored `H x W x C` with the band index fastest.
#[derive(Clone, Debug, PartialEq)]
pub struct Chip {
    pub height: usize,
    pub width: usize,
    pub bands: usize,
    pub pixels: Vec<f32>,
    pub meta: GeoTime,
    pub metadata_present: bool,
    pub labels: Labels,
}

impl Chip {
    pub fn new(height: usize, width: usize, bands: usize, pixels: Vec<f32>) -> Result<Self> {
        if pixels.len() != height * width * bands {
            return Err(Error::Shape(format!(
                "{} pixels for a {height}x{width}x{bands} chip",
                pixels.len()
            )));
        }
        Ok(Self {
            height,
            width,
            bands,
            pixels,
            meta: GeoTime::default(),
            metadata_present: false,
            labels: Labels::None,
        })
    }

    pub fn with_meta(mut self, meta: GeoTime) -> Self {
        self.meta = meta;
        self.metadata_present = true;
        self
    }

    pub fn with_labels(mut self, labels: Labels) -> Self {
        self.labels = labels;
        self
    }

    #[inline]
    pub fn pixel(&self, y: usize, x: usize, b: usize) -> f32 {
        self.pixels[(y * self.width + x) * self.bands + b]
    }

    pub fn geometry(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.bands)
    }
}

/// Per-band mean and standard deviation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BandStats {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl BandStats {
    pub fn identity(bands: usize) -> Self {
        Self { mean: vec![0.0; bands], std: vec![1.0; bands] }
    }

    /// Population statistics over every pixel of every chip. Bands with
    /// (numerically) zero spread get a unit standard deviation.
    pub fn compute(chips: &[Chip]) -> Self {
        let bands = chips.first().map_or(0, |c| c.bands);
        let mut sum = vec![0.0f64; bands];
        let mut sq = vec![0.0f64; bands];
        let mut n = 0usize;
        for chip in chips {
            for px in chip.pixels.chunks_exact(bands) {
                for (b, &v) in px.iter().enumerate() {
                    sum[b] += v as f64;
                    sq[b] += (v as f64) * (v as f64);
                }
                n += 1;
            }
        }
        let mut stats = Self::identity(bands);
        if n == 0 {
            return stats;
        }
        for b in 0..bands {
            let mean = sum[b] / n as f64;
            let var = (sq[b] / n as f64 - mean * mean).max(0.0);
            stats.mean[b] = mean as f32;
            let std = var.sqrt() as f32;
            stats.std[b] = if std > 1e-12 { std } else { 1.0 };
        }
        stats
    }

    pub fn validate(&self) -> Result<()> {
        if self.mean.len() != self.std.len() {
            return Err(Error::Shape("band statistics lengths differ".into()));
        }
        match self.std.iter().position(|&s| !(s > 0.0 && s.is_finite())) {
            Some(b) => Err(Error::InvalidArgument(format!(
                "band {b} standard deviation {} is not positive",
                self.std[b]
            ))),
            None => Ok(()),
        }
    }
}

/// `(x - mean_b) / std_b` per band; metadata and labels are untouched.
pub fn normalize(chip: &Chip, stats: &BandStats) -> Result<Chip> {
    stats.validate()?;
    check_bands(chip, stats)?;
    let mut out = chip.clone();
    for px in out.pixels.chunks_exact_mut(chip.bands) {
        for (b, v) in px.iter_mut().enumerate() {
            *v = (*v - stats.mean[b]) / stats.std[b];
        }
    }
    Ok(out)
}

/// Inverse of [`normalize`].
pub fn denormalize(chip: &Chip, stats: &BandStats) -> Result<Chip> {
    stats.validate()?;
    check_bands(chip, stats)?;
    let mut out = chip.clone();
    for px in out.pixels.chunks_exact_mut(chip.bands) {
        for (b, v) in px.iter_mut().enumerate() {
            *v = *v * stats.std[b] + stats.mean[b];
        }
    }
    Ok(out)
}

fn check_bands(chip: &Chip, stats: &BandStats) -> Result<()> {
    if stats.mean.len() != chip.bands {
        return Err(Error::Shape(format!(
            "{} band statistics for a {}-band chip",
            stats.mean.len(),
            chip.bands
        )));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchiveHeader {
    pub height: usize,
    pub width: usize,
    pub bands: usize,
    pub count: usize,
    pub label_mode: LabelMode,
    pub classes: usize,
    pub metadata: bool,
    pub band_mean: Vec<f32>,
    pub band_std: Vec<f32>,
}

impl ArchiveHeader {
    pub fn stats(&self) -> BandStats {
        BandStats { mean: self.band_mean.clone(), std: self.band_std.clone() }
    }

    fn label_bytes(&self) -> usize {
        match self.label_mode {
            LabelMode::None => 0,
            LabelMode::Single => 4,
            LabelMode::Multi => self.classes.div_ceil(8),
        }
    }

    pub fn record_len(&self) -> usize {
        self.height * self.width * self.bands * 4 + META_BYTES + self.label_bytes()
    }
}

/// An opened archive; chips are held in memory for O(1) indexing.
#[derive(Clone, Debug, PartialEq)]
pub struct ChipArchive {
    pub header: ArchiveHeader,
    chips: Vec<Chip>,
}

impl ChipArchive {
    pub fn len(&self) -> usize {
        self.chips.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chips.is_empty()
    }

    pub fn get(&self, i: usize) -> Option<&Chip> {
        self.chips.get(i)
    }

    pub fn chips(&self) -> &[Chip] {
        &self.chips
    }

    pub fn into_chips(self) -> Vec<Chip> {
        self.chips
    }
}

/// Writes an archive, inferring the class count from the largest label.
pub fn write_archive(chips: &[Chip], path: impl AsRef<Path>) -> Result<ArchiveHeader> {
    write_archive_with(chips, None, path)
}

/// Writes an archive with an explicit class count (needed when the highest
/// class index does not occur in `chips`).
pub fn write_archive_with(
    chips: &[Chip],
    classes: Option<usize>,
    path: impl AsRef<Path>,
) -> Result<ArchiveHeader> {
    let path = path.as_ref();
    let header = build_header(chips, classes)?;
    let json = serde_json::to_vec(&header)?;
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut put = |bytes: &[u8]| w.write_all(bytes).map_err(|e| Error::io(path, e));
    put(&ARCHIVE_MAGIC)?;
    put(&ARCHIVE_VERSION.to_le_bytes())?;
    put(&(json.len() as u32).to_le_bytes())?;
    put(&json)?;
    let mut rec = Vec::with_capacity(header.record_len());
    for chip in chips {
        rec.clear();
        encode_record(chip, &header, &mut rec);
        put(&rec)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(header)
}

fn build_header(chips: &[Chip], classes: Option<usize>) -> Result<ArchiveHeader> {
    let Some(first) = chips.first() else {
        return Ok(ArchiveHeader {
            height: 0,
            width: 0,
            bands: 0,
            count: 0,
            label_mode: LabelMode::None,
            classes: classes.unwrap_or(0),
            metadata: false,
            band_mean: Vec::new(),
            band_std: Vec::new(),
        });
    };
    let mode = first.labels.mode();
    for (i, chip) in chips.iter().enumerate() {
        if chip.geometry() != first.geometry() {
            return Err(Error::Shape(format!(
                "chip {i} is {:?}, chip 0 is {:?}",
                chip.geometry(),
                first.geometry()
            )));
        }
        if chip.pixels.len() != chip.height * chip.width * chip.bands {
            return Err(Error::Shape(format!("chip {i} pixel buffer has the wrong length")));
        }
        if chip.labels.mode() != mode {
            return Err(Error::InvalidArgument(format!("chip {i} label mode differs from chip 0")));
        }
        if chip.metadata_present != first.metadata_present {
            return Err(Error::InvalidArgument(format!("chip {i} metadata presence differs from chip 0")));
        }
        if chip.metadata_present {
            chip.meta.validate().map_err(|e| Error::InvalidArgument(format!("chip {i}: {e}")))?;
        }
    }
    let observed = chips.iter().filter_map(|c| c.labels.max_class()).max().map_or(0, |m| m as usize + 1);
    let classes = match (mode, classes) {
        (LabelMode::None, c) => c.unwrap_or(0),
        (_, Some(c)) if c < observed => {
            return Err(Error::InvalidArgument(format!("class count {c} but label {} present", observed - 1)))
        }
        (_, Some(c)) => c,
        (_, None) => observed,
    };
    let stats = BandStats::compute(chips);
    Ok(ArchiveHeader {
        height: first.height,
        width: first.width,
        bands: first.bands,
        count: chips.len(),
        label_mode: mode,
        classes,
        metadata: first.metadata_present,
        band_mean: stats.mean,
        band_std: stats.std,
    })
}

fn encode_record(chip: &Chip, header: &ArchiveHeader, out: &mut Vec<u8>) {
    for &p in &chip.pixels {
        out.extend_from_slice(&p.to_le_bytes());
    }
    let meta = if chip.metadata_present { chip.meta } else { GeoTime::default() };
    for v in [meta.lat, meta.lon, meta.week, meta.hour] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    match &chip.labels {
        Labels::None => {}
        Labels::Single(c) => out.extend_from_slice(&c.to_le_bytes()),
        Labels::Multi(cs) => {
            let mut mask = vec![0u8; header.label_bytes()];
            for &c in cs {
                mask[c as usize / 8] |= 1 << (c % 8);
            }
            out.extend_from_slice(&mask);
        }
    }
}

pub fn load_archive(path: impl AsRef<Path>) -> Result<ChipArchive> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_archive(&bytes)
}

pub fn decode_archive(bytes: &[u8]) -> Result<ChipArchive> {
    if bytes.len() < 4 {
        return Err(Error::TruncatedHeader("missing magic".into()));
    }
    let found: [u8; 4] = bytes[..4].try_into().expect("4 bytes");
    if found != ARCHIVE_MAGIC {
        return Err(Error::BadMagic { expected: ARCHIVE_MAGIC, found });
    }
    if bytes.len() < 12 {
        return Err(Error::TruncatedHeader("missing version or header length".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != ARCHIVE_VERSION {
        return Err(Error::VersionMismatch { expected: ARCHIVE_VERSION, found: version });
    }
    let json_len = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let json_end = 12 + json_len;
    if bytes.len() < json_end {
        return Err(Error::TruncatedHeader("header JSON cut short".into()));
    }
    let header: ArchiveHeader = serde_json::from_slice(&bytes[12..json_end])?;
    if header.band_mean.len() != header.bands || header.band_std.len() != header.bands {
        return Err(Error::Shape("band statistics do not match the band count".into()));
    }
    if header.count > 0 {
        BandStats { mean: header.band_mean.clone(), std: header.band_std.clone() }.validate()?;
    }
    let payload = &bytes[json_end..];
    let rec_len = header.record_len();
    let complete = payload.len() / rec_len;
    let partial = payload.len() % rec_len != 0;
    if partial && complete < header.count {
        return Err(Error::Truncated { record: complete });
    }
    if complete != header.count || partial {
        let found = complete + usize::from(partial);
        return Err(Error::CountMismatch { declared: header.count, found });
    }
    let chips = payload.chunks_exact(rec_len).map(|rec| decode_record(rec, &header)).collect();
    Ok(ChipArchive { header, chips })
}

fn decode_record(rec: &[u8], header: &ArchiveHeader) -> Chip {
    let f32_at = |off: usize| f32::from_le_bytes(rec[off..off + 4].try_into().expect("4 bytes"));
    let n = header.height * header.width * header.bands;
    let pixels: Vec<f32> = (0..n).map(|i| f32_at(i * 4)).collect();
    let m = n * 4;
    let meta = GeoTime { lat: f32_at(m), lon: f32_at(m + 4), week: f32_at(m + 8), hour: f32_at(m + 12) };
    let lab = &rec[m + META_BYTES..];
    let labels = match header.label_mode {
        LabelMode::None => Labels::None,
        LabelMode::Single => Labels::Single(u32::from_le_bytes(lab[..4].try_into().expect("4 bytes"))),
        LabelMode::Multi => Labels::Multi(
            (0..header.classes as u32).filter(|&c| lab[c as usize / 8] & (1 << (c % 8)) != 0).collect(),
        ),
    };
    Chip {
        height: header.height,
        width: header.width,
        bands: header.bands,
        pixels,
        meta,
        metadata_present: header.metadata,
        labels,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub count: usize,
    pub height: usize,
    pub width: usize,
    pub bands: usize,
    pub label_mode: LabelMode,
    pub classes: usize,
    pub seed: u64,
    /// When false the chips carry no geo-temporal metadata.
    pub metadata: bool,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            count: 512,
            height: 40,
            width: 40,
            bands: 7,
            label_mode: LabelMode::Single,
            classes: 2,
            seed: 0,
            metadata: true,
        }
    }
}

/// Class recipes depend only on the class index, so chips generated with
/// different seeds share them (train and test splits agree).
struct ClassRecipe {
    signature: Vec<f32>,
    texture: u32,
    frequency: f32,
    direction: f32,
}

impl ClassRecipe {
    fn new(class: usize, bands: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(0x5EED_C1A5_0000 + class as u64);
        let signature = (0..bands).map(|_| rng.random_range(0.1f32..0.9)).collect();
        Self {
            signature,
            texture: (class % 4) as u32,
            frequency: rng.random_range(0.15f32..0.6),
            direction: rng.random_range(0.0f32..std::f32::consts::PI),
        }
    }

    fn texture_value(&self, y: f32, x: f32, phase: f32, block_noise: &[f32], grid: usize) -> f32 {
        match self.texture {
            0 => {
                let t = x * self.direction.cos() + y * self.direction.sin();
                (t * self.frequency * 0.25 + phase).sin()
            }
            1 => 0.0,
            2 => {
                let bs = (3.0 / self.frequency).max(2.0);
                let by = ((y / bs) as usize) % grid;
                let bx = ((x / bs) as usize) % grid;
                block_noise[by * grid + bx]
            }
            _ => {
                let t = x * self.direction.cos() + y * self.direction.sin();
                (t * self.frequency * 2.0 + phase).sin().signum()
            }
        }
    }

    fn speckle(&self) -> f32 {
        if self.texture == 1 { 0.35 } else { 0.05 }
    }
}

/// Deterministic synthetic chips whose class is recoverable from spectral
/// signature and texture.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Vec<Chip>> {
    if spec.height == 0 || spec.width == 0 || spec.bands == 0 {
        return Err(Error::InvalidArgument("chip dimensions must be positive".into()));
    }
    if spec.label_mode != LabelMode::None && spec.classes < 2 {
        return Err(Error::InvalidArgument("labelled data needs at least two classes".into()));
    }
    let n_classes = spec.classes.max(1);
    let recipes: Vec<ClassRecipe> = (0..n_classes).map(|c| ClassRecipe::new(c, spec.bands)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let grid = 16;
    let mut chips = Vec::with_capacity(spec.count);
    for _ in 0..spec.count {
        let present: Vec<usize> = match spec.label_mode {
            LabelMode::Multi => {
                let k = rng.random_range(1..=3usize.min(n_classes));
                let mut cs: Vec<usize> = Vec::with_capacity(k);
                while cs.len() < k {
                    let c = rng.random_range(0..n_classes);
                    if !cs.contains(&c) {
                        cs.push(c);
                    }
                }
                cs
            }
            _ => vec![rng.random_range(0..n_classes)],
        };
        let centres: Vec<(f32, f32)> = present
            .iter()
            .map(|_| (rng.random_range(0.0..spec.height as f32), rng.random_range(0.0..spec.width as f32)))
            .collect();
        let phases: Vec<f32> = present.iter().map(|_| rng.random_range(0.0..std::f32::consts::TAU)).collect();
        let blocks: Vec<f32> = (0..grid * grid).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        let brightness = rng.random_range(0.85f32..1.15);
        let mut pixels = Vec::with_capacity(spec.height * spec.width * spec.bands);
        for y in 0..spec.height {
            for x in 0..spec.width {
                let (yf, xf) = (y as f32, x as f32);
                let owner = (0..present.len())
                    .min_by(|&a, &b| {
                        let da = (centres[a].0 - yf).powi(2) + (centres[a].1 - xf).powi(2);
                        let db = (centres[b].0 - yf).powi(2) + (centres[b].1 - xf).powi(2);
                        da.total_cmp(&db)
                    })
                    .expect("at least one class");
                let recipe = &recipes[present[owner]];
                let tex = recipe.texture_value(yf, xf, phases[owner], &blocks, grid);
                for b in 0..spec.bands {
                    let noise: f32 = StandardNormal.sample(&mut rng);
                    let v = recipe.signature[b] * brightness * (1.0 + 0.3 * tex) + recipe.speckle() * noise * 0.5;
                    pixels.push(v);
                }
            }
        }
        let mut chip = Chip::new(spec.height, spec.width, spec.bands, pixels)?;
        if spec.metadata {
            chip = chip.with_meta(GeoTime {
                lat: rng.random_range(-90.0f32..=90.0),
                lon: rng.random_range(-180.0f32..180.0),
                week: rng.random_range(0.0f32..52.0),
                hour: rng.random_range(0.0f32..24.0),
            });
        }
        chip.labels = match spec.label_mode {
            LabelMode::None => Labels::None,
            LabelMode::Single => Labels::Single(present[0] as u32),
            LabelMode::Multi => {
                let mut cs: Vec<u32> = present.iter().map(|&c| c as u32).collect();
                cs.sort_unstable();
                Labels::Multi(cs)
            }
        };
        chips.push(chip);
    }
    Ok(chips)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn tiny_spec(count: usize, mode: LabelMode, seed: u64) -> SyntheticSpec {
        SyntheticSpec { count, height: 8, width: 8, bands: 7, label_mode: mode, classes: 4, seed, metadata: true }
    }

    #[test]
    fn two_unlabelled_chips_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.gmch");
        let chips = generate_synthetic(&tiny_spec(2, LabelMode::None, 3)).unwrap();
        let header = write_archive(&chips, &path).unwrap();
        assert_eq!(header.count, 2);
        let back = load_archive(&path).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back.chips(), &chips[..]);
        for (a, b) in back.chips().iter().zip(&chips) {
            assert!(a.pixels.iter().zip(&b.pixels).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn labelled_archives_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        for mode in [LabelMode::Single, LabelMode::Multi] {
            let path = dir.path().join(format!("{mode:?}.gmch"));
            let chips = generate_synthetic(&tiny_spec(5, mode, 11)).unwrap();
            write_archive_with(&chips, Some(12), &path).unwrap();
            let back = load_archive(&path).unwrap();
            assert_eq!(back.header.classes, 12);
            assert_eq!(back.chips(), &chips[..]);
        }
    }

    #[test]
    fn empty_archive_is_valid() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.gmch");
        write_archive(&[], &path).unwrap();
        let back = load_archive(&path).unwrap();
        assert!(back.is_empty());
        assert_eq!(back.header.count, 0);
    }

    #[test]
    fn out_of_range_latitude_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut chips = generate_synthetic(&tiny_spec(1, LabelMode::None, 0)).unwrap();
        chips[0].meta.lat = 91.0;
        let err = write_archive(&chips, dir.path().join("x")).unwrap_err();
        assert!(matches!(err, Error::InvalidArgument(_)), "{err}");
    }

    #[test]
    fn heterogeneous_shapes_are_rejected() {
        let a = Chip::new(2, 2, 1, vec![0.0; 4]).unwrap();
        let b = Chip::new(2, 3, 1, vec![0.0; 6]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(write_archive(&[a, b], dir.path().join("x")), Err(Error::Shape(_))));
    }

    #[test]
    fn unwritable_path_is_an_io_error() {
        let chips = generate_synthetic(&tiny_spec(1, LabelMode::None, 0)).unwrap();
        let err = write_archive(&chips, "/nonexistent-dir/sub/a.gmch").unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
    }

    fn archive_bytes(count: usize) -> (Vec<u8>, usize) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a");
        let chips = generate_synthetic(&tiny_spec(count, LabelMode::Single, 5)).unwrap();
        let header = write_archive(&chips, &path).unwrap();
        (fs::read(&path).unwrap(), header.record_len())
    }

    #[test]
    fn corruption_is_reported_distinctly() {
        let (bytes, rec) = archive_bytes(5);

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_archive(&bad), Err(Error::BadMagic { .. })));

        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(decode_archive(&bad), Err(Error::VersionMismatch { found: 9, .. })));

        let cut = &bytes[..bytes.len() - rec / 2];
        assert!(matches!(decode_archive(cut), Err(Error::Truncated { record: 4 })));

        let missing = &bytes[..bytes.len() - rec];
        assert!(matches!(decode_archive(missing), Err(Error::CountMismatch { declared: 5, found: 4 })));

        let mut extra = bytes.clone();
        extra.extend_from_slice(&bytes[bytes.len() - rec..]);
        assert!(matches!(decode_archive(&extra), Err(Error::CountMismatch { declared: 5, found: 6 })));
    }

    #[test]
    fn normalize_arithmetic() {
        let chip = Chip::new(1, 1, 2, vec![3.0, 5.0]).unwrap();
        let stats = BandStats { mean: vec![1.0, 5.0], std: vec![2.0, 1.0] };
        let out = normalize(&chip, &stats).unwrap();
        assert_eq!(out.pixels, vec![1.0, 0.0]);
        assert_eq!(normalize(&chip, &BandStats::identity(2)).unwrap(), chip);
        let bad = BandStats { mean: vec![0.0, 0.0], std: vec![1.0, 0.0] };
        assert!(normalize(&chip, &bad).is_err());
    }

    #[test]
    fn constant_band_at_its_mean_becomes_zero() {
        let chip = Chip::new(2, 2, 1, vec![4.0; 4]).unwrap();
        let stats = BandStats { mean: vec![4.0], std: vec![0.5] };
        assert!(normalize(&chip, &stats).unwrap().pixels.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn generator_is_deterministic() {
        let a = generate_synthetic(&tiny_spec(4, LabelMode::Multi, 7)).unwrap();
        let b = generate_synthetic(&tiny_spec(4, LabelMode::Multi, 7)).unwrap();
        assert_eq!(a, b);
        assert!(generate_synthetic(&tiny_spec(0, LabelMode::Single, 7)).unwrap().is_empty());
        for chip in &a {
            chip.meta.validate().unwrap();
            match &chip.labels {
                Labels::Multi(cs) => assert!((1..=3).contains(&cs.len())),
                other => panic!("unexpected {other:?}"),
            }
        }
    }

    #[test]
    fn generator_rejects_bad_specs() {
        let mut s = tiny_spec(1, LabelMode::Single, 0);
        s.classes = 1;
        assert!(generate_synthetic(&s).is_err());
        let mut s = tiny_spec(1, LabelMode::None, 0);
        s.bands = 0;
        assert!(generate_synthetic(&s).is_err());
    }

    #[test]
    fn computed_stats_are_positive() {
        let chips = generate_synthetic(&tiny_spec(3, LabelMode::None, 1)).unwrap();
        BandStats::compute(&chips).validate().unwrap();
        let flat = vec![Chip::new(1, 1, 1, vec![2.0]).unwrap()];
        assert_eq!(BandStats::compute(&flat).std, vec![1.0]);
    }

    proptest! {
        #[test]
        fn denormalize_inverts_normalize(
            px in proptest::collection::vec(-100.0f32..100.0, 6),
            mean in proptest::collection::vec(-10.0f32..10.0, 3),
            std in proptest::collection::vec(0.1f32..10.0, 3),
        ) {
            let chip = Chip::new(1, 2, 3, px).unwrap();
            let stats = BandStats { mean, std };
            let back = denormalize(&normalize(&chip, &stats).unwrap(), &stats).unwrap();
            for (a, b) in back.pixels.iter().zip(&chip.pixels) {
                prop_assert!((a - b).abs() <= 1e-6 * b.abs().max(1.0) * 10.0);
            }
        }
    }
}
