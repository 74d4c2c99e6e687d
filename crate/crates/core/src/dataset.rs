//! Face records, image tensors, the synthetic face renderer and dataset splits.
//!
//! Real data follows the UTKFace naming scheme `age_gender_race_timestamp.ext`
//! with gender `0` for male and `1` for female. Images are assumed to be
//! square-cropped already; no detection or alignment is done here.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub const AGE_GROUPS: usize = 10;
pub const MAX_AGE: u32 = 116;
/// Oldest age the synthetic renderer accepts.
pub const MAX_SYNTHETIC_AGE: u32 = 100;
/// Inclusive upper bounds of groups 0..=8; group 9 is everything above 70.
const GROUP_UPPER: [u32; AGE_GROUPS - 1] = [5, 10, 15, 20, 30, 40, 50, 60, 70];
pub const GROUP_NAMES: [&str; AGE_GROUPS] =
    ["0-5", "6-10", "11-15", "16-20", "21-30", "31-40", "41-50", "51-60", "61-70", ">70"];

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("malformed face file name `{0}`")]
    MalformedName(String),
    #[error("age {0} outside [0, {MAX_AGE}]")]
    OutOfRange(u32),
    #[error("expected 3 channels, got {0}")]
    BadChannels(usize),
    #[error("image is {width}x{height}, expected a square crop")]
    NotSquare { width: usize, height: usize },
    #[error("pixel buffer holds {got} bytes, expected {expected}")]
    BadBuffer { expected: usize, got: usize },
    #[error("no usable face records in {0}")]
    EmptySource(String),
    #[error("split fractions {0:?} must be non-negative and sum to 1")]
    BadSplit([f64; 3]),
    #[error("invalid dataset manifest: {0}")]
    BadManifest(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Image(#[from] image::ImageError),
}

pub type Result<T, E = DatasetError> = std::result::Result<T, E>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sex {
    Male,
    Female,
}

impl Sex {
    pub const ALL: [Sex; 2] = [Sex::Male, Sex::Female];

    pub fn index(self) -> usize {
        match self {
            Sex::Male => 0,
            Sex::Female => 1,
        }
    }

    pub fn from_index(i: usize) -> Option<Sex> {
        match i {
            0 => Some(Sex::Male),
            1 => Some(Sex::Female),
            _ => None,
        }
    }

    pub fn flipped(self) -> Sex {
        match self {
            Sex::Male => Sex::Female,
            Sex::Female => Sex::Male,
        }
    }

    /// Gender label `s`: index 0 = male, index 1 = female.
    pub fn one_hot(self) -> [f32; 2] {
        let mut v = [0.0; 2];
        v[self.index()] = 1.0;
        v
    }
}

impl fmt::Display for Sex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Sex::Male => "male",
            Sex::Female => "female",
        })
    }
}

impl FromStr for Sex {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "male" | "m" => Ok(Sex::Male),
            "female" | "f" => Ok(Sex::Female),
            other => Err(format!("unknown sex `{other}` (expected male or female)")),
        }
    }
}

/// Age label `l` for a group index.
pub fn age_one_hot(group: usize) -> [f32; AGE_GROUPS] {
    assert!(group < AGE_GROUPS, "age group {group} out of range");
    let mut v = [0.0; AGE_GROUPS];
    v[group] = 1.0;
    v
}

pub fn age_to_group(age: u32) -> Result<usize> {
    if age > MAX_AGE {
        return Err(DatasetError::OutOfRange(age));
    }
    Ok(GROUP_UPPER.iter().position(|&hi| age <= hi).unwrap_or(AGE_GROUPS - 1))
}

/// Inclusive age bounds of a group, capped at `MAX_AGE`.
pub fn group_bounds(group: usize) -> (u32, u32) {
    let lo = if group == 0 { 0 } else { GROUP_UPPER[group - 1] + 1 };
    let hi = GROUP_UPPER.get(group).copied().unwrap_or(MAX_AGE);
    (lo, hi)
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum FaceSource {
    File(PathBuf),
    Synthetic { identity_seed: u64 },
}

impl fmt::Display for FaceSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FaceSource::File(p) => write!(f, "{}", p.display()),
            FaceSource::Synthetic { identity_seed } => write!(f, "synthetic:{identity_seed}"),
        }
    }
}

impl From<FaceSource> for String {
    fn from(s: FaceSource) -> String {
        s.to_string()
    }
}

impl TryFrom<String> for FaceSource {
    type Error = String;

    fn try_from(s: String) -> Result<Self, String> {
        match s.strip_prefix("synthetic:") {
            Some(rest) => rest
                .parse()
                .map(|identity_seed| FaceSource::Synthetic { identity_seed })
                .map_err(|e| format!("bad synthetic id `{rest}`: {e}")),
            None => Ok(FaceSource::File(PathBuf::from(s))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FaceRecord {
    pub source: FaceSource,
    pub age: u32,
    pub sex: Sex,
    pub group: usize,
    /// Identity key when known (synthetic faces); real UTKFace files carry none.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub identity: Option<u64>,
}

impl FaceRecord {
    pub fn new(source: FaceSource, age: u32, sex: Sex, identity: Option<u64>) -> Result<Self> {
        let group = age_to_group(age)?;
        Ok(Self { source, age, sex, group, identity })
    }
}

pub fn parse_face_filename(name: &str) -> Result<FaceRecord> {
    let base = Path::new(name).file_name().and_then(|b| b.to_str()).unwrap_or(name);
    let stem = base.split('.').next().unwrap_or_default();
    let malformed = || DatasetError::MalformedName(name.to_string());
    let fields: Vec<&str> = stem.split('_').collect();
    if fields.len() < 3 {
        return Err(malformed());
    }
    let numeric: Vec<u32> = fields[..3].iter().map(|f| f.parse::<u32>()).collect::<Result<_, _>>().map_err(|_| malformed())?;
    let age = numeric[0];
    if age > MAX_AGE {
        return Err(malformed());
    }
    let sex = Sex::from_index(numeric[1] as usize).ok_or_else(malformed)?;
    FaceRecord::new(FaceSource::File(PathBuf::from(name)), age, sex, None)
}

/// An `H×W×3` image with every element in `[-1, 1]`, stored row-major with
/// interleaved channels.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor {
    size: usize,
    data: Vec<f32>,
}

pub const CHANNELS: usize = 3;

impl ImageTensor {
    pub fn new(size: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != size * size * CHANNELS {
            return Err(DatasetError::BadBuffer { expected: size * size * CHANNELS, got: data.len() });
        }
        Ok(Self { size, data: data.into_iter().map(|v| v.clamp(-1.0, 1.0)).collect() })
    }

    pub fn filled(size: usize, value: f32) -> Self {
        Self { size, data: vec![value.clamp(-1.0, 1.0); size * size * CHANNELS] }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.size + x) * CHANNELS + c]
    }

    /// Channel-major copy (`3×H×W`), the layout the networks consume.
    pub fn to_chw(&self) -> Vec<f32> {
        let plane = self.size * self.size;
        let mut out = vec![0.0; plane * CHANNELS];
        for (p, px) in self.data.chunks_exact(CHANNELS).enumerate() {
            for c in 0..CHANNELS {
                out[c * plane + p] = px[c];
            }
        }
        out
    }

    pub fn from_chw(size: usize, chw: &[f32]) -> Result<Self> {
        let plane = size * size;
        if chw.len() != plane * CHANNELS {
            return Err(DatasetError::BadBuffer { expected: plane * CHANNELS, got: chw.len() });
        }
        let mut data = vec![0.0; plane * CHANNELS];
        for c in 0..CHANNELS {
            for p in 0..plane {
                data[p * CHANNELS + c] = chw[c * plane + p];
            }
        }
        Self::new(size, data)
    }

    /// Inverse of the byte normalization, rounding to the nearest byte.
    pub fn to_rgb8(&self) -> Vec<u8> {
        self.data.iter().map(|&v| ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8).collect()
    }

    pub fn to_image(&self) -> image::RgbImage {
        image::RgbImage::from_raw(self.size as u32, self.size as u32, self.to_rgb8()).expect("buffer size matches")
    }
}

pub fn byte_to_unit(v: u8) -> f32 {
    (v as f64 / 127.5 - 1.0) as f32
}

/// Maps square 3-channel bytes onto `[-1, 1]` and resizes to `size×size`
/// with bilinear interpolation.
pub fn normalize_image(raw: &[u8], width: usize, height: usize, channels: usize, size: usize) -> Result<ImageTensor> {
    if channels != CHANNELS {
        return Err(DatasetError::BadChannels(channels));
    }
    if width != height || width == 0 {
        return Err(DatasetError::NotSquare { width, height });
    }
    if raw.len() != width * height * channels {
        return Err(DatasetError::BadBuffer { expected: width * height * channels, got: raw.len() });
    }
    let unit: Vec<f32> = raw.iter().map(|&b| byte_to_unit(b)).collect();
    if width == size {
        return ImageTensor::new(size, unit);
    }
    ImageTensor::new(size, bilinear_resize(&unit, width, size))
}

/// Bilinear resampling of an interleaved square image with half-pixel centres.
fn bilinear_resize(src: &[f32], from: usize, to: usize) -> Vec<f32> {
    let scale = from as f64 / to as f64;
    let mut out = vec![0.0; to * to * CHANNELS];
    let coord = |o: usize| {
        let s = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (from - 1) as f64);
        let i0 = s.floor() as usize;
        let i1 = (i0 + 1).min(from - 1);
        (i0, i1, s - i0 as f64)
    };
    for oy in 0..to {
        let (y0, y1, fy) = coord(oy);
        for ox in 0..to {
            let (x0, x1, fx) = coord(ox);
            for c in 0..CHANNELS {
                let p = |y: usize, x: usize| src[(y * from + x) * CHANNELS + c] as f64;
                let top = p(y0, x0) * (1.0 - fx) + p(y0, x1) * fx;
                let bot = p(y1, x0) * (1.0 - fx) + p(y1, x1) * fx;
                out[(oy * to + ox) * CHANNELS + c] = (top * (1.0 - fy) + bot * fy) as f32;
            }
        }
    }
    out
}

/// Loads an image file, centre-crops it to a square and normalizes it.
pub fn load_image_file(path: &Path, size: usize) -> Result<ImageTensor> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = (img.width(), img.height());
    let side = w.min(h);
    let cropped = image::imageops::crop_imm(&img, (w - side) / 2, (h - side) / 2, side, side).to_image();
    normalize_image(cropped.as_raw(), side as usize, side as usize, CHANNELS, size)
}

/// Writes images side by side, left to right, as one PNG strip.
pub fn save_strip_png(images: &[ImageTensor], path: &Path) -> Result<()> {
    let Some(first) = images.first() else {
        return Err(DatasetError::EmptySource("image strip".into()));
    };
    let s = first.size() as u32;
    let mut strip = image::RgbImage::new(s * images.len() as u32, s);
    for (i, img) in images.iter().enumerate() {
        image::imageops::replace(&mut strip, &img.to_image(), (i as u32 * s) as i64, 0);
    }
    strip.save(path)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Synthetic faces

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyntheticFaceParams {
    pub identity_seed: u64,
    pub age: u32,
    pub sex: Sex,
    pub size: usize,
}

/// Fractions of the image side; rows and columns use pixel centres.
const BAND_HEIGHT: f64 = 0.12;
const FACE_CY: f64 = 0.56;
const FACE_RY: f64 = 0.40;
const EYE_Y: f64 = 0.52;
const MOUTH_Y: f64 = 0.76;
const WRINKLE_TOP: f64 = 0.20;
const WRINKLE_STEP: f64 = 0.026;
const WRINKLE_HALF_WIDTH: f64 = 0.10;
const BAND_COLOR: [u8; 3] = [40, 40, 120];

/// Traits that depend only on the identity seed.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IdentityTraits {
    pub background: [u8; 3],
    pub skin: [u8; 3],
    pub eye_color: [u8; 3],
    pub mouth_color: [u8; 3],
    /// Centre-to-centre distance between the eyes.
    pub eye_spacing: f64,
    pub eye_radius: f64,
    pub mouth_width: f64,
}

impl IdentityTraits {
    pub fn from_seed(identity_seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(identity_seed);
        let mut rgb = |lo: [u8; 3], hi: [u8; 3]| -> [u8; 3] { std::array::from_fn(|i| rng.gen_range(lo[i]..=hi[i])) };
        let background = rgb([150, 150, 150], [235, 235, 235]);
        let skin = rgb([140, 100, 70], [230, 190, 160]);
        let eye_color = rgb([10, 10, 10], [80, 80, 80]);
        let mouth_color = rgb([150, 40, 40], [200, 90, 90]);
        Self {
            background,
            skin,
            eye_color,
            mouth_color,
            eye_spacing: rng.gen_range(0.16..0.28),
            eye_radius: rng.gen_range(0.035..0.05),
            mouth_width: rng.gen_range(0.12..0.24),
        }
    }
}

/// Width/height ratio of the face ellipse: 0.95 at birth, 0.70 at 100.
pub fn face_aspect(age: u32) -> f64 {
    0.95 - 0.25 * age.min(MAX_SYNTHETIC_AGE) as f64 / MAX_SYNTHETIC_AGE as f64
}

pub fn wrinkle_strokes(age: u32) -> usize {
    (age.min(MAX_SYNTHETIC_AGE) / 10) as usize
}

/// Width of the top gender band as a fraction of the image width. Young
/// children all carry the wide band; the male band narrows between 5 and 15.
pub fn band_width(sex: Sex, age: u32) -> f64 {
    match sex {
        Sex::Female => 0.80,
        Sex::Male => {
            let t = ((age as f64 - 5.0) / 10.0).clamp(0.0, 1.0);
            0.80 * (1.0 - t) + 0.30 * t
        }
    }
}

/// Rows `0..band_rows(size)` hold the gender band.
pub fn band_rows(size: usize) -> usize {
    (BAND_HEIGHT * size as f64).round() as usize
}

pub fn render_synthetic_face(p: &SyntheticFaceParams) -> ImageTensor {
    let s = p.size;
    let sf = s as f64;
    let age = p.age.min(MAX_SYNTHETIC_AGE);
    let id = IdentityTraits::from_seed(p.identity_seed);
    let rx = FACE_RY * face_aspect(age);
    let in_face = |u: f64, v: f64| ((u - 0.5) / rx).powi(2) + ((v - FACE_CY) / FACE_RY).powi(2) <= 1.0;
    let wrinkle_color: [u8; 3] = std::array::from_fn(|i| (id.skin[i] as f64 * 0.55) as u8);
    let wrinkle_rows: Vec<usize> =
        (0..wrinkle_strokes(age)).map(|i| ((WRINKLE_TOP + i as f64 * WRINKLE_STEP) * sf).floor() as usize).collect();
    let thickness = ((0.008 * sf).round() as usize).max(1);
    let band_half = band_width(p.sex, age) / 2.0;
    let band_limit = band_rows(s);
    let eye_dx = id.eye_spacing / 2.0;

    let mut bytes = Vec::with_capacity(s * s * CHANNELS);
    for y in 0..s {
        let v = (y as f64 + 0.5) / sf;
        for x in 0..s {
            let u = (x as f64 + 0.5) / sf;
            let mut px = id.background;
            if in_face(u, v) {
                px = id.skin;
                if (u - 0.5).abs() <= WRINKLE_HALF_WIDTH && wrinkle_rows.iter().any(|&r| y >= r && y < r + thickness) {
                    px = wrinkle_color;
                }
                let eye = |cx: f64| (u - cx).powi(2) + (v - EYE_Y).powi(2) <= id.eye_radius.powi(2);
                if eye(0.5 - eye_dx) || eye(0.5 + eye_dx) {
                    px = id.eye_color;
                }
                if (u - 0.5).abs() <= id.mouth_width / 2.0 && (v - MOUTH_Y).abs() <= 0.02 {
                    px = id.mouth_color;
                }
            }
            if y < band_limit && (u - 0.5).abs() < band_half {
                px = BAND_COLOR;
            }
            bytes.extend_from_slice(&px);
        }
    }
    ImageTensor::new(s, bytes.into_iter().map(byte_to_unit).collect()).expect("renderer fills every pixel")
}

/// Pixel boxes `(y0, y1, x0, x1)` (half-open) covering the eyes and a skin
/// patch on the nose bridge. These regions never change with age.
pub fn identity_regions(identity_seed: u64, size: usize) -> Vec<(usize, usize, usize, usize)> {
    let id = IdentityTraits::from_seed(identity_seed);
    let sf = size as f64;
    let px = |f: f64| (f * sf).round() as usize;
    let r = id.eye_radius + 0.01;
    let mut boxes: Vec<(usize, usize, usize, usize)> = [0.5 - id.eye_spacing / 2.0, 0.5 + id.eye_spacing / 2.0]
        .iter()
        .map(|&cx| (px(EYE_Y - r), px(EYE_Y + r), px(cx - r), px(cx + r)))
        .collect();
    boxes.push((px(0.60), px(0.68), px(0.46), px(0.54)));
    boxes
}

/// Splitmix64 finalizer used to derive per-identity seeds.
pub fn mix_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(0x6A09_E667_F3BC_C909);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub count: usize,
    pub seed: u64,
    pub age_range: [u32; 2],
    pub size: usize,
    /// Number of distinct identities; defaults to one per ten faces.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub identities: Option<usize>,
}

impl SyntheticSpec {
    pub fn identity_count(&self) -> usize {
        self.identities.unwrap_or(self.count / 10).clamp(1, self.count.max(1))
    }
}

/// Faces cycle through identities; the k-th face of an identity is drawn from
/// age group `k mod 10` (clipped to `age_range`), so every identity spans the
/// age spectrum. Sexes alternate between identities.
pub fn synthetic_records(spec: &SyntheticSpec) -> Result<Vec<FaceRecord>> {
    let [lo, hi] = spec.age_range;
    if lo > hi || hi > MAX_SYNTHETIC_AGE {
        return Err(DatasetError::OutOfRange(hi.max(lo)));
    }
    if spec.count == 0 {
        return Err(DatasetError::EmptySource("synthetic spec with count 0".into()));
    }
    let ids = spec.identity_count();
    let mut out = Vec::with_capacity(spec.count);
    for j in 0..spec.count {
        let i = j % ids;
        let k = j / ids;
        let identity_seed = mix_seed(spec.seed, i as u64);
        let sex = if (i + (spec.seed as usize & 1)).is_multiple_of(2) { Sex::Male } else { Sex::Female };
        let (glo, ghi) = group_bounds(k % AGE_GROUPS);
        let (a, b) = (glo.max(lo), ghi.min(hi));
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(identity_seed, k as u64));
        let age = if a <= b { rng.gen_range(a..=b) } else { rng.gen_range(lo..=hi) };
        out.push(FaceRecord::new(FaceSource::Synthetic { identity_seed }, age, sex, Some(identity_seed))?);
    }
    Ok(out)
}

/// Held-out young faces (ages 0-5): `per_sex` of each sex, on identities that
/// never occur in [`synthetic_records`] for the same seed.
pub fn synthetic_eval_inputs(seed: u64, per_sex: usize) -> Vec<FaceRecord> {
    let mut out = Vec::with_capacity(2 * per_sex);
    for sex in Sex::ALL {
        for i in 0..per_sex {
            let identity_seed = mix_seed(seed ^ 0xE7A1_0000_0000_0000, (sex.index() * per_sex + i) as u64 + (1 << 40));
            let age = ChaCha8Rng::seed_from_u64(identity_seed).gen_range(0..=5);
            out.push(FaceRecord::new(FaceSource::Synthetic { identity_seed }, age, sex, Some(identity_seed)).expect("age in range"));
        }
    }
    out
}

/// Produces the image of a record: renders synthetic ones, loads files.
pub fn load_record_image(record: &FaceRecord, size: usize) -> Result<ImageTensor> {
    match &record.source {
        FaceSource::Synthetic { identity_seed } => Ok(render_synthetic_face(&SyntheticFaceParams {
            identity_seed: *identity_seed,
            age: record.age.min(MAX_SYNTHETIC_AGE),
            sex: record.sex,
            size,
        })),
        FaceSource::File(path) => load_image_file(path, size),
    }
}

/// Lists the parseable face images of a directory in file-name order.
/// Unparseable names are skipped with a warning.
pub fn scan_directory(dir: &Path) -> Result<Vec<FaceRecord>> {
    let mut entries: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "jpg" | "jpeg" | "png"))
        })
        .collect();
    entries.sort();
    let mut records = Vec::new();
    for path in entries {
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string();
        match parse_face_filename(&name) {
            Ok(mut r) => {
                r.source = FaceSource::File(path);
                records.push(r);
            }
            Err(e) => log::warn!("skipping {}: {e}", path.display()),
        }
    }
    if records.is_empty() {
        return Err(DatasetError::EmptySource(dir.display().to_string()));
    }
    Ok(records)
}

// ---------------------------------------------------------------------------
// Splits

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
    /// Inputs reserved for age-progression evaluation.
    Eval,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DatasetSplit {
    pub train: Vec<FaceRecord>,
    pub val: Vec<FaceRecord>,
    pub test: Vec<FaceRecord>,
}

impl DatasetSplit {
    pub fn sizes(&self) -> (usize, usize, usize) {
        (self.train.len(), self.val.len(), self.test.len())
    }
}

/// Largest-remainder apportionment of `n` items over the three fractions.
fn split_counts(n: usize, fractions: [f64; 3]) -> [usize; 3] {
    let raw: Vec<f64> = fractions.iter().map(|f| f * n as f64).collect();
    let mut counts: [usize; 3] = std::array::from_fn(|i| raw[i].floor() as usize);
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| (raw[b] - raw[b].floor()).total_cmp(&(raw[a] - raw[a].floor())).then(a.cmp(&b)));
    let mut left = n - counts.iter().sum::<usize>();
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        counts[i] += 1;
        left -= 1;
    }
    counts
}

/// Deterministic split stratified by `(sex, group)`.
///
/// Members of each stratum are shuffled and spread evenly over `[0, 1)`; the
/// merged ordering is cut at the global train/val/test counts. Any stratum
/// left without a training example then trades its earliest member with a
/// training record of a stratum that has more than one.
pub fn build_dataset(records: &[FaceRecord], fractions: [f64; 3], seed: u64) -> Result<DatasetSplit> {
    if records.is_empty() {
        return Err(DatasetError::EmptySource("record list".into()));
    }
    if fractions.iter().any(|f| !f.is_finite() || *f < 0.0) || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(DatasetError::BadSplit(fractions));
    }
    let mut strata: BTreeMap<(Sex, usize), Vec<usize>> = BTreeMap::new();
    for (i, r) in records.iter().enumerate() {
        strata.entry((r.sex, r.group)).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keyed: Vec<(f64, usize, usize)> = Vec::with_capacity(records.len());
    for (si, members) in strata.values_mut().enumerate() {
        members.shuffle(&mut rng);
        let m = members.len() as f64;
        for (k, &idx) in members.iter().enumerate() {
            keyed.push(((k as f64 + 0.5) / m, si, idx));
        }
    }
    keyed.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let [n_train, n_val, _] = split_counts(records.len(), fractions);
    let mut assign: Vec<Split> = vec![Split::Test; records.len()];
    for (pos, &(_, _, idx)) in keyed.iter().enumerate() {
        assign[idx] = if pos < n_train {
            Split::Train
        } else if pos < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
    }
    if n_train > 0 {
        for members in strata.values() {
            if members.iter().any(|&i| assign[i] == Split::Train) {
                continue;
            }
            let donor = strata
                .values()
                .filter(|m| m.iter().filter(|&&i| assign[i] == Split::Train).count() > 1)
                .flat_map(|m| m.iter().rev().copied().filter(|&i| assign[i] == Split::Train).take(1))
                .next();
            if let Some(d) = donor {
                let first = members[0];
                assign[d] = assign[first];
                assign[first] = Split::Train;
            }
        }
    }
    let mut split = DatasetSplit::default();
    for (idx, r) in records.iter().enumerate() {
        match assign[idx] {
            Split::Train => split.train.push(r.clone()),
            Split::Val => split.val.push(r.clone()),
            _ => split.test.push(r.clone()),
        }
    }
    if split.val.is_empty() || split.test.is_empty() {
        log::warn!("degenerate split of {} records: sizes {:?}", records.len(), split.sizes());
    }
    Ok(split)
}

/// Picks the young (group 0) faces used as age-progression inputs. With
/// `exclude_from_training` they come from the held-out test split only;
/// otherwise every group-0 record qualifies.
pub fn select_eval_inputs(split: &DatasetSplit, exclude_from_training: bool) -> Vec<FaceRecord> {
    let young = |r: &&FaceRecord| r.group == 0;
    if exclude_from_training {
        split.test.iter().filter(young).cloned().collect()
    } else {
        split.train.iter().chain(&split.val).chain(&split.test).filter(young).cloned().collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    #[serde(flatten)]
    pub record: FaceRecord,
    pub split: Split,
}

/// Contents of `dataset.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub image_size: usize,
    pub seed: u64,
    pub records: Vec<ManifestRecord>,
}

impl DatasetManifest {
    pub fn from_split(split: &DatasetSplit, eval: &[FaceRecord], image_size: usize, seed: u64) -> Self {
        let tag = |rs: &[FaceRecord], s: Split| rs.iter().map(move |r| ManifestRecord { record: r.clone(), split: s }).collect::<Vec<_>>();
        let mut records = tag(&split.train, Split::Train);
        records.extend(tag(&split.val, Split::Val));
        records.extend(tag(&split.test, Split::Test));
        records.extend(tag(eval, Split::Eval));
        Self { image_size, seed, records }
    }

    pub fn records_in(&self, split: Split) -> Vec<FaceRecord> {
        self.records.iter().filter(|r| r.split == split).map(|r| r.record.clone()).collect()
    }

    pub fn split(&self) -> DatasetSplit {
        DatasetSplit { train: self.records_in(Split::Train), val: self.records_in(Split::Val), test: self.records_in(Split::Test) }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self).map_err(|e| DatasetError::BadManifest(e.to_string()))?;
        std::fs::write(path, json + "\n")?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let m: Self = serde_json::from_str(&text).map_err(|e| DatasetError::BadManifest(e.to_string()))?;
        for r in &m.records {
            if age_to_group(r.record.age)? != r.record.group {
                return Err(DatasetError::BadManifest(format!("record {} has inconsistent group", r.record.source)));
            }
        }
        Ok(m)
    }
}
