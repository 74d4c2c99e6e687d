//! WebAssembly bindings behind `www/index.html`.
//!
//! Images cross the boundary as RGBA bytes ready for `ImageData`; structured
//! results as JSON strings.

use ageprog::dataset::{group_bounds, render_synthetic_face, ImageTensor, Sex, SyntheticFaceParams, AGE_GROUPS, GROUP_NAMES, MAX_SYNTHETIC_AGE};
use ageprog::eval::{distance_stats, fr_score, percentage_gain, DistanceStats};
use serde::Serialize;
use wasm_bindgen::prelude::*;

const MAX_SIZE: usize = 256;
const CURVE_POINTS: usize = 41;

fn sex_of(female: bool) -> Sex {
    if female {
        Sex::Female
    } else {
        Sex::Male
    }
}

fn check_size(size: usize) -> Result<(), String> {
    if (4..=MAX_SIZE).contains(&size) {
        Ok(())
    } else {
        Err(format!("size must be between 4 and {MAX_SIZE}, got {size}"))
    }
}

fn rgba(img: &ImageTensor) -> Vec<u8> {
    img.to_rgb8().chunks_exact(3).flat_map(|p| [p[0], p[1], p[2], 255]).collect()
}

/// One synthetic face as `size × size` RGBA.
#[wasm_bindgen]
pub fn render_face(identity_seed: u32, age: u32, female: bool, size: usize) -> Result<Vec<u8>, String> {
    check_size(size)?;
    if age > MAX_SYNTHETIC_AGE {
        return Err(format!("age must be at most {MAX_SYNTHETIC_AGE}, got {age}"));
    }
    let face = render_synthetic_face(&SyntheticFaceParams { identity_seed: identity_seed as u64, age, sex: sex_of(female), size });
    Ok(rgba(&face))
}

/// Representative age of each group, capped at the renderer's oldest age.
pub fn group_age(group: usize) -> u32 {
    let (lo, hi) = group_bounds(group);
    (lo + hi.min(MAX_SYNTHETIC_AGE).max(lo)) / 2
}

/// The same identity in all ten age groups, as a `10·size × size` RGBA strip.
#[wasm_bindgen]
pub fn age_strip(identity_seed: u32, female: bool, size: usize) -> Result<Vec<u8>, String> {
    check_size(size)?;
    let faces: Vec<Vec<u8>> = (0..AGE_GROUPS)
        .map(|g| render_face(identity_seed, group_age(g), female, size))
        .collect::<Result<_, _>>()?;
    let mut out = Vec::with_capacity(AGE_GROUPS * size * size * 4);
    for y in 0..size {
        for face in &faces {
            out.extend_from_slice(&face[y * size * 4..(y + 1) * size * 4]);
        }
    }
    Ok(out)
}

/// Labels shown under the strip.
#[wasm_bindgen]
pub fn group_labels() -> String {
    GROUP_NAMES.join(",")
}

fn parse_list(text: &str, what: &str) -> Result<Vec<f64>, String> {
    text.split(|c: char| c == ',' || c.is_whitespace())
        .filter(|t| !t.is_empty())
        .map(|t| match t.parse::<f64>() {
            Ok(v) if v.is_finite() && v >= 0.0 => Ok(v),
            _ => Err(format!("{what}: `{t}` is not a non-negative number")),
        })
        .collect()
}

#[derive(Debug, Serialize)]
pub struct SweepPoint {
    pub threshold: f64,
    pub score: f64,
}

#[derive(Debug, Serialize)]
pub struct Sweep {
    pub count: usize,
    pub stats: DistanceStats,
    pub scores: Vec<SweepPoint>,
    /// Evenly spaced thresholds from 0 to just past the largest distance.
    pub curve: Vec<SweepPoint>,
}

pub fn sweep(distances: &[f64], thresholds: &[f64]) -> Result<Sweep, String> {
    let stats = distance_stats(distances).map_err(|e| e.to_string())?;
    let at = |t: f64| fr_score(distances, t).map(|score| SweepPoint { threshold: t, score }).map_err(|e| e.to_string());
    let scores = thresholds.iter().map(|&t| at(t)).collect::<Result<_, _>>()?;
    let top = stats.max * 1.05 + 1e-9;
    let curve = (0..CURVE_POINTS).map(|i| at(top * i as f64 / (CURVE_POINTS - 1) as f64)).collect::<Result<_, _>>()?;
    Ok(Sweep { count: distances.len(), stats, scores, curve })
}

/// FR scores and distance statistics for comma- or space-separated lists;
/// returns the JSON form of [`Sweep`].
#[wasm_bindgen]
pub fn fr_sweep(distances: &str, thresholds: &str) -> Result<String, String> {
    let d = parse_list(distances, "distances")?;
    let t = parse_list(thresholds, "thresholds")?;
    serde_json::to_string(&sweep(&d, &t)?).map_err(|e| e.to_string())
}

/// Percentage gain of `model` over `baseline`; NaN when undefined.
#[wasm_bindgen]
pub fn gain(baseline: f64, model: f64, higher_is_better: bool) -> f64 {
    percentage_gain(baseline, model, higher_is_better).unwrap_or(f64::NAN)
}
