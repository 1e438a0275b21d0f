//! Deterministic synthetic road scenes with parameterized weather
//! degradation.
//!
//! A scene is composed from geometric primitives — sky, a road band, one to
//! three vehicles, vegetation blobs — each mapped to one class. Degradation
//! never touches the mask: fog blends toward gray, rain adds bright streak
//! noise, humidity blurs through the fixed 3×3 kernel, and the night flag
//! scales brightness. Ground truth always comes from the clean geometry.

use std::cell::Cell;
use std::io::{self, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nets::{ModelDims, MIX_KERNEL_3X3};
use crate::tensor::Tensor;

/// Gray level everything fades to under full fog.
pub const FOG_GRAY: f64 = 0.7;

/// Brightness factor applied by the night flag.
pub const NIGHT_BRIGHTNESS: f64 = 0.4;

/// Rain streak amplitude at full intensity.
const RAIN_GAIN: f64 = 0.5;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("labeled ratio must lie in (0,1], got {0}")]
    BadRatio(f64),
    #[error("weather intensities must lie in [0,1]: {0}")]
    BadWeather(String),
}

/// Per-sample degradation intensities, all in `[0,1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WeatherConfig {
    /// Overall degradation level; `from_beta` maps it onto the channels.
    pub beta: f64,
    pub rain_x: f64,
    pub fog_y: f64,
    pub humidity_z: f64,
    pub night: bool,
}

impl Default for WeatherConfig {
    fn default() -> Self {
        Self::clean()
    }
}

impl WeatherConfig {
    /// No degradation at all; the render passes through bitwise.
    pub fn clean() -> Self {
        Self {
            beta: 0.0,
            rain_x: 0.0,
            fog_y: 0.0,
            humidity_z: 0.0,
            night: false,
        }
    }

    /// Uniform mapping of one level onto all three channels.
    pub fn from_beta(beta: f64) -> Self {
        Self {
            beta,
            rain_x: beta,
            fog_y: beta,
            humidity_z: beta,
            night: false,
        }
    }

    /// Soft preset, 20% degradation.
    pub fn soft() -> Self {
        Self::from_beta(0.2)
    }

    /// Medium preset, 50% degradation.
    pub fn medium() -> Self {
        Self::from_beta(0.5)
    }

    /// Hard preset, 70% degradation.
    pub fn hard() -> Self {
        Self::from_beta(0.7)
    }

    pub fn with_night(mut self) -> Self {
        self.night = true;
        self
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        for (name, v) in [
            ("beta", self.beta),
            ("rain_x", self.rain_x),
            ("fog_y", self.fog_y),
            ("humidity_z", self.humidity_z),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(SynthError::BadWeather(format!("{name} = {v}")));
            }
        }
        Ok(())
    }
}

/// Region-to-class assignment. Scenes always compose four regions; ids wrap
/// when the configured class count is smaller.
const REGION_ROAD: usize = 0;
const REGION_VEHICLE: usize = 1;
const REGION_SKY: usize = 2;
const REGION_VEGETATION: usize = 3;

fn region_class(region: usize, classes: usize) -> usize {
    region % classes
}

fn mix64(seed: u64, index: u64) -> u64 {
    // splitmix64 over the pair, for per-sample streams.
    let mut z = seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Renders the clean scene and its ground-truth mask for one geometry seed.
pub fn render_clean(dims: &ModelDims, seed: u64) -> (Tensor, Vec<usize>) {
    let (h, w, ch) = (dims.height, dims.width, dims.in_channels);
    let classes = dims.classes;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut pixels = vec![[0.0f64; 3]; h * w];
    let mut mask = vec![0usize; h * w];

    let horizon = ((h as f64) * rng.random_range(0.30..0.50)) as usize;
    let road_top = ((h as f64) * rng.random_range(0.55..0.72)) as usize;
    let road_height = (((h as f64) * rng.random_range(0.15..0.28)) as usize).max(1);
    let road_bot = (road_top + road_height).min(h);

    // Base layers: sky above the horizon, grassy ground below.
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if y < horizon {
                let fade = y as f64 / h as f64;
                pixels[i] = [0.50 + 0.1 * fade, 0.65 + 0.08 * fade, 0.90];
                mask[i] = region_class(REGION_SKY, classes);
            } else {
                pixels[i] = [0.22, 0.48, 0.24];
                mask[i] = region_class(REGION_VEGETATION, classes);
            }
        }
    }

    // Vegetation blobs as canopies straddling the horizon.
    let blob_count = rng.random_range(2..=4usize);
    for _ in 0..blob_count {
        let cx = rng.random_range(0.0..w as f64);
        let cy = horizon as f64 + rng.random_range(-0.15..0.05) * h as f64;
        let rx = rng.random_range(0.08..0.22) * w as f64;
        let ry = rng.random_range(0.06..0.15) * h as f64;
        let shade = rng.random_range(-0.06..0.06);
        for y in 0..h {
            for x in 0..w {
                let dx = (x as f64 - cx) / rx;
                let dy = (y as f64 - cy) / ry;
                if dx * dx + dy * dy <= 1.0 {
                    let i = y * w + x;
                    pixels[i] = [0.15 + shade, 0.42 + shade, 0.18 + shade];
                    mask[i] = region_class(REGION_VEGETATION, classes);
                }
            }
        }
    }

    // Road band with mild per-row shading.
    for y in road_top..road_bot {
        let shade = 0.02 * ((y - road_top) as f64 / road_height as f64);
        for x in 0..w {
            let i = y * w + x;
            pixels[i] = [0.34 + shade, 0.34 + shade, 0.38 + shade];
            mask[i] = region_class(REGION_ROAD, classes);
        }
    }

    // Vehicles parked on the road band.
    let palette: [[f64; 3]; 4] = [
        [0.75, 0.15, 0.15],
        [0.16, 0.25, 0.70],
        [0.85, 0.85, 0.88],
        [0.12, 0.12, 0.14],
    ];
    let vehicle_count = rng.random_range(1..=3usize);
    for _ in 0..vehicle_count {
        let vw = ((rng.random_range(0.12..0.30) * w as f64) as usize).max(1);
        let vh = ((rng.random_range(0.10..0.22) * h as f64) as usize).max(1);
        let x0 = rng.random_range(0..w.saturating_sub(vw).max(1));
        let bottom = road_top.saturating_add(road_height / 2).min(h);
        let y0 = bottom.saturating_sub(vh);
        let color = palette[rng.random_range(0..palette.len())];
        let jitter = rng.random_range(-0.04..0.04);
        for y in y0..bottom.min(h) {
            for x in x0..(x0 + vw).min(w) {
                let i = y * w + x;
                pixels[i] = [
                    (color[0] + jitter).clamp(0.0, 1.0),
                    (color[1] + jitter).clamp(0.0, 1.0),
                    (color[2] + jitter).clamp(0.0, 1.0),
                ];
                mask[i] = region_class(REGION_VEHICLE, classes);
            }
        }
    }

    // Fine per-pixel texture, part of the clean render.
    let mut data = Vec::with_capacity(h * w * ch);
    for pixel in &pixels {
        let noise = rng.random_range(-0.015..0.015);
        for c in 0..ch {
            data.push((pixel[c % 3] + noise).clamp(0.0, 1.0));
        }
    }
    let image = Tensor::from_vec(vec![h, w, ch], data).expect("render shape matches data");
    (image, mask)
}

/// Applies the weather channels to a clean image. The streak field is drawn
/// once from the seed, so intensities scale a fixed pattern and degradation
/// grows monotonically with them.
pub fn apply_weather(
    image: &Tensor,
    dims: &ModelDims,
    weather: &WeatherConfig,
    seed: u64,
) -> Tensor {
    let (h, w, ch) = (dims.height, dims.width, dims.in_channels);
    let mut data = image.data().to_vec();

    // Fog: blend toward gray.
    if weather.fog_y > 0.0 {
        for v in data.iter_mut() {
            *v += weather.fog_y * (FOG_GRAY - *v);
        }
    }

    // Rain: bright streaks at fixed positions, amplitude scaled by rain_x.
    if weather.rain_x > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(mix64(seed, 0xA11C_E5ED));
        let streaks = ((h * w) / 6).max(1);
        for _ in 0..streaks {
            let x0 = rng.random_range(0..w);
            let y0 = rng.random_range(0..h);
            let len = rng.random_range(2..=4usize);
            let drift = rng.random_range(0..2usize);
            let strength = rng.random_range(0.5..1.0);
            for k in 0..len {
                let y = y0 + k;
                let x = x0 + k * drift;
                if y < h && x < w {
                    let base = (y * w + x) * ch;
                    for c in 0..ch {
                        data[base + c] += RAIN_GAIN * weather.rain_x * strength;
                    }
                }
            }
        }
    }

    // Humidity: blend toward the 3×3-blurred image.
    if weather.humidity_z > 0.0 {
        let blurred =
            crate::tensor::blur3x3(&data, h, w, ch, &MIX_KERNEL_3X3);
        for (v, b) in data.iter_mut().zip(&blurred) {
            *v += weather.humidity_z * (b - *v);
        }
    }

    if weather.night {
        for v in data.iter_mut() {
            *v *= NIGHT_BRIGHTNESS;
        }
    }

    for v in data.iter_mut() {
        *v = v.clamp(0.0, 1.0);
    }
    Tensor::from_vec(vec![h, w, ch], data).expect("weather preserves shape")
}

/// One scene: degraded image plus the clean-geometry ground truth.
pub fn generate_scene(
    dims: &ModelDims,
    weather: &WeatherConfig,
    seed: u64,
) -> (Tensor, Vec<usize>) {
    let (clean, mask) = render_clean(dims, seed);
    let image = apply_weather(&clean, dims, weather, seed);
    (image, mask)
}

/// A deterministic set of scenes with a labeled/unlabeled split. Unlabeled
/// ground truth is quarantined behind [`SceneBatch::ground_truth`], which
/// counts every read so tests can assert training never looked.
#[derive(Debug)]
pub struct SceneBatch {
    dims: ModelDims,
    images: Vec<Tensor>,
    masks: Vec<Vec<usize>>,
    labeled: Vec<bool>,
    weather: Vec<WeatherConfig>,
    seed: u64,
    hidden_reads: Cell<usize>,
}

impl SceneBatch {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn dims(&self) -> &ModelDims {
        &self.dims
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn image(&self, index: usize) -> &Tensor {
        &self.images[index]
    }

    pub fn weather(&self, index: usize) -> &WeatherConfig {
        &self.weather[index]
    }

    pub fn is_labeled(&self, index: usize) -> bool {
        self.labeled[index]
    }

    pub fn labeled_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|i| self.labeled[*i]).collect()
    }

    pub fn unlabeled_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|i| !self.labeled[*i]).collect()
    }

    /// Mask for training. `None` for unlabeled samples: their ground truth
    /// is not reachable through this accessor.
    pub fn training_labels(&self, index: usize) -> Option<&[usize]> {
        if self.labeled[index] {
            Some(&self.masks[index])
        } else {
            None
        }
    }

    /// Ground truth for evaluation. Reads on unlabeled samples are counted;
    /// a training path that trips this counter fails the guard test.
    pub fn ground_truth(&self, index: usize) -> &[usize] {
        if !self.labeled[index] {
            self.hidden_reads.set(self.hidden_reads.get() + 1);
        }
        &self.masks[index]
    }

    pub fn hidden_truth_reads(&self) -> usize {
        self.hidden_reads.get()
    }

    /// Stacks the chosen samples into one `[k,H,W,in_channels]` tensor.
    pub fn stack_images(&self, indices: &[usize]) -> Tensor {
        let (h, w, ch) = (self.dims.height, self.dims.width, self.dims.in_channels);
        let mut data = Vec::with_capacity(indices.len() * h * w * ch);
        for &i in indices {
            data.extend_from_slice(self.images[i].data());
        }
        Tensor::from_vec(vec![indices.len(), h, w, ch], data).expect("stack preserves shape")
    }
}

/// Generates `n_total` scenes with exactly `floor(n_total·labeled_ratio)`
/// labeled samples, spread evenly, weather modes cycling per sample.
pub fn make_split(
    dims: &ModelDims,
    n_total: usize,
    labeled_ratio: f64,
    modes: &[WeatherConfig],
    seed: u64,
) -> Result<SceneBatch, SynthError> {
    if !(labeled_ratio > 0.0 && labeled_ratio <= 1.0) {
        return Err(SynthError::BadRatio(labeled_ratio));
    }
    for mode in modes {
        mode.validate()?;
    }
    let n_labeled = ((n_total as f64) * labeled_ratio).floor() as usize;
    let mut labeled = vec![false; n_total];
    for i in 0..n_labeled {
        labeled[i * n_total / n_labeled.max(1)] = true;
    }

    let mut images = Vec::with_capacity(n_total);
    let mut masks = Vec::with_capacity(n_total);
    let mut weather_list = Vec::with_capacity(n_total);
    for index in 0..n_total {
        let weather = if modes.is_empty() {
            WeatherConfig::clean()
        } else {
            modes[index % modes.len()]
        };
        let sample_seed = mix64(seed, index as u64);
        let (image, mask) = generate_scene(dims, &weather, sample_seed);
        images.push(image);
        masks.push(mask);
        weather_list.push(weather);
    }
    Ok(SceneBatch {
        dims: dims.clone(),
        images,
        masks,
        labeled,
        weather: weather_list,
        seed,
        hidden_reads: Cell::new(0),
    })
}

/// Generates a pool with no labeled samples at all: every mask sits behind
/// the counted [`SceneBatch::ground_truth`] accessor.
pub fn make_unlabeled_pool(
    dims: &ModelDims,
    n_total: usize,
    modes: &[WeatherConfig],
    seed: u64,
) -> Result<SceneBatch, SynthError> {
    for mode in modes {
        mode.validate()?;
    }
    let mut images = Vec::with_capacity(n_total);
    let mut masks = Vec::with_capacity(n_total);
    let mut weather_list = Vec::with_capacity(n_total);
    for index in 0..n_total {
        let weather = if modes.is_empty() {
            WeatherConfig::clean()
        } else {
            modes[index % modes.len()]
        };
        let sample_seed = mix64(seed, index as u64);
        let (image, mask) = generate_scene(dims, &weather, sample_seed);
        images.push(image);
        masks.push(mask);
        weather_list.push(weather);
    }
    Ok(SceneBatch {
        dims: dims.clone(),
        images,
        masks,
        labeled: vec![false; n_total],
        weather: weather_list,
        seed,
        hidden_reads: Cell::new(0),
    })
}

/// Writes an 8-bit binary PPM of the first three channels.
pub fn write_ppm(path: &Path, image: &Tensor) -> io::Result<()> {
    let shape = image.shape();
    let (h, w, ch) = (shape[0], shape[1], shape[2]);
    let mut out = Vec::with_capacity(h * w * 3 + 32);
    out.extend_from_slice(format!("P6\n{w} {h}\n255\n").as_bytes());
    for pixel in image.data().chunks(ch) {
        for c in 0..3 {
            let v = pixel[c.min(ch - 1)];
            out.push((v * 255.0).round().clamp(0.0, 255.0) as u8);
        }
    }
    std::fs::File::create(path)?.write_all(&out)
}

/// Writes the mask as an 8-bit binary PGM, classes spread over the gray
/// range for visibility.
pub fn write_pgm(path: &Path, mask: &[usize], width: usize, classes: usize) -> io::Result<()> {
    let height = mask.len() / width;
    let mut out = Vec::with_capacity(mask.len() + 32);
    out.extend_from_slice(format!("P5\n{width} {height}\n255\n").as_bytes());
    let scale = 255.0 / (classes.max(2) - 1) as f64;
    for label in mask {
        out.push(((*label as f64) * scale).round().clamp(0.0, 255.0) as u8);
    }
    std::fs::File::create(path)?.write_all(&out)
}
