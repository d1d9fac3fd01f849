//! Deterministic synthetic keypoint scenes: Gaussian blobs of distinct
//! amplitude over a smooth background, labelled with the blob centres.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::certify::LabeledImage;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneParams {
    pub height: usize,
    pub width: usize,
    pub keypoints: usize,
    /// Blob standard deviation in pixels.
    pub blob_sigma: f64,
    /// Radius of the keypoint template relative to `min(height, width)`.
    pub template_radius: f64,
    /// Maximum absolute rotation of the template, radians.
    pub max_rotation: f64,
    pub scale_range: (f64, f64),
    /// Peak of the background gradient.
    pub background: f64,
    /// Minimum distance of every keypoint from the border, pixels.
    pub margin: f64,
}

impl Default for SceneParams {
    fn default() -> Self {
        SceneParams {
            height: 32,
            width: 32,
            keypoints: 8,
            blob_sigma: 1.2,
            template_radius: 0.28,
            max_rotation: std::f64::consts::FRAC_PI_6,
            scale_range: (0.8, 1.2),
            background: 0.15,
            margin: 2.5,
        }
    }
}

impl SceneParams {
    pub fn validate(&self) -> Result<()> {
        if self.height < 8 || self.width < 8 || self.keypoints == 0 {
            return Err(Error::contract("scenes need at least 8x8 pixels and one keypoint"));
        }
        let free = (self.height as f64 - 2.0 * self.margin) * (self.width as f64 - 2.0 * self.margin);
        // Each blob needs roughly a (3σ)² patch to stay distinguishable.
        let patch = (3.0 * self.blob_sigma).powi(2);
        if free <= 0.0 || self.keypoints as f64 * patch > free {
            return Err(Error::contract(format!(
                "{} keypoints do not fit in a {}x{} image",
                self.keypoints, self.height, self.width
            )));
        }
        if !(self.blob_sigma > 0.0 && self.scale_range.0 > 0.0 && self.scale_range.0 <= self.scale_range.1) {
            return Err(Error::contract("invalid blob or scale parameters"));
        }
        Ok(())
    }

    /// Peak amplitude of keypoint `k`; distinct so identities are recoverable.
    pub fn amplitude(&self, k: usize) -> f64 {
        if self.keypoints == 1 {
            return 0.8;
        }
        0.35 + 0.6 * k as f64 / (self.keypoints - 1) as f64
    }
}

/// Renders blobs at `keypoints` (`[x0, y0, ...]`) over a linear background
/// `offset + slope·(cos θ·x + sin θ·y)/width`, clipped to `[0, 1]`.
pub fn render(params: &SceneParams, keypoints: &[f64], background: (f64, f64, f64)) -> Vec<f64> {
    let (h, w) = (params.height, params.width);
    let (offset, slope, theta) = background;
    let two_s2 = 2.0 * params.blob_sigma * params.blob_sigma;
    let mut img = vec![0.0; h * w];
    for r in 0..h {
        for c in 0..w {
            let (x, y) = (c as f64, r as f64);
            let mut v = offset + slope * (theta.cos() * x + theta.sin() * y) / w as f64;
            for (k, kp) in keypoints.chunks(2).enumerate() {
                let d2 = (x - kp[0]).powi(2) + (y - kp[1]).powi(2);
                v += params.amplitude(k) * (-d2 / two_s2).exp();
            }
            img[r * w + c] = v.clamp(0.0, 1.0);
        }
    }
    img
}

fn template(k: usize, n: usize) -> (f64, f64) {
    // Points on an ellipse, slightly irregular so the shape has no symmetry.
    let a = 2.0 * std::f64::consts::PI * k as f64 / n as f64;
    let r = 1.0 + 0.15 * ((3 * k) % 5) as f64 / 4.0;
    (r * a.cos(), 0.8 * r * a.sin())
}

/// One random scene.
pub fn sample_scene<R: Rng + ?Sized>(params: &SceneParams, id: usize, rng: &mut R) -> Result<LabeledImage> {
    params.validate()?;
    let (h, w) = (params.height as f64, params.width as f64);
    let base = params.template_radius * h.min(w);
    for _ in 0..1000 {
        let scale = rng.random_range(params.scale_range.0..=params.scale_range.1) * base;
        let rot = rng.random_range(-params.max_rotation..=params.max_rotation);
        let cx = rng.random_range(0.35 * w..0.65 * w);
        let cy = rng.random_range(0.35 * h..0.65 * h);
        let (s, c) = rot.sin_cos();
        let mut kps = Vec::with_capacity(2 * params.keypoints);
        for k in 0..params.keypoints {
            let (tx, ty) = template(k, params.keypoints);
            let (tx, ty) = if params.keypoints == 1 { (0.0, 0.0) } else { (tx, ty) };
            kps.push(cx + scale * (c * tx - s * ty));
            kps.push(cy + scale * (s * tx + c * ty));
        }
        let inside = kps.chunks(2).all(|p| {
            p[0] >= params.margin && p[0] <= w - 1.0 - params.margin && p[1] >= params.margin && p[1] <= h - 1.0 - params.margin
        });
        if !inside {
            continue;
        }
        let bg = (
            rng.random_range(0.0..=params.background / 2.0),
            rng.random_range(0.0..=params.background / 2.0),
            rng.random_range(0.0..2.0 * std::f64::consts::PI),
        );
        return Ok(LabeledImage { id, image: render(params, &kps, bg), keypoints: kps });
    }
    Err(Error::contract("could not place the keypoint template inside the image"))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub params: SceneParams,
    pub seed: u64,
    pub train: Vec<LabeledImage>,
    pub val: Vec<LabeledImage>,
    pub test: Vec<LabeledImage>,
}

pub fn generate_dataset(params: &SceneParams, n_train: usize, n_val: usize, n_test: usize, seed: u64) -> Result<Dataset> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut next = 0;
    let mut split = |n: usize, rng: &mut ChaCha8Rng| -> Result<Vec<LabeledImage>> {
        (0..n)
            .map(|_| {
                next += 1;
                sample_scene(params, next - 1, rng)
            })
            .collect()
    };
    let train = split(n_train, &mut rng)?;
    let val = split(n_val, &mut rng)?;
    let test = split(n_test, &mut rng)?;
    Ok(Dataset { params: params.clone(), seed, train, val, test })
}

impl Dataset {
    /// SHA-256 over the bit patterns of every image and label, in split order.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for img in self.train.iter().chain(&self.val).chain(&self.test) {
            h.update((img.id as u64).to_le_bytes());
            for v in img.image.iter().chain(&img.keypoints) {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, serde_json::to_vec(self)?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let d: Dataset = serde_json::from_slice(&fs::read(path)?)?;
        let n = d.params.height * d.params.width;
        let all = d.train.iter().chain(&d.val).chain(&d.test);
        for img in all {
            if img.image.len() != n || img.keypoints.len() != 2 * d.params.keypoints {
                return Err(Error::config(format!("dataset image {} has inconsistent size", img.id)));
            }
        }
        Ok(d)
    }
}
