//! Noise-prediction guidance: diffusion schedule, score distillation gradients, the analytic
//! mock predictor and an HTTP adapter for an external service.

use std::f64::consts::PI;
use std::time::Duration;

use base64::Engine;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mesh::{merge_meshes, TriMesh, Vec3};
use crate::raster::{rasterize, Camera, Similarity};
use crate::rig::{lbs_forward, Keypoint, Pose, Rig};

#[derive(Debug, thiserror::Error)]
pub enum GuidanceError {
    #[error("request timed out or endpoint unreachable: {0}")]
    Timeout(String),
    #[error("service answered HTTP {status}: {body}")]
    Http { status: u16, body: String },
    #[error("malformed response: {0}")]
    Malformed(String),
    #[error("no guidance available: {0}")]
    Unavailable(String),
}

/// Row-major `H × W × C` image.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height * channels {
            return Err(Error::DimensionMismatch(format!(
                "{} samples for a {width}x{height}x{channels} image",
                data.len()
            )));
        }
        Ok(Image {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn zeros(width: usize, height: usize, channels: usize) -> Self {
        Image {
            width,
            height,
            channels,
            data: vec![0.0; width * height * channels],
        }
    }

    pub fn from_vec3(width: usize, height: usize, pixels: &[Vec3]) -> Result<Self> {
        Image::new(width, height, 3, pixels.iter().flat_map(|p| [p.x, p.y, p.z]).collect())
    }

    pub fn to_vec3(&self) -> Vec<Vec3> {
        self.data.chunks_exact(3).map(|c| Vec3::new(c[0], c[1], c[2])).collect()
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.width == other.width && self.height == other.height && self.channels == other.channels
    }
}

/// Cumulative products `ᾱ_t` and weights `ω(t)` for `t = 1..=T`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    alpha_bar: Vec<f64>,
    weight: Vec<f64>,
}

impl NoiseSchedule {
    /// Linear β from `beta_start` to `beta_end`, `ω(t) = 1 − ᾱ_t`.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps < 2 || !(0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::InvalidArgument("invalid noise schedule".into()));
        }
        let mut alpha_bar = Vec::with_capacity(steps);
        let mut acc = 1.0;
        for i in 0..steps {
            let beta = beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64;
            acc *= 1.0 - beta;
            alpha_bar.push(acc);
        }
        let weight = alpha_bar.iter().map(|a| 1.0 - a).collect();
        Ok(NoiseSchedule { alpha_bar, weight })
    }

    pub fn steps(&self) -> usize {
        self.alpha_bar.len()
    }

    fn check(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::InvalidArgument(format!(
                "timestep {t} outside 1..={}",
                self.steps()
            )));
        }
        Ok(())
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t - 1]
    }

    pub fn weight(&self, t: usize) -> f64 {
        self.weight[t - 1]
    }

    /// Uniform draw from `[0.02 T, 0.98 T]`.
    pub fn sample_t(&self, rng: &mut impl Rng) -> usize {
        let n = self.steps() as f64;
        let lo = ((0.02 * n).round() as usize).max(1);
        let hi = ((0.98 * n).round() as usize).max(lo);
        rng.random_range(lo..=hi)
    }
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        NoiseSchedule::linear(1000, 1e-4, 2e-2).expect("default schedule is valid")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ViewTag {
    Front,
    Side,
    Back,
}

impl ViewTag {
    /// Front within 45° of +z, back within 45° of −z.
    pub fn from_azimuth(azimuth: f64) -> ViewTag {
        let a = (azimuth + PI).rem_euclid(2.0 * PI) - PI;
        if a.abs() <= PI / 4.0 {
            ViewTag::Front
        } else if a.abs() >= 3.0 * PI / 4.0 {
            ViewTag::Back
        } else {
            ViewTag::Side
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ViewTag::Front => "front",
            ViewTag::Side => "side",
            ViewTag::Back => "back",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GuidanceSpace {
    Human,
    Composite,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Condition {
    pub text_positive: String,
    pub text_negative: String,
    pub pose_keypoints: Vec<Keypoint>,
    pub view_tag: ViewTag,
}

impl Condition {
    pub fn new(
        space: GuidanceSpace,
        gender: &str,
        object: &str,
        view: ViewTag,
        pose_keypoints: Vec<Keypoint>,
    ) -> Result<Self> {
        if pose_keypoints.iter().any(|k| !k.x.is_finite() || !k.y.is_finite()) {
            return Err(Error::InvalidArgument("keypoints must be finite".into()));
        }
        let (text_positive, text_negative) = build_prompts(space, gender, object, view);
        Ok(Condition {
            text_positive,
            text_negative,
            pose_keypoints,
            view_tag: view,
        })
    }
}

/// `(positive, negative)` prompt pair; the negative is empty in composite space.
pub fn build_prompts(space: GuidanceSpace, gender: &str, object: &str, view: ViewTag) -> (String, String) {
    match space {
        GuidanceSpace::Human => (
            format!("A photo of a {gender}, {} view", view.as_str()),
            object.to_string(),
        ),
        GuidanceSpace::Composite => (
            format!("A photo of a {gender} wearing {object}, {} view", view.as_str()),
            String::new(),
        ),
    }
}

/// Noise predictor `ε̂(x_t; cond, t)`.
pub trait GuidanceModel: Send + Sync {
    fn predict_noise(&self, x_t: &Image, cond: &Condition, t: usize) -> std::result::Result<Image, GuidanceError>;
}

/// One rendered view that needs guidance.
#[derive(Clone, Copy, Debug)]
pub struct ViewRequest<'a> {
    pub space: GuidanceSpace,
    pub camera: &'a Camera,
    pub pose: &'a Pose,
    pub zoom: &'a Similarity,
    /// 3 for normals and colours.
    pub channels: usize,
    /// `true` for the colour stage.
    pub rgb: bool,
}

/// Supplies the predictor for each view; a fixed model ignores the request.
pub trait GuidanceProvider: Send + Sync {
    fn model_for(&self, request: &ViewRequest<'_>) -> std::result::Result<Box<dyn GuidanceModel + '_>, GuidanceError>;
}

/// `x_t = √ᾱ_t x + √(1 − ᾱ_t) ε` with `ε ~ N(0, I)` drawn from `seed`.
pub fn forward_diffuse(x: &Image, t: usize, schedule: &NoiseSchedule, seed: u64) -> Result<(Image, Vec<f64>)> {
    schedule.check(t)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let eps: Vec<f64> = (0..x.data.len()).map(|_| rng.sample(StandardNormal)).collect();
    let a = schedule.alpha_bar(t);
    let (sa, sn) = (a.sqrt(), (1.0 - a).sqrt());
    let data = x.data.iter().zip(&eps).map(|(x, e)| sa * x + sn * e).collect();
    Ok((Image { data, ..x.clone() }, eps))
}

/// Per-pixel score distillation gradient `ω(t) √ᾱ_t (ε̂ − ε)`.
pub fn sds_pixel_gradient(
    x: &Image,
    cond: &Condition,
    model: &dyn GuidanceModel,
    schedule: &NoiseSchedule,
    t: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    let (x_t, eps) = forward_diffuse(x, t, schedule, seed)?;
    let eps_hat = model.predict_noise(&x_t, cond, t)?;
    if !eps_hat.same_shape(x) {
        return Err(Error::DimensionMismatch(format!(
            "predicted noise is {}x{}x{}, image is {}x{}x{}",
            eps_hat.width, eps_hat.height, eps_hat.channels, x.width, x.height, x.channels
        )));
    }
    let scale = schedule.weight(t) * schedule.alpha_bar(t).sqrt();
    Ok(eps_hat.data.iter().zip(&eps).map(|(p, e)| scale * (p - e)).collect())
}

/// Predicts the noise that would turn `target` into `x_t`; SDS descent then pulls the
/// rendering toward `target`.
#[derive(Clone, Debug)]
pub struct MockGuidance {
    pub target: Image,
    schedule: NoiseSchedule,
}

impl MockGuidance {
    pub fn new(target: Image, schedule: NoiseSchedule) -> Self {
        MockGuidance { target, schedule }
    }
}

pub fn mock_guidance(target: Image) -> MockGuidance {
    MockGuidance::new(target, NoiseSchedule::default())
}

impl GuidanceModel for MockGuidance {
    fn predict_noise(&self, x_t: &Image, _cond: &Condition, t: usize) -> std::result::Result<Image, GuidanceError> {
        if !x_t.same_shape(&self.target) {
            return Err(GuidanceError::Malformed(
                "image shape differs from the mock target".into(),
            ));
        }
        if t == 0 || t > self.schedule.steps() {
            return Err(GuidanceError::Malformed(format!("timestep {t} out of range")));
        }
        let a = self.schedule.alpha_bar(t);
        let (sa, sn) = (a.sqrt(), (1.0 - a).sqrt());
        let data = x_t
            .data
            .iter()
            .zip(&self.target.data)
            .map(|(x, y)| (x - sa * y) / sn)
            .collect();
        Ok(Image { data, ..x_t.clone() })
    }
}

impl GuidanceProvider for MockGuidance {
    fn model_for(&self, _request: &ViewRequest<'_>) -> std::result::Result<Box<dyn GuidanceModel + '_>, GuidanceError> {
        Ok(Box::new(self.clone()))
    }
}

/// Mock provider that targets a uniform image of `value` in every view.
#[derive(Clone, Debug)]
pub struct ConstantGuidance {
    pub value: Vec3,
    pub schedule: NoiseSchedule,
}

impl ConstantGuidance {
    pub fn new(value: Vec3) -> Self {
        ConstantGuidance {
            value,
            schedule: NoiseSchedule::default(),
        }
    }
}

impl GuidanceProvider for ConstantGuidance {
    fn model_for(&self, request: &ViewRequest<'_>) -> std::result::Result<Box<dyn GuidanceModel + '_>, GuidanceError> {
        let (w, h, c) = (request.camera.width, request.camera.height, request.channels);
        let data = (0..w * h).flat_map(|_| (0..c).map(|k| self.value[k.min(2)])).collect();
        Ok(Box::new(MockGuidance::new(
            Image {
                width: w,
                height: h,
                channels: c,
                data,
            },
            self.schedule.clone(),
        )))
    }
}

/// Mock provider whose target is the reference canonical layers rendered under the
/// requested pose, zoom and camera: normals for geometry, colours for texture.
#[derive(Clone, Debug)]
pub struct ReferenceGuidance {
    pub rig: Rig,
    pub human: TriMesh,
    pub composite: TriMesh,
    pub schedule: NoiseSchedule,
}

impl ReferenceGuidance {
    pub fn new(rig: Rig, human: TriMesh, object: TriMesh) -> Self {
        let composite = merge_meshes(&human, &object);
        ReferenceGuidance {
            rig,
            human,
            composite,
            schedule: NoiseSchedule::default(),
        }
    }

    pub fn target(&self, request: &ViewRequest<'_>) -> Result<Image> {
        let mesh = match request.space {
            GuidanceSpace::Human => &self.human,
            GuidanceSpace::Composite => &self.composite,
        };
        let posed = request.zoom.apply_mesh(&lbs_forward(mesh, &self.rig, request.pose)?);
        let b = rasterize(&posed, request.camera);
        let pixels = if request.rgb { &b.rgb } else { &b.normal };
        Image::from_vec3(b.width, b.height, pixels)
    }
}

impl GuidanceProvider for ReferenceGuidance {
    fn model_for(&self, request: &ViewRequest<'_>) -> std::result::Result<Box<dyn GuidanceModel + '_>, GuidanceError> {
        let target = self
            .target(request)
            .map_err(|e| GuidanceError::Malformed(format!("reference render failed: {e}")))?;
        Ok(Box::new(MockGuidance::new(target, self.schedule.clone())))
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct WireRequest<'a> {
    t: usize,
    text_positive: &'a str,
    text_negative: &'a str,
    view_tag: ViewTag,
    pose_keypoints: Vec<[f64; 3]>,
    height: usize,
    width: usize,
    channels: usize,
    image: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct WireImage {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// Base64 of little-endian f32 samples.
    pub image: String,
}

pub fn encode_image(img: &Image) -> String {
    let bytes: Vec<u8> = img.data.iter().flat_map(|v| (*v as f32).to_le_bytes()).collect();
    base64::engine::general_purpose::STANDARD.encode(bytes)
}

pub fn decode_image(wire: &WireImage) -> std::result::Result<Image, GuidanceError> {
    let bytes = base64::engine::general_purpose::STANDARD
        .decode(wire.image.as_bytes())
        .map_err(|e| GuidanceError::Malformed(format!("bad base64: {e}")))?;
    if bytes.len() != 4 * wire.width * wire.height * wire.channels {
        return Err(GuidanceError::Malformed(format!(
            "{} bytes for a {}x{}x{} image",
            bytes.len(),
            wire.width,
            wire.height,
            wire.channels
        )));
    }
    Ok(Image {
        width: wire.width,
        height: wire.height,
        channels: wire.channels,
        data: bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect(),
    })
}

/// HTTP client for `POST <endpoint>/predict_noise`.
pub struct RemoteGuidance {
    url: String,
    agent: ureq::Agent,
    retries: usize,
}

pub fn remote_guidance(endpoint_url: &str, timeout: Duration) -> RemoteGuidance {
    let agent: ureq::Agent = ureq::Agent::config_builder()
        .timeout_global(Some(timeout))
        .http_status_as_error(false)
        .build()
        .into();
    RemoteGuidance {
        url: format!("{}/predict_noise", endpoint_url.trim_end_matches('/')),
        agent,
        retries: 2,
    }
}

impl RemoteGuidance {
    fn attempt(&self, body: &str) -> std::result::Result<String, (GuidanceError, bool)> {
        let resp = self
            .agent
            .post(&self.url)
            .content_type("application/json")
            .send(body)
            .map_err(|e| (GuidanceError::Timeout(e.to_string()), true))?;
        let status = resp.status().as_u16();
        let text = resp
            .into_body()
            .with_config()
            .limit(1 << 30)
            .read_to_string()
            .map_err(|e| match e {
                ureq::Error::Timeout(_) | ureq::Error::Io(_) => (GuidanceError::Timeout(e.to_string()), true),
                other => (GuidanceError::Malformed(other.to_string()), false),
            })?;
        if status != 200 {
            return Err((GuidanceError::Http { status, body: text }, status >= 500));
        }
        Ok(text)
    }
}

impl GuidanceModel for RemoteGuidance {
    fn predict_noise(&self, x_t: &Image, cond: &Condition, t: usize) -> std::result::Result<Image, GuidanceError> {
        let req = WireRequest {
            t,
            text_positive: &cond.text_positive,
            text_negative: &cond.text_negative,
            view_tag: cond.view_tag,
            pose_keypoints: cond
                .pose_keypoints
                .iter()
                .map(|k| [k.x, k.y, if k.visible { 1.0 } else { 0.0 }])
                .collect(),
            height: x_t.height,
            width: x_t.width,
            channels: x_t.channels,
            image: encode_image(x_t),
        };
        let body = serde_json::to_string(&req).map_err(|e| GuidanceError::Malformed(e.to_string()))?;
        let mut last = None;
        for _ in 0..=self.retries {
            match self.attempt(&body) {
                Ok(text) => {
                    let wire: WireImage =
                        serde_json::from_str(&text).map_err(|e| GuidanceError::Malformed(e.to_string()))?;
                    let img = decode_image(&wire)?;
                    if !img.same_shape(x_t) {
                        return Err(GuidanceError::Malformed(format!(
                            "response is {}x{}x{}, request was {}x{}x{}",
                            img.width, img.height, img.channels, x_t.width, x_t.height, x_t.channels
                        )));
                    }
                    return Ok(img);
                }
                Err((e, retry)) => {
                    if !retry {
                        return Err(e);
                    }
                    last = Some(e);
                }
            }
        }
        Err(last.expect("at least one attempt"))
    }
}

impl GuidanceProvider for RemoteGuidance {
    fn model_for(&self, _request: &ViewRequest<'_>) -> std::result::Result<Box<dyn GuidanceModel + '_>, GuidanceError> {
        Ok(Box::new(RemoteRef(self)))
    }
}

struct RemoteRef<'a>(&'a RemoteGuidance);

impl GuidanceModel for RemoteRef<'_> {
    fn predict_noise(&self, x_t: &Image, cond: &Condition, t: usize) -> std::result::Result<Image, GuidanceError> {
        self.0.predict_noise(x_t, cond, t)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cond() -> Condition {
        Condition::new(GuidanceSpace::Human, "woman", "hat", ViewTag::Front, vec![]).unwrap()
    }

    fn img(seed: u64, n: usize) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::new(n, n, 3, (0..n * n * 3).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn schedule_shape() {
        let s = NoiseSchedule::default();
        assert_eq!(s.steps(), 1000);
        assert!((s.alpha_bar(1) - 0.9999).abs() < 1e-12);
        for t in 2..=1000 {
            assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
            assert!(s.weight(t) > 0.0);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..1000 {
            let t = s.sample_t(&mut rng);
            assert!((20..=980).contains(&t));
        }
    }

    #[test]
    fn forward_diffuse_limits_and_errors() {
        let s = NoiseSchedule::default();
        let x = img(1, 8);
        let (xt, _) = forward_diffuse(&x, 1, &s, 3).unwrap();
        for (a, b) in xt.data.iter().zip(&x.data) {
            assert!((a - b).abs() < 0.05);
        }
        assert_eq!(
            forward_diffuse(&x, 500, &s, 9).unwrap(),
            forward_diffuse(&x, 500, &s, 9).unwrap()
        );
        assert!(forward_diffuse(&x, 0, &s, 0).is_err());
        assert!(forward_diffuse(&x, 1001, &s, 0).is_err());
    }

    #[test]
    fn mock_gradient_is_exact_and_noise_free() {
        let s = NoiseSchedule::default();
        let x = img(1, 8);
        let target = img(2, 8);
        let m = mock_guidance(target.clone());
        for t in [20, 300, 980] {
            let g = sds_pixel_gradient(&x, &cond(), &m, &s, t, 11).unwrap();
            let g2 = sds_pixel_gradient(&x, &cond(), &m, &s, t, 12).unwrap();
            let a = s.alpha_bar(t);
            let k = s.weight(t) * a / (1.0 - a).sqrt();
            for i in 0..g.len() {
                let expected = k * (x.data[i] - target.data[i]);
                assert!((g[i] - expected).abs() <= 1e-9 * expected.abs().max(1e-3));
                assert!((g[i] - g2[i]).abs() <= 1e-9 * expected.abs().max(1e-3));
                assert!(g[i] == 0.0 || g[i].signum() == (x.data[i] - target.data[i]).signum());
            }
        }
        let same = sds_pixel_gradient(&target, &cond(), &m, &s, 100, 5).unwrap();
        assert!(same.iter().all(|g| g.abs() < 1e-12));
    }

    #[test]
    fn mock_rejects_wrong_shape() {
        let m = mock_guidance(img(0, 8));
        assert!(matches!(
            m.predict_noise(&img(0, 4), &cond(), 10),
            Err(GuidanceError::Malformed(_))
        ));
    }

    #[test]
    fn prompt_templates() {
        assert_eq!(
            build_prompts(GuidanceSpace::Human, "woman", "hat", ViewTag::Front),
            ("A photo of a woman, front view".into(), "hat".into())
        );
        assert_eq!(
            build_prompts(GuidanceSpace::Composite, "man", "jacket", ViewTag::Back).0,
            "A photo of a man wearing jacket, back view"
        );
        assert!(build_prompts(GuidanceSpace::Human, "man", "x", ViewTag::Side)
            .0
            .contains("side view"));
        assert!(build_prompts(GuidanceSpace::Composite, "man", "x", ViewTag::Side)
            .1
            .is_empty());
    }

    #[test]
    fn view_tags() {
        assert_eq!(ViewTag::from_azimuth(0.1), ViewTag::Front);
        assert_eq!(ViewTag::from_azimuth(2.0 * PI - 0.1), ViewTag::Front);
        assert_eq!(ViewTag::from_azimuth(PI / 2.0), ViewTag::Side);
        assert_eq!(ViewTag::from_azimuth(PI), ViewTag::Back);
    }

    #[test]
    fn wire_round_trip() {
        let x = img(4, 5);
        let w = WireImage {
            height: 5,
            width: 5,
            channels: 3,
            image: encode_image(&x),
        };
        let back = decode_image(&w).unwrap();
        for (a, b) in back.data.iter().zip(&x.data) {
            assert_eq!(*a, *b as f32 as f64);
        }
        let bad = WireImage { height: 6, ..w };
        assert!(matches!(decode_image(&bad), Err(GuidanceError::Malformed(_))));
    }
}
