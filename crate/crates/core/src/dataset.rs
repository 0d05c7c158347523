//! In-memory datasets and their on-disk layout.
//!
//! ```text
//! <root>/manifest.txt
//! <root>/scenes/<split>/<index>.img     binary PPM (P6), 8-bit RGB
//! <root>/scenes/<split>/<index>.labels  row-major u8 class ids
//! <root>/scenes/<split>/<index>.points  u32 N | N x 3 f32 xyz | N x 2 u16 row,col | N x u8 labels
//! ```
//! All multi-byte values are little-endian.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3};

use crate::error::{Error, Result};
use crate::geometry::{CameraIntrinsics, PixelIndex};
use crate::scene::{self, SceneGenConfig};
use crate::seed;

pub const SOURCE_TRAIN: &str = "source-train";
pub const SOURCE_VAL: &str = "source-val";
pub const TARGET_TRAIN: &str = "target-train";
pub const TARGET_VAL: &str = "target-val";

/// Labeled source-domain image.
#[derive(Clone, Debug, PartialEq)]
pub struct SourceSample {
    pub image: Array3<f32>,
    pub labels: Array2<u8>,
}

/// Target-domain image with its LiDAR sweep. Carries no labels.
#[derive(Clone, Debug, PartialEq)]
pub struct TargetScene {
    pub image: Array3<f32>,
    pub points: Vec<[f32; 3]>,
    pub pixel_of_point: Vec<PixelIndex>,
}

impl TargetScene {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Held-out labels of a target scene, for evaluation only.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruth {
    pub point_labels: Vec<u8>,
    pub pixel_labels: Array2<u8>,
}

/// Target scenes with their ground truth kept apart.
///
/// Training code receives `scenes()`; the labels are only reachable through
/// [`TargetSplit::evaluation_truth`].
#[derive(Clone, Debug, PartialEq)]
pub struct TargetSplit {
    scenes: Vec<TargetScene>,
    truth: Vec<GroundTruth>,
}

impl TargetSplit {
    pub fn new(scenes: Vec<TargetScene>, truth: Vec<GroundTruth>) -> Result<Self> {
        if scenes.len() != truth.len() {
            return Err(Error::Contract(format!("{} scenes but {} label sets", scenes.len(), truth.len())));
        }
        for (i, (s, t)) in scenes.iter().zip(&truth).enumerate() {
            if s.points.len() != t.point_labels.len() || s.pixel_of_point.len() != s.points.len() {
                return Err(Error::Contract(format!("scene {i}: point/label length mismatch")));
            }
        }
        Ok(TargetSplit { scenes, truth })
    }

    pub fn scenes(&self) -> &[TargetScene] {
        &self.scenes
    }

    pub fn evaluation_truth(&self) -> &[GroundTruth] {
        &self.truth
    }

    pub fn len(&self) -> usize {
        self.scenes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scenes.is_empty()
    }
}

/// Counts and geometry recorded in `manifest.txt`.
#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub num_classes: usize,
    pub height: usize,
    pub width: usize,
    pub focal: f64,
    pub seed: u64,
    pub source_train: usize,
    pub source_val: usize,
    pub target_train: usize,
    pub target_val: usize,
}

impl Manifest {
    pub fn camera(&self) -> Result<CameraIntrinsics> {
        CameraIntrinsics::new(
            self.focal,
            (self.width as f64 - 1.0) / 2.0,
            (self.height as f64 - 1.0) / 2.0,
            self.height,
            self.width,
        )
    }

    pub fn to_text(&self) -> String {
        format!(
            "# synthetic cross-modal segmentation dataset\n\
             num_classes = {}\nheight = {}\nwidth = {}\nfocal = {}\nseed = {}\n\
             {SOURCE_TRAIN} = {}\n{SOURCE_VAL} = {}\n{TARGET_TRAIN} = {}\n{TARGET_VAL} = {}\n",
            self.num_classes,
            self.height,
            self.width,
            self.focal,
            self.seed,
            self.source_train,
            self.source_val,
            self.target_train,
            self.target_val
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub manifest: Manifest,
    pub source_train: Vec<SourceSample>,
    pub source_val: Vec<SourceSample>,
    pub target_train: TargetSplit,
    pub target_val: TargetSplit,
}

impl Dataset {
    pub fn camera(&self) -> Result<CameraIntrinsics> {
        self.manifest.camera()
    }

    pub fn num_classes(&self) -> usize {
        self.manifest.num_classes
    }
}

/// Rounds an image to the 8-bit grid used on disk, so generated and reloaded data agree.
fn quantize(image: &mut Array3<f32>) {
    image.mapv_inplace(|v| quantize_value(v) as f32 / 255.0);
}

fn quantize_value(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

const SPLIT_SOURCE_TRAIN: u64 = 1;
const SPLIT_SOURCE_VAL: u64 = 2;
const SPLIT_TARGET_TRAIN: u64 = 3;
const SPLIT_TARGET_VAL: u64 = 4;

pub fn generate_source_sample(config: &SceneGenConfig, split: u64, index: usize) -> Result<SourceSample> {
    let camera = config.camera()?;
    let world = scene::generate_world(seed::derive_seed(config.seed, &[split, index as u64, 0]), config)?;
    let (mut image, labels) = scene::render_image(
        &world,
        &camera,
        &config.source_style,
        config.num_classes,
        seed::derive_seed(config.seed, &[split, index as u64, 1]),
    );
    quantize(&mut image);
    Ok(SourceSample { image, labels })
}

pub fn generate_target_scene(config: &SceneGenConfig, split: u64, index: usize) -> Result<(TargetScene, GroundTruth)> {
    let camera = config.camera()?;
    let world = scene::generate_world(seed::derive_seed(config.seed, &[split, index as u64, 0]), config)?;
    let (mut image, pixel_labels) = scene::render_image(
        &world,
        &camera,
        &config.target_style,
        config.num_classes,
        seed::derive_seed(config.seed, &[split, index as u64, 1]),
    );
    quantize(&mut image);
    let sweep = scene::sample_lidar(
        &world,
        &camera,
        config.n_rays,
        seed::derive_seed(config.seed, &[split, index as u64, 2]),
        &format!("split {split} index {index}"),
    )?;
    Ok((
        TargetScene {
            image,
            points: sweep.points,
            pixel_of_point: sweep.pixel_of_point,
        },
        GroundTruth {
            point_labels: sweep.labels,
            pixel_labels,
        },
    ))
}

fn generate_target_split(config: &SceneGenConfig, split: u64, count: usize) -> Result<TargetSplit> {
    let (scenes, truth) = (0..count)
        .map(|i| generate_target_scene(config, split, i))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .unzip();
    TargetSplit::new(scenes, truth)
}

/// Generates all four splits. Source and target draw from disjoint world seeds.
pub fn generate_dataset(config: &SceneGenConfig) -> Result<Dataset> {
    config.validate()?;
    let source = |split, count| (0..count).map(|i| generate_source_sample(config, split, i)).collect::<Result<Vec<_>>>();
    Ok(Dataset {
        manifest: Manifest {
            num_classes: config.num_classes,
            height: config.height,
            width: config.width,
            focal: config.focal,
            seed: config.seed,
            source_train: config.source_train,
            source_val: config.source_val,
            target_train: config.target_train,
            target_val: config.target_val,
        },
        source_train: source(SPLIT_SOURCE_TRAIN, config.source_train)?,
        source_val: source(SPLIT_SOURCE_VAL, config.source_val)?,
        target_train: generate_target_split(config, SPLIT_TARGET_TRAIN, config.target_train)?,
        target_val: generate_target_split(config, SPLIT_TARGET_VAL, config.target_val)?,
    })
}

// ---------------------------------------------------------------------------
// Encoders and decoders.

pub fn encode_ppm(image: &Array3<f32>) -> Vec<u8> {
    let (h, w, _) = image.dim();
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.extend(image.iter().map(|&v| quantize_value(v)));
    out
}

fn skip_ws_and_comments(bytes: &[u8], mut pos: usize) -> usize {
    loop {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
        } else {
            return pos;
        }
    }
}

fn read_header_number(bytes: &[u8], pos: &mut usize) -> Result<usize> {
    *pos = skip_ws_and_comments(bytes, *pos);
    let start = *pos;
    while *pos < bytes.len() && bytes[*pos].is_ascii_digit() {
        *pos += 1;
    }
    let digits = std::str::from_utf8(&bytes[start..*pos]).unwrap_or("");
    if digits.is_empty() || digits.len() > 9 {
        return Err(Error::Format(format!("bad PPM header number at byte {start}")));
    }
    digits.parse().map_err(|_| Error::Format("bad PPM header number".into()))
}

/// Decodes an 8-bit binary PPM into `H x W x 3` values in `[0, 1]`.
pub fn decode_ppm(bytes: &[u8]) -> Result<Array3<f32>> {
    if !bytes.starts_with(b"P6") {
        return Err(Error::Format("missing P6 magic".into()));
    }
    let mut pos = 2;
    let width = read_header_number(bytes, &mut pos)?;
    let height = read_header_number(bytes, &mut pos)?;
    let maxval = read_header_number(bytes, &mut pos)?;
    if maxval != 255 {
        return Err(Error::Format(format!("unsupported PPM maxval {maxval}")));
    }
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(Error::Format("PPM header not terminated by whitespace".into()));
    }
    pos += 1;
    let expected = width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(3))
        .ok_or_else(|| Error::Format("PPM dimensions overflow".into()))?;
    let data = &bytes[pos..];
    if data.len() != expected {
        return Err(Error::Format(format!("PPM payload has {} bytes, expected {expected}", data.len())));
    }
    Array3::from_shape_vec((height, width, 3), data.iter().map(|&b| b as f32 / 255.0).collect())
        .map_err(|e| Error::Format(e.to_string()))
}

pub fn encode_labels(labels: &Array2<u8>) -> Vec<u8> {
    labels.iter().copied().collect()
}

pub fn decode_labels(bytes: &[u8], height: usize, width: usize, num_classes: usize) -> Result<Array2<u8>> {
    if Some(bytes.len()) != height.checked_mul(width) {
        return Err(Error::Format(format!("label file has {} bytes, expected {height}x{width}", bytes.len())));
    }
    if let Some(&bad) = bytes.iter().find(|&&b| b as usize >= num_classes) {
        return Err(Error::Format(format!("label {bad} outside [0, {num_classes})")));
    }
    Array2::from_shape_vec((height, width), bytes.to_vec()).map_err(|e| Error::Format(e.to_string()))
}

pub fn encode_points(scene: &TargetScene, labels: &[u8]) -> Result<Vec<u8>> {
    let n = scene.points.len();
    if labels.len() != n || scene.pixel_of_point.len() != n {
        return Err(Error::Contract("points, pixels and labels differ in length".into()));
    }
    let n32 = u32::try_from(n).map_err(|_| Error::Contract("too many points".into()))?;
    let mut out = Vec::with_capacity(4 + n * 17);
    out.extend_from_slice(&n32.to_le_bytes());
    for p in &scene.points {
        for v in p {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    for px in &scene.pixel_of_point {
        for v in [px.row, px.col] {
            let v = u16::try_from(v).map_err(|_| Error::Contract("pixel index exceeds u16".into()))?;
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out.extend_from_slice(labels);
    Ok(out)
}

/// Decoded `.points` payload: coordinates, pixel correspondences and labels.
#[derive(Clone, Debug, PartialEq)]
pub struct PointRecord {
    pub points: Vec<[f32; 3]>,
    pub pixel_of_point: Vec<PixelIndex>,
    pub labels: Vec<u8>,
}

pub fn decode_points(bytes: &[u8]) -> Result<PointRecord> {
    let header: [u8; 4] = bytes
        .get(..4)
        .and_then(|b| b.try_into().ok())
        .ok_or_else(|| Error::Format("points file shorter than its header".into()))?;
    let n = u32::from_le_bytes(header) as usize;
    let expected = n.checked_mul(17).and_then(|b| b.checked_add(4));
    if expected != Some(bytes.len()) {
        return Err(Error::Format(format!("points file has {} bytes for N = {n}", bytes.len())));
    }
    let body = &bytes[4..];
    let (xyz, rest) = body.split_at(n * 12);
    let (pix, labels) = rest.split_at(n * 4);
    let f = |c: &[u8]| f32::from_le_bytes([c[0], c[1], c[2], c[3]]);
    let u = |c: &[u8]| u16::from_le_bytes([c[0], c[1]]) as usize;
    let points = xyz.chunks_exact(12).map(|c| [f(&c[0..4]), f(&c[4..8]), f(&c[8..12])]).collect();
    let pixel_of_point = pix.chunks_exact(4).map(|c| PixelIndex::new(u(&c[0..2]), u(&c[2..4]))).collect();
    Ok(PointRecord {
        points,
        pixel_of_point,
        labels: labels.to_vec(),
    })
}

pub fn decode_manifest(text: &str) -> Result<Manifest> {
    let pairs = crate::config::parse_key_values(text)?;
    let mut m = Manifest {
        num_classes: 0,
        height: 0,
        width: 0,
        focal: 0.0,
        seed: 0,
        source_train: 0,
        source_val: 0,
        target_train: 0,
        target_val: 0,
    };
    let mut seen = std::collections::HashSet::new();
    for (line, key, value) in pairs {
        let int = || value.parse::<usize>().map_err(|_| Error::Format(format!("line {line}: {key} expects an integer")));
        match key.as_str() {
            "num_classes" => m.num_classes = int()?,
            "height" => m.height = int()?,
            "width" => m.width = int()?,
            "focal" => {
                m.focal = value.parse().map_err(|_| Error::Format(format!("line {line}: bad focal")))?
            }
            "seed" => m.seed = value.parse().map_err(|_| Error::Format(format!("line {line}: bad seed")))?,
            SOURCE_TRAIN => m.source_train = int()?,
            SOURCE_VAL => m.source_val = int()?,
            TARGET_TRAIN => m.target_train = int()?,
            TARGET_VAL => m.target_val = int()?,
            _ => return Err(Error::Format(format!("line {line}: unknown manifest key {key:?}"))),
        }
        seen.insert(key);
    }
    for required in ["num_classes", "height", "width", "focal", "seed"] {
        if !seen.contains(required) {
            return Err(Error::Format(format!("manifest lacks {required}")));
        }
    }
    if !(2..=255).contains(&m.num_classes) || m.height == 0 || m.width == 0 || m.height > 65535 || m.width > 65535 {
        return Err(Error::Format("manifest geometry out of range".into()));
    }
    m.camera().map_err(|e| Error::Format(e.to_string()))?;
    Ok(m)
}

// ---------------------------------------------------------------------------
// Directory IO.

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn split_dir(root: &Path, split: &str) -> PathBuf {
    root.join("scenes").join(split)
}

pub fn write_dataset(dataset: &Dataset, root: &Path) -> Result<()> {
    for split in [SOURCE_TRAIN, SOURCE_VAL, TARGET_TRAIN, TARGET_VAL] {
        let dir = split_dir(root, split);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    for (split, samples) in [(SOURCE_TRAIN, &dataset.source_train), (SOURCE_VAL, &dataset.source_val)] {
        let dir = split_dir(root, split);
        for (i, s) in samples.iter().enumerate() {
            write(&dir.join(format!("{i}.img")), &encode_ppm(&s.image))?;
            write(&dir.join(format!("{i}.labels")), &encode_labels(&s.labels))?;
        }
    }
    for (split, target) in [(TARGET_TRAIN, &dataset.target_train), (TARGET_VAL, &dataset.target_val)] {
        let dir = split_dir(root, split);
        for (i, (s, t)) in target.scenes().iter().zip(target.evaluation_truth()).enumerate() {
            write(&dir.join(format!("{i}.img")), &encode_ppm(&s.image))?;
            write(&dir.join(format!("{i}.labels")), &encode_labels(&t.pixel_labels))?;
            write(&dir.join(format!("{i}.points")), &encode_points(s, &t.point_labels)?)?;
        }
    }
    write(&root.join("manifest.txt"), dataset.manifest.to_text().as_bytes())
}

fn read_image(path: &Path, m: &Manifest) -> Result<Array3<f32>> {
    let image = decode_ppm(&read(path)?)?;
    if image.dim() != (m.height, m.width, 3) {
        return Err(Error::Format(format!("{}: image size differs from manifest", path.display())));
    }
    Ok(image)
}

fn read_source(root: &Path, split: &str, count: usize, m: &Manifest) -> Result<Vec<SourceSample>> {
    let dir = split_dir(root, split);
    (0..count)
        .map(|i| {
            let image = read_image(&dir.join(format!("{i}.img")), m)?;
            let labels = decode_labels(&read(&dir.join(format!("{i}.labels")))?, m.height, m.width, m.num_classes)?;
            Ok(SourceSample { image, labels })
        })
        .collect()
}

fn read_target(root: &Path, split: &str, count: usize, m: &Manifest) -> Result<TargetSplit> {
    let dir = split_dir(root, split);
    let mut scenes = Vec::with_capacity(count);
    let mut truth = Vec::with_capacity(count);
    for i in 0..count {
        let image = read_image(&dir.join(format!("{i}.img")), m)?;
        let pixel_labels = decode_labels(&read(&dir.join(format!("{i}.labels")))?, m.height, m.width, m.num_classes)?;
        let path = dir.join(format!("{i}.points"));
        let rec = decode_points(&read(&path)?)?;
        if rec.pixel_of_point.iter().any(|p| p.row >= m.height || p.col >= m.width)
            || rec.labels.iter().any(|&l| l as usize >= m.num_classes)
            || rec.points.is_empty()
        {
            return Err(Error::Format(format!("{}: out-of-range pixel or label", path.display())));
        }
        scenes.push(TargetScene {
            image,
            points: rec.points,
            pixel_of_point: rec.pixel_of_point,
        });
        truth.push(GroundTruth {
            point_labels: rec.labels,
            pixel_labels,
        });
    }
    TargetSplit::new(scenes, truth)
}

pub fn read_dataset(root: &Path) -> Result<Dataset> {
    let manifest_path = root.join("manifest.txt");
    let text = String::from_utf8(read(&manifest_path)?).map_err(|_| Error::Format("manifest is not UTF-8".into()))?;
    let m = decode_manifest(&text)?;
    Ok(Dataset {
        source_train: read_source(root, SOURCE_TRAIN, m.source_train, &m)?,
        source_val: read_source(root, SOURCE_VAL, m.source_val, &m)?,
        target_train: read_target(root, TARGET_TRAIN, m.target_train, &m)?,
        target_val: read_target(root, TARGET_VAL, m.target_val, &m)?,
        manifest: m,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::sample_plane_at_points;
    use proptest::prelude::*;

    pub(crate) fn tiny_config() -> SceneGenConfig {
        SceneGenConfig {
            height: 24,
            width: 32,
            focal: 18.0,
            n_rays: 300,
            source_train: 3,
            source_val: 1,
            target_train: 3,
            target_val: 2,
            ..SceneGenConfig::default()
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_dataset(&tiny_config()).unwrap();
        let b = generate_dataset(&tiny_config()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn truth_is_consistent_with_pixels() {
        let d = generate_dataset(&tiny_config()).unwrap();
        for split in [&d.target_train, &d.target_val] {
            for (s, t) in split.scenes().iter().zip(split.evaluation_truth()) {
                assert!(!s.is_empty());
                let sampled = sample_plane_at_points(t.pixel_labels.view(), &s.pixel_of_point).unwrap();
                assert_eq!(sampled, t.point_labels);
            }
        }
    }

    #[test]
    fn directory_round_trip() {
        let d = generate_dataset(&tiny_config()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&d, dir.path()).unwrap();
        assert!(dir.path().join("scenes/target-train/2.points").exists());
        let back = read_dataset(dir.path()).unwrap();
        assert_eq!(back, d);
    }

    #[test]
    fn ppm_header_accepts_comments() {
        let bytes = b"P6 # comment\n2 1\n255\n\x00\x00\x00\xff\xff\xff";
        let img = decode_ppm(bytes).unwrap();
        assert_eq!(img.dim(), (1, 2, 3));
        assert_eq!(img[[0, 1, 2]], 1.0);
    }

    #[test]
    fn malformed_inputs_rejected() {
        assert!(decode_ppm(b"P5\n1 1\n255\n\x00").is_err());
        assert!(decode_ppm(b"P6\n1 1\n255\n\x00").is_err());
        assert!(decode_ppm(b"P6\n99999999999 1\n255\n").is_err());
        assert!(decode_points(&[1, 0, 0]).is_err());
        assert!(decode_points(&[1, 0, 0, 0, 1]).is_err());
        assert!(decode_points(&[0xff; 4]).is_err());
        assert!(decode_labels(&[0, 1, 7], 1, 3, 6).is_err());
        assert!(decode_manifest("num_classes = 6\nheight = 4\n").is_err());
        assert!(decode_manifest("bogus = 1\n").is_err());
    }

    proptest! {
        #[test]
        fn points_round_trip(raw in proptest::collection::vec((any::<f32>(), 0u16..100, 0u16..100, any::<u8>()), 0..40)) {
            let scene = TargetScene {
                image: Array3::zeros((1, 1, 3)),
                points: raw.iter().map(|r| [r.0, -r.0, 1.0]).collect(),
                pixel_of_point: raw.iter().map(|r| PixelIndex::new(r.1 as usize, r.2 as usize)).collect(),
            };
            let labels: Vec<u8> = raw.iter().map(|r| r.3).collect();
            let rec = decode_points(&encode_points(&scene, &labels).unwrap()).unwrap();
            prop_assert_eq!(rec.pixel_of_point, scene.pixel_of_point);
            prop_assert_eq!(rec.labels, labels);
            for (a, b) in rec.points.iter().zip(&scene.points) {
                prop_assert_eq!(a.map(f32::to_bits), b.map(f32::to_bits));
            }
        }

        #[test]
        fn ppm_round_trip(h in 1usize..6, w in 1usize..6, seed in any::<u64>()) {
            use rand::Rng;
            let mut rng = crate::seed::stream(seed, &[]);
            let mut img = Array3::from_shape_fn((h, w, 3), |_| rng.random::<f32>());
            quantize(&mut img);
            prop_assert_eq!(decode_ppm(&encode_ppm(&img)).unwrap(), img);
        }
    }
}
