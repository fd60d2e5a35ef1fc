//! Frame sequences: synthetic scene generation and frame-directory I/O.

use std::fs;
use std::io::Cursor;
use std::path::{Path, PathBuf};

use image::{DynamicImage, ImageBuffer, ImageFormat, Luma, Rgb};
use ndarray::{Array2, Array3, ArrayView3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::metrics::BBox;
use crate::tensor;
use crate::{Error, Result};

/// Minimum gap between object intensity and background level.
pub const DETECTABILITY_MARGIN: f64 = 0.3;

/// `B` frames of identical shape `H×W×C`, pixels in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameSequence {
    frames: Vec<Array3<f32>>,
}

impl FrameSequence {
    /// Validates shape agreement and the `[0, 1]` pixel range.
    pub fn new(frames: Vec<Array3<f32>>) -> Result<Self> {
        let first = frames
            .first()
            .ok_or_else(|| Error::Argument("a frame sequence needs at least one frame".into()))?;
        let dim = first.dim();
        if dim.0 == 0 || dim.1 == 0 || dim.2 == 0 {
            return Err(Error::Shape(format!("empty frame shape {dim:?}")));
        }
        for (i, f) in frames.iter().enumerate() {
            if f.dim() != dim {
                return Err(Error::Shape(format!(
                    "frame {i} has shape {:?}, expected {dim:?}",
                    f.dim()
                )));
            }
            if f.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::Argument(format!("frame {i} has pixels outside [0, 1]")));
            }
        }
        Ok(FrameSequence { frames })
    }

    /// Like [`FrameSequence::new`] but clamps pixels into `[0, 1]` first.
    pub fn new_clamped(mut frames: Vec<Array3<f32>>) -> Result<Self> {
        for f in &mut frames {
            f.mapv_inplace(|v| if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) });
        }
        Self::new(frames)
    }

    pub fn frames(&self) -> &[Array3<f32>] {
        &self.frames
    }

    pub fn frame(&self, b: usize) -> &Array3<f32> {
        &self.frames[b]
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// `(H, W, C)`.
    pub fn dims(&self) -> (usize, usize, usize) {
        self.frames[0].dim()
    }

    pub fn height(&self) -> usize {
        self.dims().0
    }

    pub fn width(&self) -> usize {
        self.dims().1
    }

    pub fn channels(&self) -> usize {
        self.dims().2
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ObjectShape {
    Disk,
    Square,
}

impl std::str::FromStr for ObjectShape {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "disk" => Ok(ObjectShape::Disk),
            "square" => Ok(ObjectShape::Square),
            other => Err(Error::Config(format!("unknown object shape {other:?}"))),
        }
    }
}

impl std::fmt::Display for ObjectShape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ObjectShape::Disk => "disk",
            ObjectShape::Square => "square",
        })
    }
}

/// A bright object moving linearly. Positions are pixel-centre coordinates,
/// `x` along the width and `y` along the height.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneObject {
    pub shape: ObjectShape,
    pub radius: f64,
    pub start: (f64, f64),
    pub velocity: (f64, f64),
    pub intensity: f64,
}

impl SceneObject {
    pub fn centre(&self, frame: usize) -> (f64, f64) {
        let t = frame as f64;
        (
            self.start.0 + self.velocity.0 * t,
            self.start.1 + self.velocity.1 * t,
        )
    }

    fn covers(&self, frame: usize, y: usize, x: usize) -> bool {
        let (cx, cy) = self.centre(frame);
        let dx = x as f64 - cx;
        let dy = y as f64 - cy;
        match self.shape {
            ObjectShape::Disk => dx * dx + dy * dy <= self.radius * self.radius,
            ObjectShape::Square => dx.abs() <= self.radius && dy.abs() <= self.radius,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Background {
    pub level: f64,
    pub noise_amplitude: f64,
    pub seed: u64,
}

impl Default for Background {
    fn default() -> Self {
        Background {
            level: 0.2,
            noise_amplitude: 0.1,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub frame_count: usize,
    pub objects: Vec<SceneObject>,
    pub background: Background,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 || self.channels == 0 || self.frame_count == 0 {
            return Err(Error::Scene(format!(
                "dimensions must be positive, got {}x{}x{} with {} frames",
                self.height, self.width, self.channels, self.frame_count
            )));
        }
        let bg = &self.background;
        if !(0.0..=1.0).contains(&bg.level) {
            return Err(Error::Scene(format!("background level {} outside [0, 1]", bg.level)));
        }
        if !(bg.noise_amplitude >= 0.0 && bg.noise_amplitude.is_finite()) {
            return Err(Error::Scene("noise amplitude must be finite and >= 0".into()));
        }
        for (k, o) in self.objects.iter().enumerate() {
            if !(o.radius >= 1.0 && o.radius.is_finite()) {
                return Err(Error::Scene(format!("object {k}: radius must be >= 1")));
            }
            if !(o.intensity > 0.0 && o.intensity <= 1.0) {
                return Err(Error::Scene(format!(
                    "object {k}: intensity {} outside (0, 1]",
                    o.intensity
                )));
            }
            if o.intensity - bg.level < DETECTABILITY_MARGIN - 1e-12 {
                return Err(Error::Scene(format!(
                    "object {k}: intensity {} is within {DETECTABILITY_MARGIN} of the background",
                    o.intensity
                )));
            }
            for b in 0..self.frame_count {
                let (cx, cy) = o.centre(b);
                let inside = cx - o.radius >= 0.0
                    && cy - o.radius >= 0.0
                    && cx + o.radius <= (self.width - 1) as f64
                    && cy + o.radius <= (self.height - 1) as f64;
                if !inside {
                    return Err(Error::Scene(format!(
                        "object {k} leaves the frame at frame {b} (centre {cx:.1}, {cy:.1})"
                    )));
                }
            }
        }
        Ok(())
    }

    /// A scene with `n_objects` moving disks at well-separated random positions.
    pub fn random(
        height: usize,
        width: usize,
        channels: usize,
        frame_count: usize,
        n_objects: usize,
        seed: u64,
    ) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 || frame_count == 0 {
            return Err(Error::Scene(format!(
                "dimensions must be positive, got {height}x{width}x{channels} with {frame_count} frames"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let background = Background {
            seed: rng.random(),
            ..Background::default()
        };
        let mut objects: Vec<SceneObject> = Vec::with_capacity(n_objects);
        let span = frame_count.saturating_sub(1) as f64;
        'place: for _ in 0..n_objects {
            for _attempt in 0..1000 {
                let radius = rng.random_range(5..=7) as f64;
                let vx: f64 = [-2.0, -1.0, 1.0, 2.0][rng.random_range(0..4)];
                let vy: f64 = [-1.0, 0.0, 1.0][rng.random_range(0..3)];
                let x_lo = radius - vx.min(0.0) * span;
                let x_hi = (width - 1) as f64 - radius - vx.max(0.0) * span;
                let y_lo = radius - vy.min(0.0) * span;
                let y_hi = (height - 1) as f64 - radius - vy.max(0.0) * span;
                if x_lo.ceil() > x_hi.floor() || y_lo.ceil() > y_hi.floor() {
                    continue;
                }
                let cand = SceneObject {
                    shape: ObjectShape::Disk,
                    radius,
                    start: (
                        rng.random_range(x_lo.ceil()..=x_hi.floor()),
                        rng.random_range(y_lo.ceil()..=y_hi.floor()),
                    ),
                    velocity: (vx, vy),
                    intensity: 0.8,
                };
                let separated = objects.iter().all(|o| {
                    (0..frame_count).all(|b| {
                        let (ax, ay) = o.centre(b);
                        let (bx, by) = cand.centre(b);
                        let d = ((ax - bx).powi(2) + (ay - by).powi(2)).sqrt();
                        d >= o.radius + cand.radius + 12.0
                    })
                });
                if separated {
                    objects.push(cand);
                    continue 'place;
                }
            }
            return Err(Error::Scene(format!(
                "could not place {n_objects} separated objects in a {height}x{width} frame"
            )));
        }
        let spec = SceneSpec {
            height,
            width,
            channels,
            frame_count,
            objects,
            background,
        };
        spec.validate()?;
        Ok(spec)
    }
}

/// Ground truth emitted alongside generated frames, indexed `[frame][object]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub boxes: Vec<Vec<BBox>>,
    pub masks: Vec<Vec<Array2<bool>>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub frames: FrameSequence,
    pub truth: GroundTruth,
}

fn background_texture(spec: &SceneSpec) -> Array3<f32> {
    let (h, w, c) = (spec.height, spec.width, spec.channels);
    let bg = &spec.background;
    let mut rng = ChaCha8Rng::seed_from_u64(bg.seed);
    let amp = bg.noise_amplitude;
    let noise = Array3::from_shape_fn((h, w, c), |_| {
        if amp > 0.0 {
            rng.random_range(-amp..=amp)
        } else {
            0.0
        }
    });
    // 3x3 box filter, border pixels average over the in-frame neighbours.
    Array3::from_shape_fn((h, w, c), |(i, j, ch)| {
        let mut sum = 0.0;
        let mut n = 0.0;
        for y in i.saturating_sub(1)..=(i + 1).min(h - 1) {
            for x in j.saturating_sub(1)..=(j + 1).min(w - 1) {
                sum += noise[[y, x, ch]];
                n += 1.0;
            }
        }
        (bg.level + sum / n).clamp(0.0, 1.0) as f32
    })
}

/// Renders the scene. Pure in `spec`: the same seed yields bit-identical frames.
pub fn generate_scene(spec: &SceneSpec) -> Result<Scene> {
    spec.validate()?;
    let (h, w, c) = (spec.height, spec.width, spec.channels);
    let texture = background_texture(spec);
    let mut frames = Vec::with_capacity(spec.frame_count);
    let mut boxes = Vec::with_capacity(spec.frame_count);
    let mut masks = Vec::with_capacity(spec.frame_count);
    for b in 0..spec.frame_count {
        let mut frame = texture.clone();
        let mut frame_boxes = Vec::with_capacity(spec.objects.len());
        let mut frame_masks = Vec::with_capacity(spec.objects.len());
        for obj in &spec.objects {
            let mask = Array2::from_shape_fn((h, w), |(y, x)| obj.covers(b, y, x));
            let mut bbox: Option<BBox> = None;
            for ((y, x), &on) in mask.indexed_iter() {
                if !on {
                    continue;
                }
                for ch in 0..c {
                    frame[[y, x, ch]] = obj.intensity as f32;
                }
                let (x, y) = (x as i64, y as i64);
                bbox = Some(match bbox {
                    None => BBox::new_unchecked(x, y, x + 1, y + 1),
                    Some(bb) => BBox::new_unchecked(
                        bb.x0.min(x),
                        bb.y0.min(y),
                        bb.x1.max(x + 1),
                        bb.y1.max(y + 1),
                    ),
                });
            }
            frame_boxes.push(bbox.ok_or_else(|| Error::Scene("object renders no pixels".into()))?);
            frame_masks.push(mask);
        }
        frames.push(frame);
        boxes.push(frame_boxes);
        masks.push(frame_masks);
    }
    Ok(Scene {
        frames: FrameSequence::new(frames)?,
        truth: GroundTruth { boxes, masks },
    })
}

/// Decodes an 8- or 16-bit PNG into an `H×W×C` frame in `[0, 1]`. Alpha is
/// dropped; grey images give `C = 1`, colour images `C = 3`.
pub fn decode_png(bytes: &[u8]) -> Result<Array3<f32>> {
    let img = image::load_from_memory_with_format(bytes, ImageFormat::Png).map_err(|e| {
        Error::Image {
            path: PathBuf::from("<memory>"),
            source: e,
        }
    })?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let frame = match img {
        DynamicImage::ImageLuma8(buf) => {
            Array3::from_shape_fn((h, w, 1), |(y, x, _)| buf.get_pixel(x as u32, y as u32)[0] as f32 / 255.0)
        }
        DynamicImage::ImageLumaA8(buf) => {
            Array3::from_shape_fn((h, w, 1), |(y, x, _)| buf.get_pixel(x as u32, y as u32)[0] as f32 / 255.0)
        }
        DynamicImage::ImageRgb8(buf) => Array3::from_shape_fn((h, w, 3), |(y, x, c)| {
            buf.get_pixel(x as u32, y as u32)[c] as f32 / 255.0
        }),
        DynamicImage::ImageRgba8(buf) => Array3::from_shape_fn((h, w, 3), |(y, x, c)| {
            buf.get_pixel(x as u32, y as u32)[c] as f32 / 255.0
        }),
        DynamicImage::ImageLuma16(buf) => Array3::from_shape_fn((h, w, 1), |(y, x, _)| {
            buf.get_pixel(x as u32, y as u32)[0] as f32 / 65535.0
        }),
        DynamicImage::ImageLumaA16(buf) => Array3::from_shape_fn((h, w, 1), |(y, x, _)| {
            buf.get_pixel(x as u32, y as u32)[0] as f32 / 65535.0
        }),
        DynamicImage::ImageRgb16(buf) => Array3::from_shape_fn((h, w, 3), |(y, x, c)| {
            buf.get_pixel(x as u32, y as u32)[c] as f32 / 65535.0
        }),
        DynamicImage::ImageRgba16(buf) => Array3::from_shape_fn((h, w, 3), |(y, x, c)| {
            buf.get_pixel(x as u32, y as u32)[c] as f32 / 65535.0
        }),
        other => {
            return Err(Error::Format(format!(
                "unsupported PNG colour type {:?}",
                other.color()
            )))
        }
    };
    Ok(frame)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BitDepth {
    Eight,
    #[default]
    Sixteen,
}

/// Encodes a frame with 1 or 3 channels as PNG. Values are clamped to `[0, 1]`
/// and rounded to the nearest code.
pub fn encode_png(frame: ArrayView3<'_, f32>, depth: BitDepth) -> Result<Vec<u8>> {
    let (h, w, c) = frame.dim();
    let q8 = |v: f32| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    let q16 = |v: f32| (v.clamp(0.0, 1.0) * 65535.0).round() as u16;
    let img: DynamicImage = match (c, depth) {
        (1, BitDepth::Eight) => ImageBuffer::<Luma<u8>, _>::from_fn(w as u32, h as u32, |x, y| {
            Luma([q8(frame[[y as usize, x as usize, 0]])])
        })
        .into(),
        (1, BitDepth::Sixteen) => ImageBuffer::<Luma<u16>, _>::from_fn(w as u32, h as u32, |x, y| {
            Luma([q16(frame[[y as usize, x as usize, 0]])])
        })
        .into(),
        (3, BitDepth::Eight) => ImageBuffer::<Rgb<u8>, _>::from_fn(w as u32, h as u32, |x, y| {
            let p = |ch| q8(frame[[y as usize, x as usize, ch]]);
            Rgb([p(0), p(1), p(2)])
        })
        .into(),
        (3, BitDepth::Sixteen) => ImageBuffer::<Rgb<u16>, _>::from_fn(w as u32, h as u32, |x, y| {
            let p = |ch| q16(frame[[y as usize, x as usize, ch]]);
            Rgb([p(0), p(1), p(2)])
        })
        .into(),
        (c, _) => return Err(Error::Shape(format!("PNG output needs 1 or 3 channels, got {c}"))),
    };
    let mut out = Cursor::new(Vec::new());
    img.write_to(&mut out, ImageFormat::Png).map_err(|e| Error::Image {
        path: PathBuf::from("<memory>"),
        source: e,
    })?;
    Ok(out.into_inner())
}

fn frame_kind(path: &Path) -> Option<&'static str> {
    let ext = path.extension()?.to_str()?.to_ascii_lowercase();
    match ext.as_str() {
        "png" => Some("png"),
        "uapt" => Some("uapt"),
        _ => None,
    }
}

/// Frame files (`*.png`, `*.uapt`) in `dir`, sorted by file name.
pub fn list_frame_files(dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir.as_ref())?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<Vec<_>>>()?
        .into_iter()
        .filter(|p| p.is_file() && frame_kind(p).is_some())
        .collect();
    files.sort_by(|a, b| a.file_name().cmp(&b.file_name()));
    Ok(files)
}

pub fn load_frame(path: &Path) -> Result<Array3<f32>> {
    let bytes = fs::read(path)?;
    match frame_kind(path) {
        Some("png") => decode_png(&bytes).map_err(|e| match e {
            Error::Image { source, .. } => Error::Image {
                path: path.to_path_buf(),
                source,
            },
            other => other,
        }),
        Some("uapt") => tensor::decode(&bytes)?.to_array3(),
        _ => Err(Error::Format(format!("{} is not a frame file", path.display()))),
    }
}

/// Loads every frame file of `dir` in name order, clamping pixels to `[0, 1]`.
pub fn load_frames(dir: impl AsRef<Path>) -> Result<FrameSequence> {
    let dir = dir.as_ref();
    let files = list_frame_files(dir)?;
    if files.is_empty() {
        return Err(Error::Argument(format!(
            "no frame files (*.png, *.uapt) in {}",
            dir.display()
        )));
    }
    let mut frames = Vec::with_capacity(files.len());
    for f in &files {
        let frame = load_frame(f)?;
        if let Some(first) = frames.first() {
            let first: &Array3<f32> = first;
            if first.dim() != frame.dim() {
                return Err(Error::Shape(format!(
                    "{} has shape {:?}, expected {:?}",
                    f.display(),
                    frame.dim(),
                    first.dim()
                )));
            }
        }
        frames.push(frame);
    }
    FrameSequence::new_clamped(frames)
}

/// Writes `frame_0000.png`, `frame_0001.png`, ... into `dir`.
pub fn save_frames(seq: &FrameSequence, dir: impl AsRef<Path>, depth: BitDepth) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut written = Vec::with_capacity(seq.len());
    for (b, frame) in seq.frames().iter().enumerate() {
        let path = dir.join(format!("frame_{b:04}.png"));
        fs::write(&path, encode_png(frame.view(), depth)?)?;
        written.push(path);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec_with(objects: Vec<SceneObject>, frames: usize) -> SceneSpec {
        SceneSpec {
            height: 40,
            width: 48,
            channels: 3,
            frame_count: frames,
            objects,
            background: Background {
                level: 0.2,
                noise_amplitude: 0.05,
                seed: 7,
            },
        }
    }

    fn disk(x: f64, y: f64, vx: f64, vy: f64) -> SceneObject {
        SceneObject {
            shape: ObjectShape::Disk,
            radius: 4.0,
            start: (x, y),
            velocity: (vx, vy),
            intensity: 0.9,
        }
    }

    #[test]
    fn static_disk_is_one_region_of_disk_area() {
        let scene = generate_scene(&spec_with(vec![disk(20.0, 20.0, 0.0, 0.0)], 1)).unwrap();
        let frame = scene.frames.frame(0);
        let bright: Vec<(usize, usize)> = frame
            .indexed_iter()
            .filter(|((_, _, c), v)| *c == 0 && **v > 0.5)
            .map(|((y, x, _), _)| (y, x))
            .collect();
        let area = std::f64::consts::PI * 16.0;
        assert!((bright.len() as f64 - area).abs() <= 2.0 * std::f64::consts::PI * 4.0);
        assert_eq!(scene.truth.boxes[0][0], BBox::new(16, 16, 25, 25).unwrap());
    }

    #[test]
    fn empty_scene_is_bounded_texture() {
        let spec = spec_with(vec![], 2);
        let scene = generate_scene(&spec).unwrap();
        let limit = (spec.background.level + spec.background.noise_amplitude) as f32;
        for f in scene.frames.frames() {
            assert!(f.iter().all(|v| *v <= limit + 1e-6));
        }
    }

    #[test]
    fn moving_boxes_translate_exactly() {
        let spec = spec_with(vec![disk(6.0, 10.0, 2.0, 0.0), disk(10.0, 30.0, 2.0, 0.0)], 10);
        let scene = generate_scene(&spec).unwrap();
        for b in 1..10 {
            for k in 0..2 {
                let prev = scene.truth.boxes[b - 1][k];
                let cur = scene.truth.boxes[b][k];
                assert_eq!(cur.x0 - prev.x0, 2);
                assert_eq!(cur.x1 - prev.x1, 2);
                assert_eq!(cur.y0, prev.y0);
            }
        }
    }

    #[test]
    fn leaving_object_is_rejected() {
        let spec = spec_with(vec![disk(40.0, 20.0, 2.0, 0.0)], 5);
        assert!(matches!(generate_scene(&spec), Err(Error::Scene(_))));
    }

    #[test]
    fn low_contrast_object_is_rejected() {
        let mut o = disk(20.0, 20.0, 0.0, 0.0);
        o.intensity = 0.4;
        assert!(matches!(generate_scene(&spec_with(vec![o], 1)), Err(Error::Scene(_))));
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = SceneSpec::random(64, 64, 3, 8, 2, 42).unwrap();
        assert_eq!(generate_scene(&spec).unwrap(), generate_scene(&spec).unwrap());
        assert_eq!(spec, SceneSpec::random(64, 64, 3, 8, 2, 42).unwrap());
    }

    #[test]
    fn png_directory_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let frame = Array3::from_shape_fn((8, 8, 3), |(y, x, c)| ((y * 8 + x + c) % 5) as f32 / 4.0);
        let png = encode_png(frame.view(), BitDepth::Eight).unwrap();
        for name in ["a.png", "b.png", "c.png"] {
            fs::write(dir.path().join(name), &png).unwrap();
        }
        fs::write(dir.path().join("notes.txt"), "ignored").unwrap();
        let seq = load_frames(dir.path()).unwrap();
        assert_eq!(seq.len(), 3);
        assert_eq!(seq.frame(0), seq.frame(2));
        let err = seq.frame(0).iter().zip(frame.iter()).fold(0.0f32, |m, (a, b)| m.max((a - b).abs()));
        assert!(err <= 0.5 / 255.0 + 1e-6);
    }

    #[test]
    fn sixteen_bit_scaling() {
        let img = ImageBuffer::<Luma<u16>, _>::from_fn(2, 1, |x, _| Luma([if x == 0 { 65535 } else { 1000 }]));
        let mut bytes = Cursor::new(Vec::new());
        DynamicImage::from(img).write_to(&mut bytes, ImageFormat::Png).unwrap();
        let f = decode_png(bytes.get_ref()).unwrap();
        assert_eq!(f.dim(), (1, 2, 1));
        assert_eq!(f[[0, 0, 0]], 1.0);
        assert_eq!(f[[0, 1, 0]], 1000.0 / 65535.0);
    }

    #[test]
    fn empty_directory_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(load_frames(dir.path()).is_err());
    }

    #[test]
    fn mixed_resolutions_are_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let a = Array3::<f32>::zeros((4, 4, 1));
        let b = Array3::<f32>::zeros((4, 5, 1));
        fs::write(dir.path().join("0.png"), encode_png(a.view(), BitDepth::Eight).unwrap()).unwrap();
        fs::write(dir.path().join("1.png"), encode_png(b.view(), BitDepth::Eight).unwrap()).unwrap();
        assert!(matches!(load_frames(dir.path()), Err(Error::Shape(_))));
    }

    #[test]
    fn tensor_frames_are_clamped() {
        let dir = tempfile::tempdir().unwrap();
        let t = tensor::Tensor::new(vec![2, 2, 1], vec![-0.5, 0.5, 1.5, 1.0]).unwrap();
        tensor::save_tensor(&t, dir.path().join("f.uapt")).unwrap();
        let seq = load_frames(dir.path()).unwrap();
        assert_eq!(seq.frame(0).iter().copied().collect::<Vec<_>>(), vec![0.0, 0.5, 1.0, 1.0]);
    }

    #[test]
    fn sixteen_bit_save_load_is_close() {
        let scene = generate_scene(&SceneSpec::random(32, 40, 3, 2, 1, 3).unwrap()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_frames(&scene.frames, dir.path(), BitDepth::Sixteen).unwrap();
        let back = load_frames(dir.path()).unwrap();
        for (a, b) in back.frames().iter().zip(scene.frames.frames()) {
            let err = a.iter().zip(b.iter()).fold(0.0f32, |m, (x, y)| m.max((x - y).abs()));
            assert!(err <= 1.0 / 65535.0);
        }
    }
}
