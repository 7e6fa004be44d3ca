//! Procedural shapes-on-textures benchmark with a controllable
//! foreground/background correlation and pixel-exact ground truth.
//!
//! Each class pairs a foreground shape with a background texture. An
//! in-distribution image of class `c` is drawn on `c`'s texture with
//! probability `correlation_rate`, otherwise on a neutral texture (one not
//! paired with any class). The candidate OoD pool mixes *hard* images (a
//! paired texture with no shape), easy images (neutral textures) and a
//! deterministic contaminated slice that does contain a shape while still
//! carrying an all-zero label.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imageio::{self, GrayImage, LabelMask};
use crate::kv::KvFile;
use crate::manifest::{self, ClassList, Manifest, SampleRecord, Split};
use crate::rng::{self, Rng, Stream};

pub const TRAIN_MANIFEST: &str = "manifest.jsonl";
pub const TEST_MANIFEST: &str = "test.jsonl";

const SHAPE_LEVEL: f64 = 0.9;
const TEXTURE_LO: f64 = 0.2;
const TEXTURE_HI: f64 = 0.6;
const FLAT_LEVEL: f64 = 0.4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Square,
    Disk,
    Triangle,
    Cross,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 4] = [
        ShapeKind::Square,
        ShapeKind::Disk,
        ShapeKind::Triangle,
        ShapeKind::Cross,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ShapeKind::Square => "square",
            ShapeKind::Disk => "disk",
            ShapeKind::Triangle => "triangle",
            ShapeKind::Cross => "cross",
        }
    }

    /// Whether the pixel offset `(dx, dy)` from the centre lies inside a shape
    /// of half-extent `r`.
    fn contains(self, dx: f64, dy: f64, r: f64) -> bool {
        let (ax, ay) = (dx.abs(), dy.abs());
        match self {
            ShapeKind::Square => ax <= r && ay <= r,
            ShapeKind::Disk => dx * dx + dy * dy <= r * r,
            ShapeKind::Triangle => dy >= -r && dy <= r && ax <= (dy + r) / 2.0,
            ShapeKind::Cross => {
                let arm = r / 3.0;
                (ax <= r && ay <= arm) || (ay <= r && ax <= arm)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TextureKind {
    Stripes,
    Checker,
    Dots,
    Hatch,
    FlatGray,
}

impl TextureKind {
    pub const ALL: [TextureKind; 5] = [
        TextureKind::Stripes,
        TextureKind::Checker,
        TextureKind::Dots,
        TextureKind::Hatch,
        TextureKind::FlatGray,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TextureKind::Stripes => "stripes",
            TextureKind::Checker => "checker",
            TextureKind::Dots => "dots",
            TextureKind::Hatch => "hatch",
            TextureKind::FlatGray => "flat_gray",
        }
    }

    fn value(self, x: usize, y: usize, phase: (usize, usize)) -> f64 {
        let (x, y) = (x + phase.0, y + phase.1);
        let on = match self {
            TextureKind::Stripes => (y / 2) % 2 == 0,
            TextureKind::Checker => (x / 4 + y / 4) % 2 == 0,
            TextureKind::Dots => x % 4 < 2 && y % 4 < 2,
            TextureKind::Hatch => (x + y) % 4 < 2,
            TextureKind::FlatGray => return FLAT_LEVEL,
        };
        if on {
            TEXTURE_HI
        } else {
            TEXTURE_LO
        }
    }
}

impl FromStr for ShapeKind {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        ShapeKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| format!("unknown shape `{s}` (square, disk, triangle, cross)"))
    }
}

impl FromStr for TextureKind {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        TextureKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| {
                format!("unknown texture `{s}` (stripes, checker, dots, hatch, flat_gray)")
            })
    }
}

/// A foreground shape and the background texture it co-occurs with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassSpec {
    pub shape: ShapeKind,
    pub texture: TextureKind,
}

impl FromStr for ClassSpec {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let (shape, texture) = s
            .split_once(':')
            .ok_or_else(|| format!("expected `shape:texture`, got `{s}`"))?;
        Ok(ClassSpec {
            shape: shape.trim().parse()?,
            texture: texture.trim().parse()?,
        })
    }
}

impl fmt::Display for ClassSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.shape.name(), self.texture.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenSpec {
    pub image_size: usize,
    pub classes: Vec<ClassSpec>,
    pub correlation_rate: f64,
    /// In-distribution training images per class.
    pub n_in: usize,
    pub n_ood_candidate: usize,
    /// Test images per class, drawn from the in-distribution process.
    pub n_test: usize,
    /// Fraction of uncontaminated candidates that show a paired texture alone.
    pub hard_fraction: f64,
    /// Fraction of candidates that secretly contain a shape.
    pub contamination: f64,
    /// Probability that an in-distribution image carries a second class.
    pub multi_label_rate: f64,
    pub noise_std: f64,
    pub rng_seed: u64,
}

impl Default for GenSpec {
    fn default() -> Self {
        GenSpec {
            image_size: 64,
            classes: vec![
                ClassSpec {
                    shape: ShapeKind::Square,
                    texture: TextureKind::Stripes,
                },
                ClassSpec {
                    shape: ShapeKind::Disk,
                    texture: TextureKind::Checker,
                },
            ],
            correlation_rate: 0.95,
            n_in: 100,
            n_ood_candidate: 100,
            n_test: 50,
            hard_fraction: 0.5,
            contamination: 0.1,
            multi_label_rate: 0.0,
            noise_std: 0.03,
            rng_seed: 0,
        }
    }
}

fn check_fraction(name: &str, v: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&v) {
        return Err(Error::Config(format!("{name} must lie in [0, 1], got {v}")));
    }
    Ok(())
}

impl GenSpec {
    pub fn from_kv(mut kv: KvFile) -> Result<Self> {
        let d = GenSpec::default();
        let spec = GenSpec {
            image_size: kv.take_or("image_size", d.image_size)?,
            classes: kv.take_list("classes")?.unwrap_or(d.classes),
            correlation_rate: kv.take_or("correlation_rate", d.correlation_rate)?,
            n_in: kv.take_or("n_in", d.n_in)?,
            n_ood_candidate: kv.take_or("n_ood_candidate", d.n_ood_candidate)?,
            n_test: kv.take_or("n_test", d.n_test)?,
            hard_fraction: kv.take_or("hard_fraction", d.hard_fraction)?,
            contamination: kv.take_or("contamination", d.contamination)?,
            multi_label_rate: kv.take_or("multi_label_rate", d.multi_label_rate)?,
            noise_std: kv.take_or("noise_std", d.noise_std)?,
            rng_seed: kv.take_or("rng_seed", d.rng_seed)?,
        };
        kv.finish()?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_kv(KvFile::load(path)?)
    }

    pub fn to_kv_string(&self) -> String {
        let classes: Vec<String> = self.classes.iter().map(ToString::to_string).collect();
        format!(
            "image_size = {}\nclasses = {}\ncorrelation_rate = {}\nn_in = {}\nn_ood_candidate = {}\nn_test = {}\nhard_fraction = {}\ncontamination = {}\nmulti_label_rate = {}\nnoise_std = {}\nrng_seed = {}\n",
            self.image_size,
            classes.join(", "),
            self.correlation_rate,
            self.n_in,
            self.n_ood_candidate,
            self.n_test,
            self.hard_fraction,
            self.contamination,
            self.multi_label_rate,
            self.noise_std,
            self.rng_seed
        )
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes.is_empty() {
            return Err(Error::Config("at least one class is required".into()));
        }
        for (i, a) in self.classes.iter().enumerate() {
            for b in &self.classes[i + 1..] {
                if a.shape == b.shape {
                    return Err(Error::Config(format!(
                        "shape `{}` used by two classes",
                        a.shape.name()
                    )));
                }
                if a.texture == b.texture {
                    return Err(Error::Config(format!(
                        "texture `{}` paired with two classes",
                        a.texture.name()
                    )));
                }
            }
        }
        if self.image_size < 16 {
            return Err(Error::Config(format!(
                "image_size must be at least 16, got {}",
                self.image_size
            )));
        }
        check_fraction("correlation_rate", self.correlation_rate)?;
        check_fraction("hard_fraction", self.hard_fraction)?;
        check_fraction("contamination", self.contamination)?;
        check_fraction("multi_label_rate", self.multi_label_rate)?;
        if !(self.noise_std >= 0.0) {
            return Err(Error::Config(format!(
                "noise_std must be non-negative, got {}",
                self.noise_std
            )));
        }
        Ok(())
    }

    pub fn class_list(&self) -> ClassList {
        ClassList::new(self.classes.iter().map(|c| c.shape.name())).expect("validated")
    }

    /// Textures not paired with any class.
    pub fn neutral_textures(&self) -> Vec<TextureKind> {
        TextureKind::ALL
            .into_iter()
            .filter(|t| self.classes.iter().all(|c| c.texture != *t))
            .collect()
    }

    /// Whether candidate `i` belongs to the contaminated slice. Allocation is
    /// evenly spaced: the count after `n` candidates is `floor(n * f)`, so for
    /// `f = 1/m` it is every `m`-th candidate.
    pub fn is_contaminated(&self, i: usize) -> bool {
        allocation_step(i, self.contamination)
    }
}

fn allocation_step(i: usize, f: f64) -> bool {
    let count = |n: usize| (n as f64 * f + 1e-9).floor() as usize;
    count(i + 1) > count(i)
}

/// The two manifests written by [`generate`].
#[derive(Debug, Clone, PartialEq)]
pub struct Generated {
    /// In-distribution training images plus the candidate OoD pool.
    pub train: Manifest,
    /// Held-out in-distribution images for seed evaluation.
    pub test: Manifest,
}

#[derive(Debug, Clone, Copy)]
struct Placed {
    shape: ShapeKind,
    class: u8,
    cx: f64,
    cy: f64,
    r: f64,
}

struct Renderer<'a> {
    spec: &'a GenSpec,
    rng: Rng,
    noise: Normal<f64>,
}

impl Renderer<'_> {
    fn place(&mut self, shape: ShapeKind, class: u8, others: &[Placed]) -> Option<Placed> {
        let s = self.spec.image_size as f64;
        for _ in 0..64 {
            let r = self.rng.random_range(0.15 * s..=0.22 * s);
            let cx = self.rng.random_range(r + 1.0..=s - r - 1.0);
            let cy = self.rng.random_range(r + 1.0..=s - r - 1.0);
            let clear = others
                .iter()
                .all(|o| ((o.cx - cx).powi(2) + (o.cy - cy).powi(2)).sqrt() > o.r + r + 2.0);
            if clear {
                return Some(Placed {
                    shape,
                    class,
                    cx,
                    cy,
                    r,
                });
            }
        }
        None
    }

    fn render(&mut self, texture: TextureKind, shapes: &[Placed]) -> (GrayImage, LabelMask) {
        let n = self.spec.image_size;
        let phase = (self.rng.random_range(0..8), self.rng.random_range(0..8));
        let mut img = GrayImage::filled(n, n, 0.0);
        let mut mask = LabelMask::background(n, n);
        for y in 0..n {
            for x in 0..n {
                let mut v = texture.value(x, y, phase);
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                for s in shapes {
                    if s.shape.contains(px - s.cx, py - s.cy, s.r) {
                        v = SHAPE_LEVEL;
                        mask.data[y * n + x] = s.class + 1;
                    }
                }
                if self.spec.noise_std > 0.0 {
                    v += self.noise.sample(&mut self.rng);
                }
                img.data[y * n + x] = v.clamp(0.0, 1.0);
            }
        }
        (img, mask)
    }

    fn neutral(&mut self) -> TextureKind {
        let options = self.spec.neutral_textures();
        options[self.rng.random_range(0..options.len())]
    }

    /// An in-distribution image whose primary class is `class`.
    fn in_dist(&mut self, class: usize) -> (GrayImage, LabelMask, Vec<u8>) {
        let spec = self.spec;
        let mut labels = vec![0u8; spec.classes.len()];
        let primary = spec.classes[class];
        let mut placed = vec![self
            .place(primary.shape, class as u8, &[])
            .expect("an empty canvas always fits one shape")];
        labels[class] = 1;
        if spec.classes.len() > 1 && self.rng.random_bool(spec.multi_label_rate) {
            let mut other = self.rng.random_range(0..spec.classes.len() - 1);
            if other >= class {
                other += 1;
            }
            if let Some(p) = self.place(spec.classes[other].shape, other as u8, &placed) {
                placed.push(p);
                labels[other] = 1;
            }
        }
        let texture = if self.rng.random_bool(spec.correlation_rate) {
            primary.texture
        } else {
            self.neutral()
        };
        let (img, mask) = self.render(texture, &placed);
        (img, mask, labels)
    }
}

fn write_sample(
    out_dir: &Path,
    id: &str,
    img: &GrayImage,
    mask: &LabelMask,
) -> Result<(PathBuf, PathBuf)> {
    let img_rel = PathBuf::from("images").join(format!("{id}.png"));
    let mask_rel = PathBuf::from("masks").join(format!("{id}.png"));
    imageio::save_gray(img, out_dir.join(&img_rel))?;
    imageio::save_mask(mask, out_dir.join(&mask_rel))?;
    Ok((img_rel, mask_rel))
}

/// Renders the benchmark into `out_dir`, writing images, masks,
/// [`TRAIN_MANIFEST`] and [`TEST_MANIFEST`].
pub fn generate(spec: &GenSpec, out_dir: impl AsRef<Path>) -> Result<Generated> {
    spec.validate()?;
    let out_dir = out_dir.as_ref();
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let classes = spec.class_list();
    let num_classes = classes.len();
    let mut r = Renderer {
        spec,
        rng: rng::stream(spec.rng_seed, Stream::Generate, 0),
        noise: Normal::new(0.0, spec.noise_std.max(f64::MIN_POSITIVE)).expect("finite std"),
    };

    let mut train = Vec::new();
    for (c, class) in spec.classes.iter().enumerate() {
        for j in 0..spec.n_in {
            let id = format!("in-{}-{j:05}", class.shape.name());
            let (img, mask, labels) = r.in_dist(c);
            let (path, mask_path) = write_sample(out_dir, &id, &img, &mask)?;
            train.push(SampleRecord {
                id,
                path,
                labels,
                split: Split::InDist,
                gt_mask_path: Some(mask_path),
            });
        }
    }

    let mut contaminated = 0usize;
    let mut clean = 0usize;
    let mut hard = 0usize;
    for i in 0..spec.n_ood_candidate {
        let id = format!("cand-{i:05}");
        let (img, mask) = if spec.is_contaminated(i) {
            let c = contaminated % num_classes;
            contaminated += 1;
            let class = spec.classes[c];
            let placed = r.place(class.shape, c as u8, &[]).expect("fits");
            let texture = if r.rng.random_bool(spec.correlation_rate) {
                class.texture
            } else {
                r.neutral()
            };
            r.render(texture, &[placed])
        } else {
            let is_hard = allocation_step(clean, spec.hard_fraction);
            clean += 1;
            let texture = if is_hard {
                let t = spec.classes[hard % num_classes].texture;
                hard += 1;
                t
            } else {
                r.neutral()
            };
            r.render(texture, &[])
        };
        let (path, mask_path) = write_sample(out_dir, &id, &img, &mask)?;
        train.push(SampleRecord {
            id,
            path,
            labels: vec![0; num_classes],
            split: Split::OodCandidate,
            gt_mask_path: Some(mask_path),
        });
    }

    let mut test = Vec::new();
    for (c, class) in spec.classes.iter().enumerate() {
        for j in 0..spec.n_test {
            let id = format!("test-{}-{j:05}", class.shape.name());
            let (img, mask, labels) = r.in_dist(c);
            let (path, mask_path) = write_sample(out_dir, &id, &img, &mask)?;
            test.push(SampleRecord {
                id,
                path,
                labels,
                split: Split::InDist,
                gt_mask_path: Some(mask_path),
            });
        }
    }

    let generated = Generated {
        train: Manifest::new(classes.clone(), train)?,
        test: Manifest::new(classes, test)?,
    };
    manifest::save_manifest(&generated.train, out_dir.join(TRAIN_MANIFEST))?;
    manifest::save_manifest(&generated.test, out_dir.join(TEST_MANIFEST))?;
    std::fs::write(out_dir.join("spec.txt"), spec.to_kv_string())
        .map_err(|e| Error::io(out_dir.join("spec.txt"), e))?;
    Ok(generated)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassCount {
    pub class: String,
    pub count: usize,
}

/// Dataset summary. Counts of candidates containing a foreground come from the
/// ground-truth masks and are only available for synthetic data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub per_class: Vec<ClassCount>,
    pub in_dist: usize,
    pub ood_candidate: usize,
    pub ood_hard: usize,
    pub candidates_with_foreground: usize,
    pub contamination_rate: f64,
}

/// Summarises `m`; mask paths are resolved relative to `manifest_path`.
pub fn describe(m: &Manifest, manifest_path: &Path) -> Result<Summary> {
    let per_class = m
        .classes
        .names()
        .iter()
        .enumerate()
        .map(|(c, name)| ClassCount {
            class: name.clone(),
            count: m
                .by_split(Split::InDist)
                .filter(|r| r.labels[c] == 1)
                .count(),
        })
        .collect();
    let mut with_fg = 0;
    let candidates: Vec<&SampleRecord> = m.by_split(Split::OodCandidate).collect();
    for rec in &candidates {
        if let Some(mp) = &rec.gt_mask_path {
            let mask = imageio::load_mask(manifest::resolve(manifest_path, mp))?;
            if mask.foreground_pixels() > 0 {
                with_fg += 1;
            }
        }
    }
    Ok(Summary {
        per_class,
        in_dist: m.by_split(Split::InDist).count(),
        ood_candidate: candidates.len(),
        ood_hard: m.by_split(Split::OodHard).count(),
        candidates_with_foreground: with_fg,
        contamination_rate: if candidates.is_empty() {
            0.0
        } else {
            with_fg as f64 / candidates.len() as f64
        },
    })
}
