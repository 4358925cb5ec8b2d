//! Synthetic multi-label dataset of coloured geometric shapes.
//!
//! Label sets are drawn around an anchor category: the anchor is sampled
//! with probability proportional to the co-occurrence diagonal, then every
//! other category `j` joins independently with probability `M[anchor][j]`.
//! Every image therefore has at least one positive, and an identity matrix
//! yields exactly one category per image.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use image::{Rgb, RgbImage};
use rand::distr::{weighted::WeightedIndex, Distribution};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::manifest::{DatasetManifest, ManifestRecord};
use super::{LabelVocabulary, WordVectors};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Circle,
    Square,
    Triangle,
    Diamond,
    Cross,
    Ring,
}

impl Shape {
    pub const ALL: [Shape; 6] = [
        Shape::Circle,
        Shape::Square,
        Shape::Triangle,
        Shape::Diamond,
        Shape::Cross,
        Shape::Ring,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Shape::Circle => "circle",
            Shape::Square => "square",
            Shape::Triangle => "triangle",
            Shape::Diamond => "diamond",
            Shape::Cross => "cross",
            Shape::Ring => "ring",
        }
    }

    /// Whether offset `(dx, dy)` from the centre lies inside a shape of radius `r`.
    fn covers(self, dx: f64, dy: f64, r: f64) -> bool {
        match self {
            Shape::Circle => dx * dx + dy * dy <= r * r,
            Shape::Square => dx.abs() <= 0.85 * r && dy.abs() <= 0.85 * r,
            Shape::Triangle => dy >= -r && dy <= r && dx.abs() <= 0.5 * (dy + r),
            Shape::Diamond => dx.abs() + dy.abs() <= r,
            Shape::Cross => {
                (dx.abs() <= r / 3.0 && dy.abs() <= r) || (dy.abs() <= r / 3.0 && dx.abs() <= r)
            }
            Shape::Ring => {
                let d2 = dx * dx + dy * dy;
                d2 <= r * r && d2 >= 0.3 * r * r
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
    Magenta,
    Cyan,
    Orange,
    White,
}

impl Color {
    pub const ALL: [Color; 8] = [
        Color::Red,
        Color::Green,
        Color::Blue,
        Color::Yellow,
        Color::Magenta,
        Color::Cyan,
        Color::Orange,
        Color::White,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
            Color::Yellow => "yellow",
            Color::Magenta => "magenta",
            Color::Cyan => "cyan",
            Color::Orange => "orange",
            Color::White => "white",
        }
    }

    fn rgb(self) -> [u8; 3] {
        match self {
            Color::Red => [220, 30, 30],
            Color::Green => [30, 190, 40],
            Color::Blue => [30, 60, 230],
            Color::Yellow => [235, 225, 30],
            Color::Magenta => [220, 40, 220],
            Color::Cyan => [30, 215, 225],
            Color::Orange => [245, 140, 20],
            Color::White => [250, 250, 250],
        }
    }
}

const OCCLUDER: [u8; 3] = [45, 45, 45];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub categories: usize,
    #[serde(default = "default_image_size")]
    pub image_size: u32,
    #[serde(default = "default_images")]
    pub images: usize,
    /// Row `i`: diagonal is the anchor weight of `i`, off-diagonal `j` the
    /// probability that `j` accompanies an image anchored on `i`. Defaults
    /// to the identity.
    #[serde(default)]
    pub cooccurrence: Option<Vec<Vec<f64>>>,
    #[serde(default)]
    pub occlusion_rate: f64,
    /// Explicit `(shape, colour)` per category; assigned automatically if absent.
    #[serde(default)]
    pub assignments: Option<Vec<(Shape, Color)>>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_embedding_dim")]
    pub embedding_dim: usize,
}

fn default_image_size() -> u32 {
    64
}

fn default_images() -> usize {
    200
}

fn default_embedding_dim() -> usize {
    16
}

impl SyntheticSpec {
    pub fn new(categories: usize, images: usize, seed: u64) -> Self {
        SyntheticSpec {
            categories,
            image_size: default_image_size(),
            images,
            cooccurrence: None,
            occlusion_rate: 0.0,
            assignments: None,
            seed,
            embedding_dim: default_embedding_dim(),
        }
    }

    /// Matrix with uniform anchors, `base` background inclusion and the
    /// given symmetric strongly-linked pairs.
    pub fn linked_pairs(categories: usize, base: f64, linked: &[(usize, usize)], strength: f64) -> Vec<Vec<f64>> {
        let mut m = vec![vec![base; categories]; categories];
        for (i, row) in m.iter_mut().enumerate() {
            row[i] = 1.0;
        }
        for &(a, b) in linked {
            m[a][b] = strength;
            m[b][a] = strength;
        }
        m
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("synthetic spec: {}", e.message().trim())))
    }

    pub fn matrix(&self) -> Vec<Vec<f64>> {
        self.cooccurrence.clone().unwrap_or_else(|| {
            (0..self.categories)
                .map(|i| (0..self.categories).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
                .collect()
        })
    }

    pub fn resolved_assignments(&self) -> Result<Vec<(Shape, Color)>> {
        let list = match &self.assignments {
            Some(list) => list.clone(),
            None => (0..self.categories)
                .map(|i| {
                    let k = Color::ALL.len();
                    (Shape::ALL[(i + i / k) % Shape::ALL.len()], Color::ALL[i % k])
                })
                .collect(),
        };
        if list.len() != self.categories {
            return Err(Error::Config(format!(
                "assignments has {} entries for {} categories",
                list.len(),
                self.categories
            )));
        }
        for (i, a) in list.iter().enumerate() {
            if list[..i].contains(a) {
                return Err(Error::Config(format!(
                    "assignment {} {} is used twice",
                    a.1.name(),
                    a.0.name()
                )));
            }
        }
        Ok(list)
    }

    pub fn validate(&self) -> Result<()> {
        if self.categories < 2 {
            return Err(Error::Config("categories must be at least 2".into()));
        }
        if self.image_size < 16 {
            return Err(Error::Config("image_size must be at least 16".into()));
        }
        if !(0.0..=1.0).contains(&self.occlusion_rate) {
            return Err(Error::Config("occlusion_rate must lie in [0, 1]".into()));
        }
        if self.embedding_dim == 0 {
            return Err(Error::Config("embedding_dim must be positive".into()));
        }
        self.resolved_assignments()?;
        let m = self.matrix();
        let c = self.categories;
        if m.len() != c || m.iter().any(|r| r.len() != c) {
            return Err(Error::Cooccurrence(format!("matrix must be {c}x{c}")));
        }
        for (i, row) in m.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                if !(0.0..=1.0).contains(&v) {
                    return Err(Error::Cooccurrence(format!("entry ({i}, {j}) = {v} is not a probability")));
                }
            }
        }
        if m.iter().enumerate().all(|(i, r)| r[i] == 0.0) {
            return Err(Error::Cooccurrence("every anchor weight on the diagonal is zero".into()));
        }
        for j in 0..c {
            let reachable = m[j][j] > 0.0 || (0..c).any(|i| i != j && m[i][i] > 0.0 && m[i][j] > 0.0);
            if !reachable {
                return Err(Error::Cooccurrence(format!("category {j} can never be sampled")));
            }
        }
        Ok(())
    }
}

/// Draws `(anchor, sorted label set)` for one image.
pub fn sample_labels<R: Rng + ?Sized>(matrix: &[Vec<f64>], rng: &mut R) -> (usize, Vec<usize>) {
    let weights: Vec<f64> = (0..matrix.len()).map(|i| matrix[i][i]).collect();
    let anchor = WeightedIndex::new(&weights)
        .expect("validated anchor weights")
        .sample(rng);
    let mut labels = vec![anchor];
    for (j, &p) in matrix[anchor].iter().enumerate() {
        if j != anchor && rng.random_bool(p) {
            labels.push(j);
        }
    }
    labels.sort_unstable();
    (anchor, labels)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticObject {
    pub category: usize,
    /// Inclusive pixel box `x0, y0, x1, y1`.
    pub region: [u32; 4],
    pub occluded: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticImage {
    pub id: String,
    pub anchor: usize,
    pub labels: Vec<usize>,
    pub objects: Vec<SyntheticObject>,
    pub image: RgbImage,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    pub vocabulary: LabelVocabulary,
    pub word_vectors: WordVectors,
    pub images: Vec<SyntheticImage>,
}

fn image_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);
    rng
}

fn overlap_fraction(a: [u32; 4], b: [u32; 4]) -> f64 {
    let ix = (a[2].min(b[2]) as i64 - a[0].max(b[0]) as i64 + 1).max(0);
    let iy = (a[3].min(b[3]) as i64 - a[1].max(b[1]) as i64 + 1).max(0);
    let area = |r: [u32; 4]| ((r[2] - r[0] + 1) * (r[3] - r[1] + 1)) as f64;
    (ix * iy) as f64 / area(a).min(area(b))
}

fn render(
    spec: &SyntheticSpec,
    assignments: &[(Shape, Color)],
    labels: &[usize],
    rng: &mut ChaCha8Rng,
) -> (RgbImage, Vec<SyntheticObject>) {
    let size = spec.image_size;
    let mut img = RgbImage::from_fn(size, size, |_, _| {
        let v = 120u8.wrapping_add(rng.random_range(0..16));
        Rgb([v, v, v])
    });
    let min_r = (size as f64 * 0.11).max(3.0);
    let max_r = size as f64 * 0.2;
    let mut objects: Vec<SyntheticObject> = Vec::new();
    let mut order = labels.to_vec();
    // shuffle draw order so no category is always on top
    for i in (1..order.len()).rev() {
        order.swap(i, rng.random_range(0..=i));
    }
    for &c in &order {
        let (shape, color) = assignments[c];
        let mut placed = None;
        for _ in 0..24 {
            let r = rng.random_range(min_r..=max_r);
            let lo = r.ceil();
            let hi = size as f64 - r.ceil() - 1.0;
            let cx = rng.random_range(lo..=hi.max(lo));
            let cy = rng.random_range(lo..=hi.max(lo));
            let region = [
                (cx - r).floor().max(0.0) as u32,
                (cy - r).floor().max(0.0) as u32,
                ((cx + r).ceil() as u32).min(size - 1),
                ((cy + r).ceil() as u32).min(size - 1),
            ];
            let crowded = objects.iter().any(|o| overlap_fraction(o.region, region) > 0.2);
            placed = Some((cx, cy, r, region));
            if !crowded {
                break;
            }
        }
        let (cx, cy, r, region) = placed.expect("at least one attempt");
        let rgb = color.rgb();
        for y in region[1]..=region[3] {
            for x in region[0]..=region[2] {
                if shape.covers(x as f64 + 0.5 - cx, y as f64 + 0.5 - cy, r) {
                    img.put_pixel(x, y, Rgb(rgb));
                }
            }
        }
        let occluded = rng.random_bool(spec.occlusion_rate);
        if occluded {
            let (w, h) = (region[2] - region[0] + 1, region[3] - region[1] + 1);
            let ow = ((w as f64) * rng.random_range(0.3..0.5)).round().max(1.0) as u32;
            let oh = ((h as f64) * rng.random_range(0.3..0.5)).round().max(1.0) as u32;
            let (ox, oy) = match rng.random_range(0..4) {
                0 => (region[0], region[1]),
                1 => (region[2] + 1 - ow, region[1]),
                2 => (region[0], region[3] + 1 - oh),
                _ => (region[2] + 1 - ow, region[3] + 1 - oh),
            };
            for y in oy..oy + oh {
                for x in ox..ox + ow {
                    img.put_pixel(x, y, Rgb(OCCLUDER));
                }
            }
        }
        objects.push(SyntheticObject {
            category: c,
            region,
            occluded,
        });
    }
    objects.sort_by_key(|o| o.category);
    (img, objects)
}

pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticDataset> {
    spec.validate()?;
    let assignments = spec.resolved_assignments()?;
    let vocabulary = LabelVocabulary::new(
        assignments
            .iter()
            .map(|(s, c)| format!("{} {}", c.name(), s.name())),
    )?;

    let mut word_rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x005e_ed0f_7e57);
    let mut word_vectors = WordVectors::new(spec.embedding_dim);
    let tokens = Color::ALL
        .iter()
        .map(|c| c.name())
        .chain(Shape::ALL.iter().map(|s| s.name()));
    for token in tokens {
        let v = (0..spec.embedding_dim)
            .map(|_| word_rng.sample::<f64, _>(StandardNormal))
            .collect();
        word_vectors.insert(token, v)?;
    }

    let matrix = spec.matrix();
    let images = (0..spec.images)
        .map(|i| {
            let mut rng = image_rng(spec.seed, i);
            let (anchor, labels) = sample_labels(&matrix, &mut rng);
            let (image, objects) = render(spec, &assignments, &labels, &mut rng);
            SyntheticImage {
                id: format!("images/img_{i:05}.png"),
                anchor,
                labels,
                objects,
                image,
            }
        })
        .collect();
    Ok(SyntheticDataset {
        vocabulary,
        word_vectors,
        images,
    })
}

impl SyntheticDataset {
    pub fn manifest(&self, root: &Path) -> DatasetManifest {
        DatasetManifest {
            root: root.to_path_buf(),
            records: self
                .images
                .iter()
                .map(|img| ManifestRecord {
                    path: img.id.clone(),
                    labels: img.labels.clone(),
                })
                .collect(),
            vocabulary: self.vocabulary.clone(),
            warnings: Vec::new(),
        }
    }

    /// `image-id<TAB>category<TAB>x0,y0,x1,y1` per object.
    pub fn regions_table(&self) -> String {
        let mut out = String::new();
        for img in &self.images {
            for o in &img.objects {
                let [x0, y0, x1, y1] = o.region;
                writeln!(
                    out,
                    "{}\t{}\t{x0},{y0},{x1},{y1}",
                    img.id,
                    self.vocabulary.name(o.category)
                )
                .unwrap();
            }
        }
        out
    }

    /// Writes `manifest.tsv`, `vocabulary.txt`, `word_vectors.txt`,
    /// `regions.tsv` and the PNG images under `dir`.
    pub fn write_to(&self, dir: &Path) -> Result<DatasetManifest> {
        let images_dir = dir.join("images");
        fs::create_dir_all(&images_dir).map_err(|e| Error::io(&images_dir, e))?;
        for img in &self.images {
            let path = dir.join(&img.id);
            img.image
                .save(&path)
                .map_err(|e| Error::Image(format!("{}: {e}", path.display())))?;
        }
        let manifest = self.manifest(dir);
        let write = |name: &str, text: String| {
            let path = dir.join(name);
            fs::write(&path, text).map_err(|e| Error::io(&path, e))
        };
        write("manifest.tsv", manifest.to_text())?;
        write("regions.tsv", self.regions_table())?;
        self.vocabulary.save(&dir.join("vocabulary.txt"))?;
        self.word_vectors.save(&dir.join("word_vectors.txt"))?;
        Ok(manifest)
    }
}
