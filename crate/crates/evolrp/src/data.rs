//! Procedural shape datasets.
//!
//! Four geometric classes (square, circle, cross, triangle) drawn as filled
//! binary masks at a random position and size, scaled by a per-image
//! foreground intensity, with optional additive Gaussian noise clipped to
//! [0,1]. Every image gets its own RNG substream keyed by (seed, purpose,
//! index), so generation order never affects content.

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use std::io::Write;
use std::path::Path;

pub const SHAPE_CLASSES: [&str; 4] = ["square", "circle", "cross", "triangle"];

#[derive(Debug, Clone)]
pub struct Dataset {
    /// Each image is a (1, H, W) tensor with values in [0, 1].
    pub images: Vec<Tensor>,
    pub labels: Vec<usize>,
    pub class_names: Vec<String>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Copy of samples [start, start+len); used to carve train/eval batches.
    pub fn batch(&self, start: usize, len: usize) -> Result<Dataset> {
        if start + len > self.len() {
            return Err(Error::InvalidArgument(format!(
                "batch [{start}, {}) out of range for {} samples",
                start + len,
                self.len()
            )));
        }
        Ok(Dataset {
            images: self.images[start..start + len].to_vec(),
            labels: self.labels[start..start + len].to_vec(),
            class_names: self.class_names.clone(),
        })
    }
}

/// Inclusive pixel bounding box.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BoundingBox {
    pub row_min: usize,
    pub row_max: usize,
    pub col_min: usize,
    pub col_max: usize,
}

impl BoundingBox {
    pub fn contains(&self, row: usize, col: usize) -> bool {
        row >= self.row_min && row <= self.row_max && col >= self.col_min && col <= self.col_max
    }

    pub fn intersects(&self, other: &BoundingBox) -> bool {
        let rows_overlap = self.row_min <= other.row_max && other.row_min <= self.row_max;
        let cols_overlap = self.col_min <= other.col_max && other.col_min <= self.col_max;
        rows_overlap && cols_overlap
    }
}

/// One two-object image: the classes present and their disjoint boxes.
#[derive(Debug, Clone)]
pub struct MultiObjectImage {
    pub image: Tensor,
    pub classes: [usize; 2],
    pub boxes: [BoundingBox; 2],
}

#[derive(Debug, Clone)]
pub struct MultiObjectSet {
    pub images: Vec<MultiObjectImage>,
    pub class_names: Vec<String>,
}

/// Balanced single-object dataset: n_per_class images of each of the four
/// classes, labels round-robin (sample i has label i mod 4) so any prefix is
/// near-balanced.
pub fn generate_shapes(n_per_class: usize, image_size: usize, noise_std: f64, seed: u64) -> Result<Dataset> {
    if image_size < 16 {
        return Err(Error::InvalidArgument(format!(
            "image_size must be >= 16, got {image_size}"
        )));
    }
    if n_per_class == 0 {
        return Err(Error::InvalidArgument("n_per_class must be >= 1".into()));
    }
    if !noise_std.is_finite() || noise_std < 0.0 {
        return Err(Error::InvalidArgument(format!("bad noise_std {noise_std}")));
    }
    let n = 4 * n_per_class;
    let mut images = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % 4;
        let mut stream = rng::substream(seed, "shapes", i as u64);
        let (mask, _) = sample_shape(class, image_size, single_radius_range(image_size), &mut stream);
        let fg = stream.random_range(0.5..1.0) as f32;
        let mut pixels: Vec<f32> = mask.iter().map(|&m| if m { fg } else { 0.0 }).collect();
        if noise_std > 0.0 {
            let normal = Normal::new(0.0, noise_std).expect("noise_std checked positive");
            for p in &mut pixels {
                *p = (*p + normal.sample(&mut stream) as f32).clamp(0.0, 1.0);
            }
        }
        images.push(Tensor::new(vec![1, image_size, image_size], pixels)?);
        labels.push(class);
    }
    Ok(Dataset {
        images,
        labels,
        class_names: SHAPE_CLASSES.iter().map(|s| s.to_string()).collect(),
    })
}

/// Noise-free images holding two distinct classes at disjoint positions,
/// with the sampled bounding boxes kept as metadata. Placement resamples up
/// to 200 times per image; a canvas too small to separate two minimum-size
/// shapes exhausts the retries and errors.
pub fn generate_multiobject(n: usize, image_size: usize, seed: u64) -> Result<MultiObjectSet> {
    if image_size < 8 {
        return Err(Error::InvalidArgument(format!(
            "image_size must be >= 8, got {image_size}"
        )));
    }
    let radius_range = multi_radius_range(image_size);
    let mut images = Vec::with_capacity(n);
    for i in 0..n {
        let mut stream = rng::substream(seed, "multiobject", i as u64);
        let mut placed = None;
        for _ in 0..200 {
            let c1 = stream.random_range(0..4usize);
            let c2 = (c1 + 1 + stream.random_range(0..3usize)) % 4;
            let (mask1, box1) = sample_shape(c1, image_size, radius_range, &mut stream);
            let (mask2, box2) = sample_shape(c2, image_size, radius_range, &mut stream);
            if box1.intersects(&box2) {
                continue;
            }
            let fg1 = stream.random_range(0.5..1.0) as f32;
            let fg2 = stream.random_range(0.5..1.0) as f32;
            let pixels: Vec<f32> = mask1
                .iter()
                .zip(&mask2)
                .map(|(&m1, &m2)| if m1 { fg1 } else if m2 { fg2 } else { 0.0 })
                .collect();
            placed = Some(MultiObjectImage {
                image: Tensor::new(vec![1, image_size, image_size], pixels)?,
                classes: [c1, c2],
                boxes: [box1, box2],
            });
            break;
        }
        match placed {
            Some(img) => images.push(img),
            None => {
                return Err(Error::Placement(format!(
                    "no overlap-free placement for image {i} on a {image_size}x{image_size} canvas after 200 attempts"
                )))
            }
        }
    }
    Ok(MultiObjectSet {
        images,
        class_names: SHAPE_CLASSES.iter().map(|s| s.to_string()).collect(),
    })
}

fn single_radius_range(image_size: usize) -> (usize, usize) {
    let r_min = (image_size / 7).max(3);
    let r_max = (image_size / 4).saturating_sub(1).max(r_min);
    (r_min, r_max)
}

fn multi_radius_range(image_size: usize) -> (usize, usize) {
    let r_min = (image_size / 6).max(2);
    let r_max = (image_size / 4).max(r_min);
    (r_min, r_max)
}

/// Draw one filled shape: sample radius then center (shape fully inside the
/// canvas), return the binary mask and the sampled box center ± radius.
/// RNG draw order is fixed: radius, center row, center col.
fn sample_shape(class: usize, size: usize, (r_min, r_max): (usize, usize), stream: &mut ChaCha8Rng) -> (Vec<bool>, BoundingBox) {
    let r = stream.random_range(r_min..=r_max);
    let cy = stream.random_range(r..=size - 1 - r);
    let cx = stream.random_range(r..=size - 1 - r);
    let mut mask = vec![false; size * size];
    for y in 0..size {
        for x in 0..size {
            if in_shape(class, x as isize, y as isize, cx as isize, cy as isize, r as isize) {
                mask[y * size + x] = true;
            }
        }
    }
    let bbox = BoundingBox {
        row_min: cy - r,
        row_max: cy + r,
        col_min: cx - r,
        col_max: cx + r,
    };
    (mask, bbox)
}

fn in_shape(class: usize, x: isize, y: isize, cx: isize, cy: isize, r: isize) -> bool {
    let (dx, dy) = (x - cx, y - cy);
    match class {
        // square
        0 => dx.abs() <= r && dy.abs() <= r,
        // circle
        1 => dx * dx + dy * dy <= r * r,
        // cross: union of a vertical and a horizontal bar
        2 => {
            let bar = (r / 3).max(1);
            (dx.abs() <= bar && dy.abs() <= r) || (dy.abs() <= bar && dx.abs() <= r)
        }
        // triangle: isoceles, apex up; half-width grows linearly with depth
        3 => {
            if dy < -r || dy > r {
                return false;
            }
            let half_width = (r as f64) * ((dy + r) as f64) / ((2 * r) as f64);
            (dx.abs() as f64) <= half_width
        }
        _ => unreachable!("class index is always 0..4"),
    }
}

/// Write the dataset as img_NNNNN.pgm files plus a labels.csv index
/// (index, filename, label, class_name).
pub fn export_dataset(dataset: &Dataset, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut csv = std::io::BufWriter::new(std::fs::File::create(dir.join("labels.csv"))?);
    writeln!(csv, "index,filename,label,class_name")?;
    for (i, (image, &label)) in dataset.images.iter().zip(&dataset.labels).enumerate() {
        let filename = format!("img_{i:05}.pgm");
        let (h, w) = (image.shape()[1], image.shape()[2]);
        let bytes: Vec<u8> = image
            .data()
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        write_pgm(&dir.join(&filename), w, h, &bytes)?;
        writeln!(csv, "{i},{filename},{label},{}", dataset.class_names[label])?;
    }
    csv.flush()?;
    Ok(())
}

/// Binary PGM ("P5"), maxval 255.
pub(crate) fn write_pgm(path: &Path, width: usize, height: usize, bytes: &[u8]) -> Result<()> {
    debug_assert_eq!(bytes.len(), width * height);
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write!(f, "P5\n{width} {height}\n255\n")?;
    f.write_all(bytes)?;
    f.flush()?;
    Ok(())
}
