//! Map post-processing: class-contrast maps, the three-config composite,
//! percentile clamping, and heatmap rendering to PGM, PNG, or CSV.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::lrp::{explain_lrp, LayerRuleConfig, RelevanceMap};
use crate::net::Model;
use crate::tensor::Tensor;
use crate::{Error, Result};

/// Elementwise mean of the per-class attribution maps, all C classes.
/// The result has no distinguished class; `target_class` is 0 by convention.
pub fn all_class_map(model: &Model, input: &Tensor, config: &LayerRuleConfig) -> Result<RelevanceMap> {
    let n = model.n_classes();
    let mut acc: Vec<f64> = Vec::new();
    let mut shape: Vec<usize> = Vec::new();
    for class in 0..n {
        let map = explain_lrp(model, input, class, config)?;
        if acc.is_empty() {
            acc = vec![0.0; map.values.len()];
            shape = map.values.shape().to_vec();
        }
        for (a, v) in acc.iter_mut().zip(map.values.data()) {
            *a += f64::from(*v);
        }
    }
    let inv = 1.0 / n as f64;
    let values: Vec<f32> = acc.iter().map(|a| (a * inv) as f32).collect();
    Ok(RelevanceMap {
        values: Tensor::new(shape, values)?,
        target_class: 0,
        method: "all_class".into(),
        rules: Some(config.clone()),
    })
}

/// Target-class attribution with the all-class mean subtracted. The mean is
/// accumulated in f64 (same class order as `all_class_map`) and the
/// difference rounds to f32 once, so summing these over every class gives
/// the zero map up to the storage precision of the contrast values.
pub fn class_contrast_map(
    model: &Model,
    input: &Tensor,
    target_class: usize,
    config: &LayerRuleConfig,
) -> Result<RelevanceMap> {
    let n = model.n_classes();
    let target_map = explain_lrp(model, input, target_class, config)?;
    let mut acc = vec![0.0f64; target_map.values.data().len()];
    for class in 0..n {
        let map;
        let data = if class == target_class {
            target_map.values.data()
        } else {
            map = explain_lrp(model, input, class, config)?;
            map.values.data()
        };
        for (a, v) in acc.iter_mut().zip(data) {
            *a += f64::from(*v);
        }
    }
    let inv = 1.0 / n as f64;
    let values: Vec<f32> = target_map
        .values
        .data()
        .iter()
        .zip(&acc)
        .map(|(t, a)| (f64::from(*t) - a * inv) as f32)
        .collect();
    Ok(RelevanceMap {
        values: Tensor::new(target_map.values.shape().to_vec(), values)?,
        target_class,
        method: "class_contrast".into(),
        rules: Some(config.clone()),
    })
}

fn interpolated_quantile(sorted: &[f64], level: f64) -> f64 {
    let idx = level * (sorted.len() - 1) as f64;
    let i0 = idx.floor() as usize;
    let frac = idx - i0 as f64;
    if frac == 0.0 || i0 + 1 == sorted.len() {
        sorted[i0]
    } else {
        sorted[i0] + frac * (sorted[i0 + 1] - sorted[i0])
    }
}

/// Clamp the map into its [p, 1−p] quantile range. Quantiles are computed
/// by linear interpolation on the sorted values.
pub fn clamp_percentiles(map: &RelevanceMap, p: f64) -> Result<RelevanceMap> {
    if !(0.0..0.5).contains(&p) {
        return Err(Error::InvalidArgument(format!(
            "clamp percentile must lie in [0, 0.5), got {p}"
        )));
    }
    let mut sorted: Vec<f64> = map.values.data().iter().map(|v| f64::from(*v)).collect();
    sorted.sort_by(f64::total_cmp);
    let lo = interpolated_quantile(&sorted, p);
    let hi = interpolated_quantile(&sorted, 1.0 - p);
    let values: Vec<f32> = map
        .values
        .data()
        .iter()
        .map(|v| f64::from(*v).clamp(lo, hi) as f32)
        .collect();
    Ok(RelevanceMap {
        values: Tensor::new(map.values.shape().to_vec(), values)?,
        target_class: map.target_class,
        method: map.method.clone(),
        rules: map.rules.clone(),
    })
}

fn contrast_sum(
    model: &Model,
    input: &Tensor,
    target_class: usize,
    configs: &[LayerRuleConfig; 3],
) -> Result<Tensor> {
    let mut sum: Vec<f32> = Vec::new();
    let mut shape: Vec<usize> = Vec::new();
    for config in configs {
        let contrast = class_contrast_map(model, input, target_class, config)?;
        if sum.is_empty() {
            sum = contrast.values.data().to_vec();
            shape = contrast.values.shape().to_vec();
        } else {
            for (a, v) in sum.iter_mut().zip(contrast.values.data()) {
                *a += v;
            }
        }
    }
    Tensor::new(shape, sum)
}

/// Sum of the class-contrast maps under three rule configurations (one per
/// tuned metric), clamped into the [1%, 99%] quantile range.
pub fn composite_map(
    model: &Model,
    input: &Tensor,
    target_class: usize,
    configs: &[LayerRuleConfig; 3],
) -> Result<RelevanceMap> {
    let summed = RelevanceMap {
        values: contrast_sum(model, input, target_class, configs)?,
        target_class,
        method: "composite".into(),
        rules: None,
    };
    clamp_percentiles(&summed, 0.01)
}

/// A map normalized for display: values in [−1, 1], rendered on a diverging
/// blue-white-red scale where 0 is white and max |value| saturates both ends.
#[derive(Debug, Clone)]
pub struct HeatmapImage {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f32>,
}

impl HeatmapImage {
    pub fn from_map(map: &Tensor) -> Result<HeatmapImage> {
        let [height, width] = *map.shape() else {
            return Err(Error::shape("heatmap source", &[0, 0], map.shape()));
        };
        let peak = map.data().iter().fold(0.0f32, |m, v| m.max(v.abs()));
        let inv = if peak > 0.0 { 1.0 / peak } else { 0.0 };
        Ok(HeatmapImage {
            width,
            height,
            values: map.data().iter().map(|v| v * inv).collect(),
        })
    }

    /// Diverging colormap on a normalized value: blue at −1, white at 0,
    /// red at +1.
    pub fn color(value: f32) -> [u8; 3] {
        let fade = ((1.0 - value.abs()) * 255.0).round() as u8;
        if value >= 0.0 {
            [255, fade, fade]
        } else {
            [fade, fade, 255]
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeatmapFormat {
    Pgm,
    Png,
    Csv,
}

/// Write a map to disk. PGM carries |value| as 8-bit grayscale, PNG the
/// diverging colormap, CSV the exact values one pixel per line. The map
/// itself is never modified.
pub fn render_heatmap(map: &RelevanceMap, path: &Path, format: HeatmapFormat) -> Result<()> {
    let heat = HeatmapImage::from_map(&map.values)?;
    match format {
        HeatmapFormat::Pgm => {
            let mut out = BufWriter::new(File::create(path)?);
            write!(out, "P5\n{} {}\n255\n", heat.width, heat.height)?;
            let bytes: Vec<u8> = heat
                .values
                .iter()
                .map(|v| (v.abs() * 255.0).round() as u8)
                .collect();
            out.write_all(&bytes)?;
            out.flush()?;
        }
        HeatmapFormat::Png => {
            let buffer = image::RgbImage::from_fn(heat.width as u32, heat.height as u32, |x, y| {
                image::Rgb(HeatmapImage::color(heat.values[y as usize * heat.width + x as usize]))
            });
            buffer
                .save_with_format(path, image::ImageFormat::Png)
                .map_err(|e| Error::InvalidArgument(format!("png encode failed: {e}")))?;
        }
        HeatmapFormat::Csv => {
            let mut out = BufWriter::new(File::create(path)?);
            writeln!(out, "row,col,value")?;
            for row in 0..heat.height {
                for col in 0..heat.width {
                    writeln!(out, "{row},{col},{}", map.values.data()[row * heat.width + col])?;
                }
            }
            out.flush()?;
        }
    }
    Ok(())
}
