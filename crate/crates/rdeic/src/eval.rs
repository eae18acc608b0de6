//! Grid evaluation: per-image metrics over rate points, step counts and
//! guidance scales, plus bit-allocation maps and the guidance-distance
//! sweep.

use std::io::Write;
use std::path::Path;

use ndarray::Array3;

use crate::codec::{self, CompressOptions, DecompressOptions};
use crate::config::GridConfig;
use crate::corpus;
use crate::error::{Error, Result};
use crate::metrics::{self, MetricsRecord};
use crate::nn::checkpoint::Model;

/// Upscale factor for emitted bit-allocation maps (nearest neighbor),
/// so an 8x8 latent grid is viewable.
const MAP_SCALE: usize = 8;

/// Render the per-element estimated bits as a normalized grayscale image.
pub fn bit_allocation_image(bits_map: &ndarray::Array4<f64>) -> Array3<f32> {
    let (_, c, h, w) = bits_map.dim();
    let mut spatial = ndarray::Array2::<f64>::zeros((h, w));
    for ci in 0..c {
        for y in 0..h {
            for x in 0..w {
                spatial[(y, x)] += bits_map[(0, ci, y, x)];
            }
        }
    }
    let max = spatial.iter().cloned().fold(f64::MIN, f64::max);
    let min = spatial.iter().cloned().fold(f64::MAX, f64::min);
    let range = (max - min).max(1e-12);
    Array3::from_shape_fn((3, h * MAP_SCALE, w * MAP_SCALE), |(_, y, x)| {
        let v = (spatial[(y / MAP_SCALE, x / MAP_SCALE)] - min) / range;
        v as f32
    })
}

/// One full encode/decode measurement.
#[allow(clippy::too_many_arguments)]
fn eval_one(
    model: &Model,
    name: &str,
    img: &Array3<f32>,
    steps: usize,
    lambda_s: f64,
    base_recon: Option<&Array3<f32>>,
    map_out: Option<&Path>,
) -> Result<(MetricsRecord, Array3<f32>)> {
    let opts = CompressOptions {
        steps,
        lambda_s,
        ..Default::default()
    };
    let (bytes, info) = codec::compress(model, img, &opts)?;
    let (recon, dinfo) = codec::decompress(
        model,
        &bytes,
        &DecompressOptions {
            steps: Some(steps),
            lambda_s: Some(lambda_s),
        },
    )?;
    let (_, h, w) = img.dim();
    let record = MetricsRecord {
        image: name.to_string(),
        lambda_r: model.meta.lambda_r,
        steps,
        lambda_s,
        bpp: metrics::bpp(bytes.len() * 8, w, h),
        psnr: metrics::psnr(img, &recon)?,
        ms_ssim: metrics::ms_ssim(img, &recon)?,
        denoise_seconds: dinfo.timing.total_seconds(),
        per_step_seconds: dinfo.timing.per_step_seconds.clone(),
        d_metric: base_recon.map(|b| metrics::sq_distance(&recon, b)),
    };
    if let Some(dir) = map_out {
        let map = bit_allocation_image(&info.entropy.bits_map);
        corpus::save_image(&dir.join(format!("{name}.bits.png")), &map)?;
    }
    Ok((record, recon))
}

fn csv_header() -> &'static str {
    "image,lambda_r,steps,lambda_s,bpp,psnr,ms_ssim,denoise_seconds,d_metric"
}

fn csv_row(r: &MetricsRecord) -> String {
    format!(
        "{},{},{},{},{:.6},{:.4},{:.6},{:.6},{}",
        r.image,
        r.lambda_r,
        r.steps,
        r.lambda_s,
        r.bpp,
        r.psnr,
        r.ms_ssim,
        r.denoise_seconds,
        r.d_metric.map_or(String::new(), |d| format!("{d:.6}"))
    )
}

/// Run a full grid over a directory of images. Failures on individual
/// rows are logged and skipped; the run continues.
pub fn evaluate(image_dir: &Path, grid: &GridConfig, log: &mut dyn Write) -> Result<Vec<MetricsRecord>> {
    let images = corpus::load_dir(image_dir)?;
    std::fs::create_dir_all(&grid.out_dir)?;
    let mut csv = std::fs::File::create(grid.out_dir.join("metrics.csv"))?;
    writeln!(csv, "{}", csv_header())?;
    let mut all = Vec::new();

    for model_path in &grid.models {
        let model = Model::load(model_path)?;
        for &steps in &grid.l_values {
            for (name, img) in &images {
                // The lambda_s = 0 reconstruction anchors the distance
                // metric for the sweep.
                let base = match eval_one(&model, name, img, steps, 0.0, None, None) {
                    Ok((rec, recon)) => {
                        writeln!(csv, "{}", csv_row(&rec))?;
                        all.push(rec);
                        Some(recon)
                    }
                    Err(e) => {
                        writeln!(log, "skip {name} (lambda_s=0): {e}")?;
                        None
                    }
                };
                for &ls in grid.lambda_s_values.iter().filter(|&&v| v != 0.0) {
                    let map_dir = grid.bit_allocation_maps.then_some(grid.out_dir.as_path());
                    match eval_one(&model, name, img, steps, ls, base.as_ref(), map_dir) {
                        Ok((rec, _)) => {
                            writeln!(csv, "{}", csv_row(&rec))?;
                            all.push(rec);
                        }
                        Err(e) => {
                            writeln!(log, "skip {name} (lambda_s={ls}): {e}")?;
                        }
                    }
                }
            }
        }
    }
    if all.is_empty() {
        return Err(Error::Training("every evaluation row failed".into()));
    }
    for agg in aggregate_records(&all) {
        writeln!(csv, "{}", csv_row(&agg))?;
        all.push(agg);
    }
    Ok(all)
}

/// Mean rows per (lambda_r, steps, lambda_s) group, labeled `aggregate`.
pub fn aggregate_records(records: &[MetricsRecord]) -> Vec<MetricsRecord> {
    let mut keys: Vec<(u64, usize, u64)> = Vec::new();
    for r in records {
        let k = (r.lambda_r.to_bits(), r.steps, r.lambda_s.to_bits());
        if !keys.contains(&k) {
            keys.push(k);
        }
    }
    keys.into_iter()
        .map(|(lr, steps, ls)| {
            let group: Vec<&MetricsRecord> = records
                .iter()
                .filter(|r| {
                    r.lambda_r.to_bits() == lr
                        && r.steps == steps
                        && r.lambda_s.to_bits() == ls
                        && r.image != "aggregate"
                })
                .collect();
            let n = group.len() as f64;
            let mean = |f: &dyn Fn(&MetricsRecord) -> f64| {
                group.iter().map(|r| f(r)).sum::<f64>() / n
            };
            let d_vals: Vec<f64> = group.iter().filter_map(|r| r.d_metric).collect();
            MetricsRecord {
                image: "aggregate".into(),
                lambda_r: f64::from_bits(lr),
                steps,
                lambda_s: f64::from_bits(ls),
                bpp: mean(&|r| r.bpp),
                psnr: mean(&|r| r.psnr),
                ms_ssim: mean(&|r| r.ms_ssim),
                denoise_seconds: mean(&|r| r.denoise_seconds),
                per_step_seconds: Vec::new(),
                d_metric: (!d_vals.is_empty())
                    .then(|| d_vals.iter().sum::<f64>() / d_vals.len() as f64),
            }
        })
        .collect()
}

/// Mean D over images per lambda_s, in the sweep's order.
pub fn mean_d_by_lambda_s(records: &[MetricsRecord], sweep: &[f64]) -> Vec<(f64, f64)> {
    sweep
        .iter()
        .filter(|&&ls| ls != 0.0)
        .map(|&ls| {
            let vals: Vec<f64> = records
                .iter()
                .filter(|r| r.lambda_s == ls)
                .filter_map(|r| r.d_metric)
                .collect();
            let mean = if vals.is_empty() {
                0.0
            } else {
                vals.iter().sum::<f64>() / vals.len() as f64
            };
            (ls, mean)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bit_map_normalized() {
        let mut bits = ndarray::Array4::<f64>::zeros((1, 2, 4, 4));
        bits[(0, 0, 1, 2)] = 3.0;
        bits[(0, 1, 3, 3)] = 1.0;
        let img = bit_allocation_image(&bits);
        assert_eq!(img.dim(), (3, 32, 32));
        let max = img.iter().cloned().fold(f32::MIN, f32::max);
        let min = img.iter().cloned().fold(f32::MAX, f32::min);
        assert!((max - 1.0).abs() < 1e-6 && min.abs() < 1e-6);
    }
}
