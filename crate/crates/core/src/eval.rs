//! PSNR, comparison tables, inference and qualitative grids.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use image::{ImageBuffer, Rgb, RgbImage};

use crate::checkpoint::Checkpoint;
use crate::data::{
    bicubic_resample, decode_image, denormalize, snap_to_u8_grid, list_images, load_records, normalize, resolve_id,
    tensor_to_rgb8, PairRecord, Split, SplitManifest, UPSCALE,
};
use crate::error::{Error, Result};
use crate::model::GeneratorSpec;
use crate::params::ParameterSet;
use crate::tensor::Tensor;

/// Width of the white lines between grid tiles.
pub const GRID_SEPARATOR: usize = 2;

/// Records pushed through the generator at once during evaluation.
const EVAL_BATCH: usize = 8;

pub const METRICS_CSV_HEADER: &str = "method,psnr_db,count,corpus";

/// Compensated (Neumaier) sum, independent of accumulation order up to the
/// last bit for the sizes used here.
#[derive(Debug, Default, Clone, Copy)]
pub struct NeumaierSum {
    sum: f64,
    comp: f64,
}

impl NeumaierSum {
    pub fn add(&mut self, v: f64) {
        let t = self.sum + v;
        if self.sum.abs() >= v.abs() {
            self.comp += (self.sum - t) + v;
        } else {
            self.comp += (v - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn total(&self) -> f64 {
        if self.sum.is_infinite() {
            self.sum
        } else {
            self.sum + self.comp
        }
    }
}

/// PSNR in dB of two `[0, 1]` images (any equal shape), computed jointly
/// over all channels after clamping. Identical images give `f64::INFINITY`.
pub fn psnr(a: &Tensor, b: &Tensor) -> Result<f64> {
    a.check_same_shape("psnr", b)?;
    if a.is_empty() {
        return Err(Error::Invalid("psnr: empty image".into()));
    }
    let mut acc = NeumaierSum::default();
    for (&x, &y) in a.data().iter().zip(b.data()) {
        let d = x.clamp(0.0, 1.0) as f64 - y.clamp(0.0, 1.0) as f64;
        acc.add(d * d);
    }
    let mse = acc.total() / a.len() as f64;
    Ok(if mse == 0.0 {
        f64::INFINITY
    } else {
        -10.0 * mse.log10()
    })
}

/// Renders a PSNR value for CSV output; infinity becomes `inf`.
pub fn format_psnr(db: f64) -> String {
    if db.is_infinite() && db > 0.0 {
        "inf".to_string()
    } else {
        format!("{db:.4}")
    }
}

/// Mean of per-image PSNR values; an `inf` entry makes the mean `inf`.
pub fn mean_psnr(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Invalid("mean of no PSNR values".into()));
    }
    let mut acc = NeumaierSum::default();
    values.iter().for_each(|&v| acc.add(v));
    Ok(acc.total() / values.len() as f64)
}

/// Runs the generator over normalized `[3, S, S]` conditions, in batches.
/// Returns normalized `[3, S, S]` outputs.
pub fn generate(
    spec: &GeneratorSpec,
    params: &ParameterSet,
    conditions: &[&Tensor],
) -> Result<Vec<Tensor>> {
    let layout = spec.layout();
    let mut out = Vec::with_capacity(conditions.len());
    for chunk in conditions.chunks(EVAL_BATCH) {
        let z = Tensor::stack(chunk)?;
        let y = layout.forward(params, &z)?.into_output();
        for i in 0..chunk.len() {
            let s = y.sample(i)?;
            let shape = s.shape()[1..].to_vec();
            out.push(s.reshape(&shape)?);
        }
    }
    Ok(out)
}

/// HR in `[0, 1]`. HR records lie on the 8-bit grid, so snapping undoes the
/// rounding of the `[-1, 1]` round trip and matches the decoded file exactly.
fn reference(hr: &Tensor) -> Tensor {
    snap_to_u8_grid(&denormalize(hr))
}

/// Mean PSNR of the bicubic baseline and of the generator against HR over
/// `records`.
pub fn mean_psnr_on_records(
    spec: &GeneratorSpec,
    params: &ParameterSet,
    records: &[PairRecord],
) -> Result<(f64, f64)> {
    let conditions: Vec<&Tensor> = records.iter().map(|r| &r.bhr).collect();
    let generated = generate(spec, params, &conditions)?;
    let mut bicubic = Vec::with_capacity(records.len());
    let mut ours = Vec::with_capacity(records.len());
    for (r, y) in records.iter().zip(&generated) {
        let hr = reference(&r.hr);
        bicubic.push(psnr(&denormalize(&r.bhr), &hr)?);
        ours.push(psnr(&denormalize(y), &hr)?);
    }
    Ok((mean_psnr(&bicubic)?, mean_psnr(&ours)?))
}

/// One row of a comparison table.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub method: String,
    pub psnr_db: f64,
    pub count: usize,
    pub corpus: String,
}

impl fmt::Display for MetricRow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{},{},{},{}",
            self.method,
            format_psnr(self.psnr_db),
            self.count,
            self.corpus
        )
    }
}

/// Table rows plus warnings about excluded images.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub rows: Vec<MetricRow>,
    pub warnings: Vec<String>,
}

impl Evaluation {
    pub fn to_csv(&self) -> String {
        let mut s = format!("{METRICS_CSV_HEADER}\n");
        for row in &self.rows {
            s.push_str(&row.to_string());
            s.push('\n');
        }
        s
    }
}

/// An external method's outputs: one image per id, named `<id>.<ext>`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExternalMethod {
    pub name: String,
    pub dir: PathBuf,
}

impl std::str::FromStr for ExternalMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.split_once('=') {
            Some((name, dir)) if !name.is_empty() && !dir.is_empty() && !name.contains(',') => {
                Ok(ExternalMethod {
                    name: name.to_string(),
                    dir: dir.into(),
                })
            }
            _ => Err(Error::Invalid(format!(
                "external method must be `name=dir`, got {s:?}"
            ))),
        }
    }
}

fn corpus_name(corpus: &Path) -> String {
    corpus
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| corpus.display().to_string())
}

/// Mean PSNR over one split for the bicubic baseline, the generator, and
/// every external method. External images that are missing, unreadable or
/// of the wrong size are excluded with a warning.
pub fn evaluate(
    checkpoint: &Checkpoint,
    manifest: &SplitManifest,
    split: Split,
    corpus: &Path,
    externals: &[ExternalMethod],
) -> Result<Evaluation> {
    let ids = manifest.ids(split);
    if ids.is_empty() {
        return Err(Error::Invalid(format!("split {} is empty", split.as_str())));
    }
    let cfg = &checkpoint.config;
    let records = load_records(corpus, ids, cfg.image_size)?;
    let (bicubic, ours) =
        mean_psnr_on_records(&cfg.generator_spec(), &checkpoint.state.g.params, &records)?;
    let corpus_id = corpus_name(corpus);
    let row = |method: &str, psnr_db: f64, count: usize| MetricRow {
        method: method.to_string(),
        psnr_db,
        count,
        corpus: corpus_id.clone(),
    };
    let mut rows = vec![
        row("bicubic", bicubic, records.len()),
        row("ours", ours, records.len()),
    ];
    let mut warnings = Vec::new();
    for ext in externals {
        let listing = list_images(&ext.dir)?;
        let mut values = Vec::new();
        for r in &records {
            let Some(path) = resolve_id(&listing, &r.id) else {
                warnings.push(format!("{}: no image for id {}", ext.name, r.id));
                continue;
            };
            let img = match decode_image(path) {
                Ok(img) => img,
                Err(e) => {
                    warnings.push(format!("{}: {e}", ext.name));
                    continue;
                }
            };
            match psnr(&img, &reference(&r.hr)) {
                Ok(v) => values.push(v),
                Err(_) => warnings.push(format!(
                    "{}: {} has shape {:?}, expected {:?}",
                    ext.name,
                    path.display(),
                    img.shape(),
                    r.hr.shape()
                )),
            }
        }
        if values.is_empty() {
            warnings.push(format!("{}: no usable images, row omitted", ext.name));
        } else {
            rows.push(row(&ext.name, mean_psnr(&values)?, values.len()));
        }
    }
    Ok(Evaluation { rows, warnings })
}

/// Super-resolves one `[0, 1]` RGB image. A square input of side
/// `image_size / 4` is treated as LR and bicubic-upsampled first; a square
/// input of side `image_size` is used as the BHR condition directly.
pub fn super_resolve(spec: &GeneratorSpec, params: &ParameterSet, img01: &Tensor) -> Result<Tensor> {
    let shape = img01.shape();
    if shape.len() != 3 || shape[0] != 3 || shape[1] != shape[2] {
        return Err(Error::Invalid(format!(
            "expected a square RGB image, got shape {shape:?}"
        )));
    }
    let side = spec.image_size;
    let condition = if shape[1] == side {
        img01.clone()
    } else if shape[1] * UPSCALE == side {
        bicubic_resample(img01, side, side)?
    } else {
        return Err(Error::Invalid(format!(
            "input side {} is neither {side} (BHR) nor {} (LR)",
            shape[1],
            side / UPSCALE
        )));
    };
    let out = generate(spec, params, &[&normalize(&condition)])?;
    Ok(denormalize(&out[0]))
}

/// Super-resolves every image of `inputs` into `out/<id>.png`. Returns the
/// written paths.
pub fn infer_dir(checkpoint: &Checkpoint, inputs: &Path, out: &Path) -> Result<Vec<PathBuf>> {
    let spec = checkpoint.config.generator_spec();
    let listing = if inputs.is_file() {
        let id = inputs
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        vec![(id, inputs.to_path_buf())]
    } else {
        list_images(inputs)?
    };
    if listing.is_empty() {
        return Err(Error::Corpus {
            path: inputs.to_path_buf(),
            msg: "no images found".into(),
        });
    }
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut written = Vec::new();
    for (id, path) in listing {
        let img = decode_image(&path)?;
        let sr = super_resolve(&spec, &checkpoint.state.g.params, &img)?;
        let dest = out.join(format!("{id}.png"));
        crate::data::encode_png(&sr, &dest)?;
        written.push(dest);
    }
    Ok(written)
}

fn nearest_upscale(img01: &Tensor, side: usize) -> Result<Tensor> {
    let s = img01.shape();
    let (h, w) = (s[1], s[2]);
    let d = img01.data();
    Ok(Tensor::from_fn(&[3, side, side], |i| {
        let (c, y, x) = (i / (side * side), (i / side) % side, i % side);
        d[(c * h + y * h / side) * w + x * w / side]
    }))
}

/// Builds the comparison grid: one row per record with columns LR
/// (nearest-upscaled), BHR, generated, HR. Tiles are separated by white
/// lines of [`GRID_SEPARATOR`] pixels. `generated` holds normalized images.
pub fn render_grid(records: &[PairRecord], generated: &[Tensor]) -> Result<RgbImage> {
    if records.is_empty() {
        return Err(Error::Invalid("emit_grid: no records".into()));
    }
    if records.len() != generated.len() {
        return Err(Error::Invalid(format!(
            "emit_grid: {} records but {} generated images",
            records.len(),
            generated.len()
        )));
    }
    let side = records[0].hr.shape()[1];
    let tile = side + GRID_SEPARATOR;
    let width = 4 * side + 3 * GRID_SEPARATOR;
    let height = records.len() * side + (records.len() - 1) * GRID_SEPARATOR;
    let mut grid: RgbImage =
        ImageBuffer::from_pixel(width as u32, height as u32, Rgb([255, 255, 255]));
    for (row, (r, g)) in records.iter().zip(generated).enumerate() {
        let g = g.clone().reshape(&[3, side, side])?;
        let tiles = [
            nearest_upscale(&denormalize(&r.lr), side)?,
            denormalize(&r.bhr),
            denormalize(&g),
            denormalize(&r.hr),
        ];
        for (col, t) in tiles.iter().enumerate() {
            let img = tensor_to_rgb8(t)?;
            if img.width() as usize != side || img.height() as usize != side {
                return Err(Error::Invalid(format!("emit_grid: record {} is not {side}px", r.id)));
            }
            image::imageops::replace(&mut grid, &img, (col * tile) as i64, (row * tile) as i64);
        }
    }
    Ok(grid)
}

/// Writes [`render_grid`] as a PNG.
pub fn emit_grid(records: &[PairRecord], generated: &[Tensor], path: &Path) -> Result<()> {
    let grid = render_grid(records, generated)?;
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    grid.save_with_format(path, image::ImageFormat::Png)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(&[3, 16, 16], |_| rng.random_range(0.0..1.0))
    }

    /// Straight pixel loop over (c, y, x).
    fn psnr_reference(a: &Tensor, b: &Tensor) -> f64 {
        let mut se = 0.0f64;
        let (h, w) = (a.shape()[1], a.shape()[2]);
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    let i = (c * h + y) * w + x;
                    let d = a.data()[i] as f64 - b.data()[i] as f64;
                    se += d * d;
                }
            }
        }
        10.0 * (1.0 / (se / (3 * h * w) as f64)).log10()
    }

    #[test]
    fn psnr_examples() {
        let a = random_image(1);
        assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
        assert_eq!(format_psnr(psnr(&a, &a).unwrap()), "inf");

        let base = Tensor::full(&[3, 8, 8], 0.25f32);
        let off = base.map(|v| v + 16.0 / 255.0);
        let expected = 20.0 * (255.0f64 / 16.0).log10();
        assert!((psnr(&base, &off).unwrap() - expected).abs() < 1e-3);

        let b = random_image(2);
        assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
        assert!(psnr(&a, &Tensor::zeros(&[3, 4, 4])).is_err());
    }

    #[test]
    fn psnr_matches_pixel_loop() {
        for seed in 0..20 {
            let (a, b) = (random_image(seed), random_image(seed + 100));
            assert!((psnr(&a, &b).unwrap() - psnr_reference(&a, &b)).abs() < 1e-9);
        }
    }

    #[test]
    fn neumaier_mean_is_order_independent() {
        let vals: Vec<f64> = (0..1000).map(|i| 20.0 + (i as f64 * 0.37).sin() * 1e-3).collect();
        let mut rev = vals.clone();
        rev.reverse();
        assert_eq!(mean_psnr(&vals).unwrap(), mean_psnr(&rev).unwrap());
        assert_eq!(mean_psnr(&[30.0, f64::INFINITY]).unwrap(), f64::INFINITY);
        assert!(mean_psnr(&[]).is_err());
    }

    #[test]
    fn metric_row_csv() {
        let row = MetricRow {
            method: "bicubic".into(),
            psnr_db: f64::INFINITY,
            count: 3,
            corpus: "faces".into(),
        };
        assert_eq!(row.to_string(), "bicubic,inf,3,faces");
    }

    #[test]
    fn external_method_parsing() {
        let m: ExternalMethod = "lapsrn=out/lap".parse().unwrap();
        assert_eq!(m.name, "lapsrn");
        assert!("nodir".parse::<ExternalMethod>().is_err());
        assert!("=x".parse::<ExternalMethod>().is_err());
    }

    fn record(seed: u64, side: usize) -> PairRecord {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let hr = Tensor::from_fn(&[3, side, side], |_| rng.random_range(-1.0..1.0));
        PairRecord::from_hr(format!("r{seed}"), hr).unwrap()
    }

    #[test]
    fn grid_layout() {
        let records: Vec<PairRecord> = (0..3).map(|s| record(s, 128)).collect();
        let generated: Vec<Tensor> = records.iter().map(|r| r.bhr.clone()).collect();
        let grid = render_grid(&records, &generated).unwrap();
        assert_eq!((grid.width(), grid.height()), (4 * 128 + 6, 3 * 128 + 4));
        assert_eq!(grid.get_pixel(128, 5), &Rgb([255, 255, 255]));
        assert_eq!(grid.get_pixel(5, 129), &Rgb([255, 255, 255]));
        assert_eq!(render_grid(&records, &generated).unwrap(), grid);
        assert!(render_grid(&[], &[]).is_err());
        assert!(render_grid(&records, &generated[..2]).is_err());
    }

    #[test]
    fn grid_lr_column_is_nearest_upscaled() {
        let r = record(7, 16);
        let grid = render_grid(std::slice::from_ref(&r), std::slice::from_ref(&r.bhr)).unwrap();
        let lr = tensor_to_rgb8(&denormalize(&r.lr)).unwrap();
        for y in 0..16u32 {
            for x in 0..16u32 {
                assert_eq!(grid.get_pixel(x, y), lr.get_pixel(x / 4, y / 4));
            }
        }
    }

    #[test]
    fn super_resolve_sizes() {
        let spec = GeneratorSpec {
            width: crate::model::WidthMultiplier::new(1, 32).unwrap(),
            image_size: 64,
            ..Default::default()
        };
        let params = spec.layout().init_params(0);
        let lr = Tensor::full(&[3, 16, 16], 0.5f32);
        let out = super_resolve(&spec, &params, &lr).unwrap();
        assert_eq!(out.shape(), &[3, 64, 64]);
        assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(super_resolve(&spec, &params, &Tensor::full(&[3, 20, 20], 0.5)).is_err());
    }
}
