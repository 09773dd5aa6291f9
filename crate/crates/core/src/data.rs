//! HR / LR / BHR triples from an image directory.
//!
//! Images are decoded to `[3, H, W]` tensors in `[0, 1]`, center-cropped to
//! the largest square, resized to the working side, snapped to the 8-bit
//! grid, and mapped to `[-1, 1]`. LR is the bicubic ×4 downsample of HR and
//! BHR the bicubic ×4 upsample of LR.
//!
//! Bicubic resampling uses the Keys cubic convolution kernel with `a = -0.5`,
//! half-pixel centers (`src = (dst + 0.5) * in / out - 0.5`), four taps per
//! axis with edge clamping, and no anti-aliasing prefilter. The two passes
//! (rows, then columns) accumulate in `f64`; each output is written as
//! `v_ref + Σ w_i (v_i - v_ref)` with `v_ref` the tap at `floor(src)`, which
//! equals `Σ w_i v_i` because the weights sum to one and keeps constant
//! regions exactly constant.

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use image::{ImageBuffer, Rgb, RgbImage};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// HR-to-LR side ratio.
pub const UPSCALE: usize = 4;

/// Keys cubic convolution parameter.
pub const KEYS_A: f64 = -0.5;

const IMAGE_EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

/// Keys cubic convolution kernel with `a = -0.5`.
pub fn keys_kernel(x: f64) -> f64 {
    let a = KEYS_A;
    let x = x.abs();
    if x <= 1.0 {
        (a + 2.0) * x * x * x - (a + 3.0) * x * x + 1.0
    } else if x < 2.0 {
        a * x * x * x - 5.0 * a * x * x + 8.0 * a * x - 4.0 * a
    } else {
        0.0
    }
}

#[derive(Debug, Clone, Copy)]
struct Taps {
    index: [usize; 4],
    weight: [f64; 4],
}

fn taps(out_len: usize, in_len: usize) -> Vec<Taps> {
    let scale = in_len as f64 / out_len as f64;
    let last = in_len as isize - 1;
    (0..out_len)
        .map(|o| {
            let src = (o as f64 + 0.5) * scale - 0.5;
            let base = src.floor();
            let t = src - base;
            let base = base as isize;
            let mut index = [0; 4];
            for (i, slot) in index.iter_mut().enumerate() {
                *slot = (base - 1 + i as isize).clamp(0, last) as usize;
            }
            Taps {
                index,
                weight: [
                    keys_kernel(1.0 + t),
                    keys_kernel(t),
                    keys_kernel(1.0 - t),
                    keys_kernel(2.0 - t),
                ],
            }
        })
        .collect()
}

#[inline]
fn apply(taps: &Taps, sample: impl Fn(usize) -> f64) -> f64 {
    let reference = sample(taps.index[1]);
    let mut acc = 0.0;
    for (&i, &w) in taps.index.iter().zip(&taps.weight) {
        acc += w * (sample(i) - reference);
    }
    reference + acc
}

/// Resamples every channel of a `[C, H, W]` image to `[C, out_h, out_w]`.
/// Values are not clipped.
pub fn bicubic_resample(img: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (c, h, w) = dims3(img, "bicubic_resample")?;
    if out_h == 0 || out_w == 0 || h == 0 || w == 0 {
        return Err(Error::Invalid(format!(
            "bicubic_resample: cannot resample {h}x{w} to {out_h}x{out_w}"
        )));
    }
    let tx = taps(out_w, w);
    let ty = taps(out_h, h);
    let mut out = Vec::with_capacity(c * out_h * out_w);
    let mut rows = vec![0.0f64; h * out_w];
    for ch in 0..c {
        let plane = &img.data()[ch * h * w..(ch + 1) * h * w];
        for y in 0..h {
            let line = &plane[y * w..(y + 1) * w];
            for (x, t) in tx.iter().enumerate() {
                rows[y * out_w + x] = apply(t, |i| line[i] as f64);
            }
        }
        for t in &ty {
            for x in 0..out_w {
                out.push(apply(t, |i| rows[i * out_w + x]) as f32);
            }
        }
    }
    Tensor::from_vec(&[c, out_h, out_w], out)
}

fn dims3(img: &Tensor, op: &'static str) -> Result<(usize, usize, usize)> {
    match img.shape() {
        &[c, h, w] => Ok((c, h, w)),
        other => Err(Error::Rank {
            op,
            expected: 3,
            actual: other.to_vec(),
        }),
    }
}

/// Largest centered square crop, then bicubic resize to `side x side`.
pub fn center_crop_resize(img: &Tensor, side: usize) -> Result<Tensor> {
    let (c, h, w) = dims3(img, "center_crop_resize")?;
    let crop = h.min(w);
    if crop == 0 {
        return Err(Error::Invalid("center_crop_resize: empty image".into()));
    }
    let (y0, x0) = ((h - crop) / 2, (w - crop) / 2);
    let mut data = Vec::with_capacity(c * crop * crop);
    for ch in 0..c {
        for y in y0..y0 + crop {
            let start = (ch * h + y) * w + x0;
            data.extend_from_slice(&img.data()[start..start + crop]);
        }
    }
    let cropped = Tensor::from_vec(&[c, crop, crop], data)?;
    if crop == side {
        Ok(cropped)
    } else {
        bicubic_resample(&cropped, side, side)
    }
}

/// LR (`side / 4`) and BHR (`side`) images from a square HR image.
pub fn degrade(hr: &Tensor) -> Result<(Tensor, Tensor)> {
    let (c, h, w) = dims3(hr, "degrade")?;
    if c != 3 {
        return Err(Error::Shape {
            op: "degrade",
            dim: "channels",
            expected: 3,
            actual: c,
        });
    }
    if h != w || h % UPSCALE != 0 || h == 0 {
        return Err(Error::Invalid(format!(
            "degrade: HR must be square with side divisible by {UPSCALE}, got {h}x{w}"
        )));
    }
    let lr = bicubic_resample(hr, h / UPSCALE, w / UPSCALE)?;
    let bhr = bicubic_resample(&lr, h, w)?;
    Ok((lr, bhr))
}

/// `[0, 1] -> [-1, 1]`.
pub fn normalize(img01: &Tensor) -> Tensor {
    img01.map(|v| 2.0 * v - 1.0)
}

/// `[-1, 1] -> [0, 1]`, clamped.
pub fn denormalize(imgn: &Tensor) -> Tensor {
    imgn.map(|v| ((v + 1.0) * 0.5).clamp(0.0, 1.0))
}

/// Rounds a `[0, 1]` value to the nearest 8-bit level.
pub fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Snaps every value of a `[0, 1]` image onto the 8-bit grid.
pub fn snap_to_u8_grid(img01: &Tensor) -> Tensor {
    img01.map(|v| quantize(v) as f32 / 255.0)
}

/// Decodes a PNG or JPEG into a `[3, H, W]` tensor with values `byte / 255`.
/// Grayscale images are replicated to three channels.
pub fn decode_image(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let img = image::load_from_memory(&bytes)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?
        .to_rgb8();
    Ok(rgb8_to_tensor(&img))
}

pub fn rgb8_to_tensor(img: &RgbImage) -> Tensor {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0f32; 3 * h * w];
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            data[(c * h + y as usize) * w + x as usize] = px[c] as f32 / 255.0;
        }
    }
    Tensor::from_vec(&[3, h, w], data).expect("sized above")
}

/// Converts a `[3, H, W]` image in `[0, 1]` to 8-bit RGB (clamped, rounded).
pub fn tensor_to_rgb8(img01: &Tensor) -> Result<RgbImage> {
    let (c, h, w) = dims3(img01, "tensor_to_rgb8")?;
    if c != 3 {
        return Err(Error::Shape {
            op: "tensor_to_rgb8",
            dim: "channels",
            expected: 3,
            actual: c,
        });
    }
    let d = img01.data();
    Ok(ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let at = |ch: usize| quantize(d[(ch * h + y as usize) * w + x as usize]);
        Rgb([at(0), at(1), at(2)])
    }))
}

/// Writes a `[3, H, W]` image in `[0, 1]` as an 8-bit PNG.
pub fn encode_png(img01: &Tensor, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    tensor_to_rgb8(img01)?
        .save_with_format(path, image::ImageFormat::Png)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
}

/// One training example, all images normalized to `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PairRecord {
    pub id: String,
    pub hr: Tensor,
    pub lr: Tensor,
    pub bhr: Tensor,
}

impl PairRecord {
    pub fn from_hr(id: impl Into<String>, hr: Tensor) -> Result<Self> {
        let (lr, bhr) = degrade(&hr)?;
        Ok(PairRecord {
            id: id.into(),
            hr,
            lr,
            bhr,
        })
    }

    /// Decodes, crops and resizes a corpus image to `side`, snaps it to the
    /// 8-bit grid (as if stored as an image) and degrades it.
    pub fn load(id: impl Into<String>, path: &Path, side: usize) -> Result<Self> {
        let hr = snap_to_u8_grid(&center_crop_resize(&decode_image(path)?, side)?);
        Self::from_hr(id, normalize(&hr))
    }

    /// True when re-running [`degrade`] on `hr` reproduces `lr` and `bhr` bitwise.
    pub fn is_recomputable(&self) -> Result<bool> {
        let (lr, bhr) = degrade(&self.hr)?;
        Ok(lr == self.lr && bhr == self.bhr)
    }
}

/// Image files of a corpus directory as `(id, path)`, sorted by id. The id
/// is the file stem.
pub fn list_images(dir: &Path) -> Result<Vec<(String, PathBuf)>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let is_image = path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()));
        if !is_image || !path.is_file() {
            continue;
        }
        let id = path
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| Error::Corpus {
                path: path.clone(),
                msg: "file name is not valid UTF-8".into(),
            })?
            .to_string();
        out.push((id, path));
    }
    out.sort();
    for pair in out.windows(2) {
        if pair[0].0 == pair[1].0 {
            return Err(Error::Corpus {
                path: dir.to_path_buf(),
                msg: format!("two images share the id {:?}", pair[0].0),
            });
        }
    }
    Ok(out)
}

/// Finds the image file for `id` in a corpus listing.
pub fn resolve_id<'a>(listing: &'a [(String, PathBuf)], id: &str) -> Option<&'a Path> {
    listing
        .binary_search_by(|(i, _)| i.as_str().cmp(id))
        .ok()
        .map(|i| listing[i].1.as_path())
}

/// Loads the records for `ids` (in that order) from a corpus directory.
pub fn load_records(corpus: &Path, ids: &[String], side: usize) -> Result<Vec<PairRecord>> {
    let listing = list_images(corpus)?;
    ids.iter()
        .map(|id| {
            let path = resolve_id(&listing, id).ok_or_else(|| Error::Corpus {
                path: corpus.to_path_buf(),
                msg: format!("no image for id {id:?}"),
            })?;
            PairRecord::load(id.clone(), path, side)
        })
        .collect()
}

/// Train / validation / test fractions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Fractions {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for Fractions {
    fn default() -> Self {
        Fractions {
            train: 0.9,
            val: 0.05,
            test: 0.05,
        }
    }
}

impl Fractions {
    pub fn new(train: f64, val: f64, test: f64) -> Result<Self> {
        let f = Fractions { train, val, test };
        let all = [train, val, test];
        if all.iter().any(|v| !(0.0..=1.0).contains(v)) || ((train + val + test) - 1.0).abs() > 1e-9
        {
            return Err(Error::Invalid(format!(
                "split fractions {train}, {val}, {test} must be in [0, 1] and sum to 1"
            )));
        }
        Ok(f)
    }

    /// Split sizes for `n` items: each split gets `floor(f * n)`, then the
    /// remaining items go one at a time to the splits with the largest
    /// fractional parts (ties resolved train, val, test).
    pub fn allocate(&self, n: usize) -> [usize; 3] {
        let exact = [self.train, self.val, self.test].map(|f| f * n as f64);
        let mut sizes = exact.map(|x| (x + 1e-9).floor() as usize);
        let mut remainder = n.saturating_sub(sizes.iter().sum());
        let mut order = [0usize, 1, 2];
        order.sort_by(|&a, &b| {
            let fa = exact[a] - sizes[a] as f64;
            let fb = exact[b] - sizes[b] as f64;
            fb.partial_cmp(&fa).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b))
        });
        for &i in order.iter().cycle() {
            if remainder == 0 {
                break;
            }
            sizes[i] += 1;
            remainder -= 1;
        }
        sizes
    }
}

impl fmt::Display for Fractions {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{},{},{}", self.train, self.val, self.test)
    }
}

impl FromStr for Fractions {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<f64> = s
            .split(',')
            .map(|p| parse_ratio(p.trim()))
            .collect::<Result<_>>()?;
        match parts[..] {
            [a, b, c] => Fractions::new(a, b, c),
            _ => Err(Error::Invalid(format!(
                "expected three comma-separated fractions, got {s:?}"
            ))),
        }
    }
}

fn parse_ratio(s: &str) -> Result<f64> {
    let bad = || Error::Invalid(format!("{s:?} is not a number or n/d ratio"));
    match s.split_once('/') {
        Some((n, d)) => {
            let n: f64 = n.trim().parse().map_err(|_| bad())?;
            let d: f64 = d.trim().parse().map_err(|_| bad())?;
            if d == 0.0 {
                return Err(bad());
            }
            Ok(n / d)
        }
        None => s.parse().map_err(|_| bad()),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(Error::Invalid(format!("unknown split {s:?}"))),
        }
    }
}

/// Disjoint train / val / test id lists.
///
/// Text form: one `<split>\t<id>` line per id, train ids first, then val,
/// then test, each in shuffled order.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct SplitManifest {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
    /// Seed used to shuffle, when known (not stored in the text form).
    pub seed: Option<u64>,
}

impl SplitManifest {
    /// Shuffles `ids` with a ChaCha8 stream seeded by `seed` and partitions
    /// them per [`Fractions::allocate`].
    pub fn from_ids(mut ids: Vec<String>, seed: u64, fractions: Fractions) -> Result<Self> {
        if ids.is_empty() {
            return Err(Error::Invalid("cannot split an empty id list".into()));
        }
        ids.sort();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ids.shuffle(&mut rng);
        let [n_train, n_val, _] = fractions.allocate(ids.len());
        let test = ids.split_off(n_train + n_val);
        let val = ids.split_off(n_train);
        Ok(SplitManifest {
            train: ids,
            val,
            test,
            seed: Some(seed),
        })
    }

    pub fn ids(&self, split: Split) -> &[String] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn len(&self) -> usize {
        self.train.len() + self.val.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for split in [Split::Train, Split::Val, Split::Test] {
            for id in self.ids(split) {
                out.push_str(split.as_str());
                out.push('\t');
                out.push_str(id);
                out.push('\n');
            }
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut m = SplitManifest::default();
        let mut seen = BTreeSet::new();
        for (i, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let (split, id) = line.split_once('\t').ok_or_else(|| Error::Config {
                line: i + 1,
                msg: "expected `<split>\\t<id>`".into(),
            })?;
            let split: Split = split.parse().map_err(|e: Error| Error::Config {
                line: i + 1,
                msg: e.to_string(),
            })?;
            if !seen.insert(id.to_string()) {
                return Err(Error::Config {
                    line: i + 1,
                    msg: format!("id {id:?} listed twice"),
                });
            }
            match split {
                Split::Train => m.train.push(id.to_string()),
                Split::Val => m.val.push(id.to_string()),
                Split::Test => m.test.push(id.to_string()),
            }
        }
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }
}

/// Lists a corpus directory and splits its image ids.
pub fn build_manifest(corpus: &Path, seed: u64, fractions: Fractions) -> Result<SplitManifest> {
    let ids: Vec<String> = list_images(corpus)?.into_iter().map(|(id, _)| id).collect();
    if ids.is_empty() {
        return Err(Error::Corpus {
            path: corpus.to_path_buf(),
            msg: "no PNG or JPEG images found".into(),
        });
    }
    SplitManifest::from_ids(ids, seed, fractions)
}

/// Subdirectories written by [`materialize`].
pub const DERIVED_DIRS: [&str; 3] = ["derived/hr", "derived/lr", "derived/bhr"];

/// Writes `derived/hr`, `derived/lr` and `derived/bhr` PNGs under `out` for
/// every corpus image, named by id. Returns the ids written.
pub fn materialize(corpus: &Path, out: &Path, side: usize) -> Result<Vec<String>> {
    let listing = list_images(corpus)?;
    if listing.is_empty() {
        return Err(Error::Corpus {
            path: corpus.to_path_buf(),
            msg: "no PNG or JPEG images found".into(),
        });
    }
    let mut ids = Vec::with_capacity(listing.len());
    for (id, path) in &listing {
        let record = PairRecord::load(id.clone(), path, side)?;
        let file = format!("{id}.png");
        encode_png(&denormalize(&record.hr), &out.join(DERIVED_DIRS[0]).join(&file))?;
        encode_png(&denormalize(&record.lr), &out.join(DERIVED_DIRS[1]).join(&file))?;
        encode_png(&denormalize(&record.bhr), &out.join(DERIVED_DIRS[2]).join(&file))?;
        ids.push(id.clone());
    }
    Ok(ids)
}

/// Re-derives LR and BHR from each materialized HR image and compares the
/// 8-bit encodings with the stored files. Returns the ids that differ.
pub fn verify_materialized(out: &Path) -> Result<Vec<String>> {
    let hr_dir = out.join(DERIVED_DIRS[0]);
    let mut mismatched = Vec::new();
    for (id, hr_path) in list_images(&hr_dir)? {
        let hr = normalize(&decode_image(&hr_path)?);
        let (lr, bhr) = degrade(&hr)?;
        let file = format!("{id}.png");
        let stored_lr = decode_image(&out.join(DERIVED_DIRS[1]).join(&file))?;
        let stored_bhr = decode_image(&out.join(DERIVED_DIRS[2]).join(&file))?;
        let same = tensor_to_rgb8(&denormalize(&lr))? == tensor_to_rgb8(&stored_lr)?
            && tensor_to_rgb8(&denormalize(&bhr))? == tensor_to_rgb8(&stored_bhr)?;
        if !same {
            mismatched.push(id);
        }
    }
    Ok(mismatched)
}
