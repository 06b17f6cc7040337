//! Image I/O, patch serialization and dataset manifests.
//!
//! Pixels are `f32` RGB in `[0, 1]`, stored interleaved row-major (HWC).
//! Conversion to and from 8/16-bit rasters only happens in [`load_image`]
//! and [`save_png`].

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use fundus_nn::Tensor;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::quality::QualityLabel;

pub const CHANNELS: usize = 3;
pub const DEFAULT_IMAGE_SIZE: usize = 512;
pub const DEFAULT_PATCH_SIZE: usize = 128;

/// An RGB float raster.
#[derive(Clone, Debug, PartialEq)]
pub struct Raster {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Raster {
    pub fn new(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0.0; height * width * CHANNELS],
        }
    }

    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Self {
        let mut r = Self::new(height, width);
        for px in r.data.chunks_mut(CHANNELS) {
            px.copy_from_slice(&rgb);
        }
        r
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width * CHANNELS {
            return Err(Error::Argument(format!(
                "{height}x{width} raster needs {} values, got {}",
                height * width * CHANNELS,
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize) -> [f32; 3],
    ) -> Self {
        let mut r = Self::new(height, width);
        for y in 0..height {
            for x in 0..width {
                r.set(y, x, f(y, x));
            }
        }
        r
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> [f32; 3] {
        let i = (y * self.width + x) * CHANNELS;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, rgb: [f32; 3]) {
        let i = (y * self.width + x) * CHANNELS;
        self.data[i..i + CHANNELS].copy_from_slice(&rgb);
    }

    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Raster {
        assert!(
            y0 + h <= self.height && x0 + w <= self.width,
            "crop out of bounds"
        );
        let mut data = Vec::with_capacity(h * w * CHANNELS);
        for y in y0..y0 + h {
            let start = (y * self.width + x0) * CHANNELS;
            data.extend_from_slice(&self.data[start..start + w * CHANNELS]);
        }
        Raster {
            height: h,
            width: w,
            data,
        }
    }

    pub fn paste(&mut self, y0: usize, x0: usize, src: &Raster) {
        assert!(
            y0 + src.height <= self.height && x0 + src.width <= self.width,
            "paste out of bounds"
        );
        for y in 0..src.height {
            let dst = ((y0 + y) * self.width + x0) * CHANNELS;
            let s = y * src.width * CHANNELS;
            self.data[dst..dst + src.width * CHANNELS]
                .copy_from_slice(&src.data[s..s + src.width * CHANNELS]);
        }
    }

    pub fn clamp01(&mut self) {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
    }

    pub fn same_shape(&self, other: &Raster) -> bool {
        self.height == other.height && self.width == other.width
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len().max(1) as f64
    }

    /// Bilinear resampling with half-pixel centres and clamped borders.
    pub fn resize_bilinear(&self, height: usize, width: usize) -> Raster {
        if height == self.height && width == self.width {
            return self.clone();
        }
        let sy = self.height as f64 / height as f64;
        let sx = self.width as f64 / width as f64;
        let mut out = Raster::new(height, width);
        for y in 0..height {
            let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (self.height - 1) as f64);
            let y0 = fy.floor() as usize;
            let y1 = (y0 + 1).min(self.height - 1);
            let ty = (fy - y0 as f64) as f32;
            for x in 0..width {
                let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (self.width - 1) as f64);
                let x0 = fx.floor() as usize;
                let x1 = (x0 + 1).min(self.width - 1);
                let tx = (fx - x0 as f64) as f32;
                let (a, b, c, d) = (
                    self.get(y0, x0),
                    self.get(y0, x1),
                    self.get(y1, x0),
                    self.get(y1, x1),
                );
                let mut px = [0.0; 3];
                for ch in 0..CHANNELS {
                    let top = a[ch] + (b[ch] - a[ch]) * tx;
                    let bot = c[ch] + (d[ch] - c[ch]) * tx;
                    px[ch] = top + (bot - top) * ty;
                }
                out.set(y, x, px);
            }
        }
        out
    }
}

/// A full image in canonical form.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageRecord {
    pub pixels: Raster,
    pub source_path: String,
    /// `(height, width)` before resizing.
    pub original_size: (usize, usize),
}

impl ImageRecord {
    pub fn from_raster(pixels: Raster, source_path: impl Into<String>) -> Self {
        let original_size = (pixels.height(), pixels.width());
        Self {
            pixels,
            source_path: source_path.into(),
            original_size,
        }
    }

    pub fn side(&self) -> usize {
        self.pixels.height()
    }
}

/// One tile of a [`PatchGrid`].
#[derive(Clone, Debug, PartialEq)]
pub struct PatchRecord {
    pub pixels: Raster,
    pub grid_row: usize,
    pub grid_col: usize,
    pub parent_id: String,
}

impl PatchRecord {
    /// Stable identifier `parent#row,col`.
    pub fn id(&self) -> String {
        patch_id(&self.parent_id, self.grid_row, self.grid_col)
    }
}

pub fn patch_id(parent: &str, row: usize, col: usize) -> String {
    format!("{parent}#{row},{col}")
}

#[derive(Clone, Debug, PartialEq)]
pub struct PatchGrid {
    pub patches: Vec<PatchRecord>,
    pub rows: usize,
    pub cols: usize,
    pub patch_size: usize,
    pub parent_id: String,
}

/// Decodes `path`, normalizes to `[0,1]` and resizes to `target_size` square.
pub fn load_image(path: impl AsRef<Path>, target_size: usize) -> Result<ImageRecord> {
    let path = path.as_ref();
    if target_size == 0 {
        return Err(Error::Argument("target size must be positive".into()));
    }
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let decoded = image::load_from_memory(&bytes).map_err(|e| Error::Decode {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let rgb = decoded.into_rgb32f();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let mut raster = Raster::from_vec(h, w, rgb.into_raw())?;
    raster.clamp01();
    let pixels = raster.resize_bilinear(target_size, target_size);
    Ok(ImageRecord {
        pixels,
        source_path: path.display().to_string(),
        original_size: (h, w),
    })
}

/// Writes an 8-bit RGB PNG.
pub fn save_png(raster: &Raster, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes: Vec<u8> = raster
        .data()
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    image::save_buffer_with_format(
        path,
        &bytes,
        raster.width() as u32,
        raster.height() as u32,
        image::ExtendedColorType::Rgb8,
        image::ImageFormat::Png,
    )
    .map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Decode {
            path: path.to_path_buf(),
            message: other.to_string(),
        },
    })
}

/// Splits a square image into non-overlapping `patch_size` tiles, row-major.
pub fn patchify(image: &ImageRecord, patch_size: usize) -> Result<PatchGrid> {
    let (h, w) = (image.pixels.height(), image.pixels.width());
    if patch_size == 0 || h % patch_size != 0 || w % patch_size != 0 {
        return Err(Error::Argument(format!(
            "patch size {patch_size} does not divide a {h}x{w} image"
        )));
    }
    let (rows, cols) = (h / patch_size, w / patch_size);
    let mut patches = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            patches.push(PatchRecord {
                pixels: image
                    .pixels
                    .crop(r * patch_size, c * patch_size, patch_size, patch_size),
                grid_row: r,
                grid_col: c,
                parent_id: image.source_path.clone(),
            });
        }
    }
    Ok(PatchGrid {
        patches,
        rows,
        cols,
        patch_size,
        parent_id: image.source_path.clone(),
    })
}

/// Inverse of [`patchify`]. Patch order is irrelevant; coordinates are used.
pub fn reassemble(grid: &PatchGrid) -> Result<ImageRecord> {
    let p = grid.patch_size;
    let mut seen = vec![false; grid.rows * grid.cols];
    let mut pixels = Raster::new(grid.rows * p, grid.cols * p);
    for patch in &grid.patches {
        if patch.grid_row >= grid.rows || patch.grid_col >= grid.cols {
            return Err(Error::Argument(format!(
                "patch ({}, {}) outside a {}x{} grid",
                patch.grid_row, patch.grid_col, grid.rows, grid.cols
            )));
        }
        if patch.pixels.height() != p || patch.pixels.width() != p {
            return Err(Error::Argument(format!(
                "patch ({}, {}) is {}x{}, expected {p}x{p}",
                patch.grid_row,
                patch.grid_col,
                patch.pixels.height(),
                patch.pixels.width()
            )));
        }
        let cell = patch.grid_row * grid.cols + patch.grid_col;
        if seen[cell] {
            return Err(Error::Argument(format!(
                "duplicate patch ({}, {})",
                patch.grid_row, patch.grid_col
            )));
        }
        seen[cell] = true;
        pixels.paste(patch.grid_row * p, patch.grid_col * p, &patch.pixels);
    }
    if let Some(missing) = seen.iter().position(|s| !s) {
        return Err(Error::MissingCell {
            row: missing / grid.cols,
            col: missing % grid.cols,
        });
    }
    Ok(ImageRecord::from_raster(pixels, grid.parent_id.clone()))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::format(
                "manifest",
                format!("unknown split `{other}`"),
            )),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    /// Relative to the manifest root unless absolute.
    pub path: PathBuf,
    pub split: Option<Split>,
    pub label: Option<QualityLabel>,
}

/// A list of images with optional split and quality tags.
///
/// Text form: a `#root<TAB>DIR` line followed by one `path<TAB>split<TAB>label`
/// record per image, `-` marking an absent field.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

const IMAGE_EXTENSIONS: &[&str] = &["png", "jpg", "jpeg"];

fn has_image_extension(p: &Path) -> bool {
    p.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
}

/// Sorted image files directly under `dir`.
pub fn list_images(dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let p = entry.path();
        if p.is_file() && has_image_extension(&p) {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}

impl DatasetManifest {
    pub fn resolve(&self, entry: &ManifestEntry) -> PathBuf {
        if entry.path.is_absolute() {
            entry.path.clone()
        } else {
            self.root.join(&entry.path)
        }
    }

    pub fn with_split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == Some(split))
    }

    /// Fails with the first entry whose file does not exist.
    pub fn check_paths(&self) -> Result<()> {
        for e in &self.entries {
            let p = self.resolve(e);
            if !p.is_file() {
                return Err(Error::io(
                    p,
                    std::io::Error::new(std::io::ErrorKind::NotFound, "manifest entry not found"),
                ));
            }
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("#root\t{}\n", self.root.display());
        for e in &self.entries {
            let split = e.split.map_or("-".to_string(), |s| s.to_string());
            let label = e.label.map_or("-".to_string(), |l| l.to_string());
            s.push_str(&format!("{}\t{split}\t{label}\n", e.path.display()));
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut root = PathBuf::new();
        let mut entries = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim_end();
            if line.is_empty() {
                continue;
            }
            if let Some(r) = line.strip_prefix("#root\t") {
                root = PathBuf::from(r);
                continue;
            }
            if line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.is_empty() || fields.len() > 3 || fields[0].is_empty() {
                return Err(Error::format(
                    "manifest",
                    format!("line {}: expected `path[\\tsplit[\\tlabel]]`", lineno + 1),
                ));
            }
            let field = |i: usize| fields.get(i).copied().filter(|f| *f != "-");
            entries.push(ManifestEntry {
                path: PathBuf::from(fields[0]),
                split: field(1).map(str::parse).transpose()?,
                label: field(2).map(str::parse).transpose()?,
            });
        }
        Ok(Self { root, entries })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }
}

/// Lists decodable images under `root` and assigns each one split, shuffled
/// deterministically by `seed`.
pub fn build_manifest(
    root: impl AsRef<Path>,
    split_fractions: (f64, f64, f64),
    seed: u64,
) -> Result<DatasetManifest> {
    let root = root.as_ref();
    let (ft, fv, fs_) = split_fractions;
    if [ft, fv, fs_].iter().any(|f| !(0.0..=1.0).contains(f))
        || ((ft + fv + fs_) - 1.0).abs() > 1e-6
    {
        return Err(Error::Argument(format!(
            "split fractions {split_fractions:?} must be in [0,1] and sum to 1"
        )));
    }
    let mut files = Vec::new();
    for p in list_images(root)? {
        let decodable = image::ImageReader::open(&p)
            .ok()
            .and_then(|r| r.with_guessed_format().ok())
            .and_then(|r| r.into_dimensions().ok())
            .is_some();
        if decodable {
            files.push(p);
        }
    }
    if files.is_empty() {
        return Err(Error::Data(format!(
            "no decodable images under {}",
            root.display()
        )));
    }
    let n = files.len();
    let n_train = ((ft * n as f64).round() as usize).min(n);
    let n_val = ((fv * n as f64).round() as usize).min(n - n_train);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut splits = vec![Split::Test; n];
    for (rank, &i) in order.iter().enumerate() {
        splits[i] = if rank < n_train {
            Split::Train
        } else if rank < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
    }
    let entries = files
        .iter()
        .zip(splits)
        .map(|(p, split)| ManifestEntry {
            path: p.strip_prefix(root).unwrap_or(p).to_path_buf(),
            split: Some(split),
            label: None,
        })
        .collect();
    Ok(DatasetManifest {
        root: root.to_path_buf(),
        entries,
    })
}

/// Packs equally sized rasters into an `[N, 3, H, W]` tensor.
pub fn rasters_to_tensor<'a>(rasters: impl IntoIterator<Item = &'a Raster>) -> Result<Tensor> {
    let rasters: Vec<&Raster> = rasters.into_iter().collect();
    let first = rasters
        .first()
        .ok_or_else(|| Error::Argument("cannot build a tensor from zero rasters".into()))?;
    let (h, w) = (first.height(), first.width());
    let mut data = Vec::with_capacity(rasters.len() * CHANNELS * h * w);
    for r in &rasters {
        if !r.same_shape(first) {
            return Err(Error::Argument(format!(
                "raster {}x{} does not match {h}x{w}",
                r.height(),
                r.width()
            )));
        }
        for c in 0..CHANNELS {
            data.extend(r.data().iter().skip(c).step_by(CHANNELS).map(|&v| v as f64));
        }
    }
    Ok(Tensor::from_vec(&[rasters.len(), CHANNELS, h, w], data)?)
}

/// Inverse of [`rasters_to_tensor`].
pub fn tensor_to_rasters(t: &Tensor) -> Vec<Raster> {
    let (n, c, h, w) = t.dims4();
    assert_eq!(c, CHANNELS, "expected an RGB tensor");
    let plane = h * w;
    (0..n)
        .map(|i| {
            let base = i * c * plane;
            let mut r = Raster::new(h, w);
            for (p, px) in r.data_mut().chunks_mut(CHANNELS).enumerate() {
                for ch in 0..CHANNELS {
                    px[ch] = t.data()[base + ch * plane + p] as f32;
                }
            }
            r
        })
        .collect()
}

/// Checks that every `(row, col)` of a grid appears exactly once.
pub fn grid_is_complete(grid: &PatchGrid) -> bool {
    let cells: HashSet<(usize, usize)> = grid
        .patches
        .iter()
        .map(|p| (p.grid_row, p.grid_col))
        .collect();
    grid.patches.len() == grid.rows * grid.cols && cells.len() == grid.patches.len()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_image(side: usize, seed: u64) -> ImageRecord {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..side * side * 3).map(|_| rng.random::<f32>()).collect();
        ImageRecord::from_raster(
            Raster::from_vec(side, side, data).unwrap(),
            format!("img{seed}"),
        )
    }

    #[test]
    fn patch_counts_follow_grid_arithmetic() {
        let img = random_image(512, 1);
        let g = patchify(&img, 128).unwrap();
        assert_eq!((g.rows, g.cols, g.patches.len()), (4, 4, 16));
        assert!(grid_is_complete(&g));
        assert_eq!(patchify(&img, 256).unwrap().patches.len(), 4);
        assert!(matches!(patchify(&img, 100), Err(Error::Argument(_))));
        assert!(matches!(patchify(&img, 0), Err(Error::Argument(_))));
    }

    #[test]
    fn patches_are_row_major() {
        let g = patchify(&random_image(64, 2), 16).unwrap();
        let coords: Vec<_> = g.patches.iter().map(|p| (p.grid_row, p.grid_col)).collect();
        assert_eq!(coords[0..5], [(0, 0), (0, 1), (0, 2), (0, 3), (1, 0)]);
    }

    #[test]
    fn zeroed_patch_is_local() {
        let img = random_image(512, 3);
        let mut g = patchify(&img, 128).unwrap();
        g.patches[5].pixels = Raster::new(128, 128);
        let out = reassemble(&g).unwrap();
        let (r, c) = (g.patches[5].grid_row, g.patches[5].grid_col);
        for y in 0..512 {
            for x in 0..512 {
                let inside = y / 128 == r && x / 128 == c;
                let px = out.pixels.get(y, x);
                if inside {
                    assert_eq!(px, [0.0; 3]);
                } else {
                    assert_eq!(px, img.pixels.get(y, x));
                }
            }
        }
    }

    #[test]
    fn missing_cell_is_reported() {
        let mut g = patchify(&random_image(64, 4), 32).unwrap();
        g.patches.remove(0);
        match reassemble(&g) {
            Err(Error::MissingCell { row: 0, col: 0 }) => {}
            other => panic!("expected missing (0,0), got {other:?}"),
        }
    }

    #[test]
    fn bilinear_halving_averages_pixel_pairs() {
        let src = Raster::from_fn(4, 4, |y, x| [(y * 4 + x) as f32 / 16.0; 3]);
        let half = src.resize_bilinear(2, 2);
        // Output (0,0) samples at source (0.5, 0.5): mean of the top-left 2x2 block.
        let want = (0.0 + 1.0 + 4.0 + 5.0) / 4.0 / 16.0;
        assert!((half.get(0, 0)[0] - want).abs() < 1e-6);
    }

    #[test]
    fn tensor_layout_round_trip() {
        let a = random_image(4, 8).pixels;
        let b = random_image(4, 9).pixels;
        let t = rasters_to_tensor([&a, &b]).unwrap();
        assert_eq!(t.shape(), &[2, 3, 4, 4]);
        // Channel 1 of pixel (2, 3) in the second raster.
        assert_eq!(t.data()[16 * 3 + 16 + 2 * 4 + 3] as f32, b.get(2, 3)[1]);
        assert_eq!(tensor_to_rasters(&t), vec![a, b]);
    }

    #[test]
    fn manifest_text_round_trip() {
        let m = DatasetManifest {
            root: PathBuf::from("/data"),
            entries: vec![
                ManifestEntry {
                    path: "a.png".into(),
                    split: Some(Split::Train),
                    label: Some(QualityLabel::High),
                },
                ManifestEntry {
                    path: "b.png".into(),
                    split: None,
                    label: None,
                },
            ],
        };
        assert_eq!(DatasetManifest::parse(&m.to_text()).unwrap(), m);
        assert!(DatasetManifest::parse("a.png\tbogus\n").is_err());
    }
}
