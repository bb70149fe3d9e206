//! Image loading, saving and dataset enumeration.
//!
//! All pixel data in this crate travels as [`ImageBuffer`]: H x W x 3,
//! f32 in [0, 1]. Model-specific ranges ([-1, 1] for the networks, the
//! VGG input convention) are produced at the module boundaries that need
//! them, never stored.

use std::path::{Path, PathBuf};

use image::ImageReader;
use ndarray::{s, Array2, Array3};

use crate::error::{Error, Result};

/// An H x W x 3 float image with every value finite and in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBuffer {
    data: Array3<f32>,
}

impl ImageBuffer {
    /// Wraps raw pixel data, enforcing the range and channel invariants.
    pub fn new(data: Array3<f32>) -> Result<Self> {
        let (_, _, c) = data.dim();
        if c != 3 {
            return Err(Error::Contract(format!(
                "image buffer must have 3 channels, got {c}"
            )));
        }
        if !data.iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)) {
            return Err(Error::Contract(
                "image buffer values must be finite and within [0, 1]".into(),
            ));
        }
        Ok(ImageBuffer { data })
    }

    /// Builds a buffer from data in an arbitrary finite range by clamping
    /// into [0, 1]. Used where float round-off may leave values a ulp
    /// outside the range (e.g. network outputs).
    pub fn from_clamped(mut data: Array3<f32>) -> Result<Self> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Contract("image data contains non-finite values".into()));
        }
        data.mapv_inplace(|v| v.clamp(0.0, 1.0));
        ImageBuffer::new(data)
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        ImageBuffer {
            data: Array3::zeros((height, width, 3)),
        }
    }

    pub fn height(&self) -> usize {
        self.data.dim().0
    }

    pub fn width(&self) -> usize {
        self.data.dim().1
    }

    pub fn data(&self) -> &Array3<f32> {
        &self.data
    }

    /// Copies the h x w window whose top-left corner is (top, left).
    pub fn crop(&self, top: usize, left: usize, h: usize, w: usize) -> Result<ImageBuffer> {
        if top + h > self.height() || left + w > self.width() {
            return Err(Error::Size(format!(
                "crop {h}x{w} at ({top}, {left}) exceeds image {}x{}",
                self.height(),
                self.width()
            )));
        }
        Ok(ImageBuffer {
            data: self.data.slice(s![top..top + h, left..left + w, ..]).to_owned(),
        })
    }

    /// Center crop to exactly h x w.
    pub fn center_crop(&self, h: usize, w: usize) -> Result<ImageBuffer> {
        if h > self.height() || w > self.width() {
            return Err(Error::Size(format!(
                "center crop {h}x{w} exceeds image {}x{}",
                self.height(),
                self.width()
            )));
        }
        let top = (self.height() - h) / 2;
        let left = (self.width() - w) / 2;
        self.crop(top, left, h, w)
    }

    /// Writes the window into `self` at (top, left). Panics on overflow;
    /// callers own the arithmetic.
    pub(crate) fn blit(&mut self, patch: &ImageBuffer, top: usize, left: usize) {
        self.data
            .slice_mut(s![
                top..top + patch.height(),
                left..left + patch.width(),
                ..
            ])
            .assign(patch.data());
    }

    /// Rec. 601 luma, the grayscale plane the texture descriptor works on.
    pub fn luminance(&self) -> Array2<f32> {
        let (h, w, _) = self.data.dim();
        Array2::from_shape_fn((h, w), |(y, x)| {
            0.299 * self.data[[y, x, 0]] + 0.587 * self.data[[y, x, 1]] + 0.114 * self.data[[y, x, 2]]
        })
    }

    /// Channels-first copy for the networks.
    pub fn to_chw(&self) -> Array3<f32> {
        let (h, w, _) = self.data.dim();
        let mut out = Array3::zeros((3, h, w));
        for c in 0..3 {
            out.slice_mut(s![c, .., ..]).assign(&self.data.slice(s![.., .., c]));
        }
        out
    }

    /// Inverse of [`to_chw`](Self::to_chw), clamping float round-off into range.
    pub fn from_chw(chw: &Array3<f32>) -> Result<ImageBuffer> {
        let (c, h, w) = chw.dim();
        if c != 3 {
            return Err(Error::Contract(format!("expected 3 channels, got {c}")));
        }
        let mut data = Array3::zeros((h, w, 3));
        for ch in 0..3 {
            data.slice_mut(s![.., .., ch]).assign(&chw.slice(s![ch, .., ..]));
        }
        ImageBuffer::from_clamped(data)
    }
}

/// Loads a PNG or JPEG as an [`ImageBuffer`]. 8-bit values map to [0, 1]
/// by v/255; grayscale inputs are replicated to 3 channels.
pub fn load_image(path: impl AsRef<Path>) -> Result<ImageBuffer> {
    let path = path.as_ref();
    let reader = ImageReader::open(path).map_err(|e| Error::io(path, e))?;
    let img = reader
        .decode()
        .map_err(|e| Error::ImageFormat {
            path: path.to_owned(),
            source: e,
        })?
        .to_rgb8();
    let (w, h) = img.dimensions();
    let data = Array3::from_shape_fn((h as usize, w as usize, 3), |(y, x, c)| {
        f32::from(img.get_pixel(x as u32, y as u32).0[c]) / 255.0
    });
    ImageBuffer::new(data)
}

/// Saves as 8-bit PNG or JPEG (chosen by extension, PNG by default).
/// Quantization is round(v * 255), so a reload agrees within 1/255.
pub fn save_image(buffer: &ImageBuffer, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let (h, w) = (buffer.height(), buffer.width());
    let mut img = image::RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let px = [
                (buffer.data[[y, x, 0]] * 255.0).round() as u8,
                (buffer.data[[y, x, 1]] * 255.0).round() as u8,
                (buffer.data[[y, x, 2]] * 255.0).round() as u8,
            ];
            img.put_pixel(x as u32, y as u32, image::Rgb(px));
        }
    }
    img.save(path).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::ImageFormat {
            path: path.to_owned(),
            source: other,
        },
    })
}

/// An ordered listing of image files under a root directory.
#[derive(Debug, Clone)]
pub struct DatasetIndex {
    pub root: PathBuf,
    pub entries: Vec<PathBuf>,
}

impl DatasetIndex {
    pub fn count(&self) -> usize {
        self.entries.len()
    }
}

/// Recursively lists files under `root` whose extension (case-insensitive)
/// is in `extensions`, sorted lexicographically by path. An empty listing
/// is not an error here; training rejects it later.
pub fn index_dataset(root: impl AsRef<Path>, extensions: &[&str]) -> Result<DatasetIndex> {
    let root = root.as_ref();
    if !root.is_dir() {
        return Err(Error::Config(format!(
            "dataset root {} is not a directory",
            root.display()
        )));
    }
    let mut entries = Vec::new();
    for entry in walkdir::WalkDir::new(root).follow_links(true) {
        let entry = entry.map_err(|e| {
            let path = e.path().map(Path::to_owned).unwrap_or_else(|| root.to_owned());
            match e.into_io_error() {
                Some(io) => Error::io(path, io),
                None => Error::Config("dataset walk hit a filesystem loop".into()),
            }
        })?;
        if !entry.file_type().is_file() {
            continue;
        }
        let matches = entry
            .path()
            .extension()
            .and_then(|e| e.to_str())
            .map(|e| extensions.iter().any(|want| want.eq_ignore_ascii_case(e)))
            .unwrap_or(false);
        if matches {
            entries.push(entry.into_path());
        }
    }
    entries.sort();
    Ok(DatasetIndex {
        root: root.to_owned(),
        entries,
    })
}

/// Extensions accepted by default for content datasets.
pub const DEFAULT_EXTENSIONS: &[&str] = &["png", "jpg", "jpeg"];

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    fn tmpdir() -> tempfile::TempDir {
        tempfile::tempdir().unwrap()
    }

    #[test]
    fn all_black_png_loads_as_zeros() {
        let dir = tmpdir();
        let path = dir.path().join("black.png");
        save_image(&ImageBuffer::zeros(4, 4), &path).unwrap();
        let loaded = load_image(&path).unwrap();
        assert_eq!(loaded.height(), 4);
        assert_eq!(loaded.width(), 4);
        assert!(loaded.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn all_white_png_loads_as_ones() {
        let dir = tmpdir();
        let path = dir.path().join("white.png");
        let ones = ImageBuffer::new(Array3::ones((4, 4, 3))).unwrap();
        save_image(&ones, &path).unwrap();
        let loaded = load_image(&path).unwrap();
        assert!(loaded.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn gray_128_maps_to_128_over_255() {
        let dir = tmpdir();
        let path = dir.path().join("gray.png");
        let mut img = image::RgbImage::new(2, 2);
        for p in img.pixels_mut() {
            *p = image::Rgb([128, 128, 128]);
        }
        img.save(&path).unwrap();
        let loaded = load_image(&path).unwrap();
        let expect = 128.0 / 255.0;
        assert!(loaded.data().iter().all(|&v| (v - expect).abs() < 1e-6));
    }

    #[test]
    fn grayscale_file_is_replicated_to_three_channels() {
        let dir = tmpdir();
        let path = dir.path().join("gray8.png");
        let img = image::GrayImage::from_fn(3, 3, |x, y| image::Luma([(x * 40 + y) as u8]));
        img.save(&path).unwrap();
        let loaded = load_image(&path).unwrap();
        for y in 0..3 {
            for x in 0..3 {
                let v = loaded.data()[[y, x, 0]];
                assert_eq!(v, loaded.data()[[y, x, 1]]);
                assert_eq!(v, loaded.data()[[y, x, 2]]);
            }
        }
    }

    #[test]
    fn round_trip_error_is_at_most_one_quantization_step() {
        use rand::{RngExt, SeedableRng};
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(11);
        let data = Array3::from_shape_fn((9, 7, 3), |_| rng.random::<f32>());
        let buf = ImageBuffer::new(data.clone()).unwrap();

        let dir = tmpdir();
        let path = dir.path().join("rand.png");
        save_image(&buf, &path).unwrap();
        let loaded = load_image(&path).unwrap();

        // quantization oracle: the stored value is exactly round(v*255)/255
        for (a, b) in data.iter().zip(loaded.data().iter()) {
            let oracle = (a * 255.0).round() / 255.0;
            assert!((b - oracle).abs() < 1e-6, "stored {b} vs oracle {oracle}");
            assert!((a - b).abs() <= 1.0 / 255.0 + 1e-6);
        }
    }

    #[test]
    fn undecodable_content_is_a_format_error() {
        let dir = tmpdir();
        let path = dir.path().join("junk.png");
        std::fs::write(&path, b"not a png at all").unwrap();
        match load_image(&path) {
            Err(Error::ImageFormat { .. }) => {}
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn missing_file_is_an_io_error() {
        match load_image("/no/such/file.png") {
            Err(Error::Io { .. }) => {}
            other => panic!("expected i/o error, got {other:?}"),
        }
    }

    #[test]
    fn rejects_out_of_range_and_non_finite() {
        let mut data = Array3::zeros((2, 2, 3));
        data[[0, 0, 0]] = 1.5;
        assert!(ImageBuffer::new(data).is_err());

        let mut data = Array3::zeros((2, 2, 3));
        data[[1, 1, 2]] = f32::NAN;
        assert!(ImageBuffer::new(data).is_err());
    }

    #[test]
    fn index_is_sorted_and_filters_extensions() {
        let dir = tmpdir();
        save_image(&ImageBuffer::zeros(2, 2), dir.path().join("b.png")).unwrap();
        save_image(&ImageBuffer::zeros(2, 2), dir.path().join("a.png")).unwrap();
        std::fs::write(dir.path().join("a.txt"), "text").unwrap();

        let idx = index_dataset(dir.path(), &["png"]).unwrap();
        assert_eq!(idx.count(), 2);
        assert!(idx.entries[0].ends_with("a.png"));
        assert!(idx.entries[1].ends_with("b.png"));
    }

    #[test]
    fn empty_dir_indexes_to_zero_entries() {
        let dir = tmpdir();
        let idx = index_dataset(dir.path(), DEFAULT_EXTENSIONS).unwrap();
        assert_eq!(idx.count(), 0);
    }

    #[test]
    fn index_recurses_into_subdirectories() {
        let dir = tmpdir();
        std::fs::create_dir(dir.path().join("sub")).unwrap();
        save_image(&ImageBuffer::zeros(2, 2), dir.path().join("sub/c.png")).unwrap();
        let idx = index_dataset(dir.path(), &["png"]).unwrap();
        assert_eq!(idx.count(), 1);
    }

    #[test]
    fn center_crop_takes_the_middle_window() {
        let data = Array3::from_shape_fn((6, 8, 3), |(y, x, _)| (y * 8 + x) as f32 / 48.0);
        let buf = ImageBuffer::new(data).unwrap();
        let cropped = buf.center_crop(2, 2).unwrap();
        // rows 2..4, cols 3..5
        assert_eq!(cropped.data()[[0, 0, 0]], (2 * 8 + 3) as f32 / 48.0);
        assert_eq!(cropped.data()[[1, 1, 0]], (3 * 8 + 4) as f32 / 48.0);
    }

    #[test]
    fn chw_round_trip_is_exact() {
        use rand::{RngExt, SeedableRng};
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(3);
        let data = Array3::from_shape_fn((5, 4, 3), |_| rng.random::<f32>());
        let buf = ImageBuffer::new(data).unwrap();
        let back = ImageBuffer::from_chw(&buf.to_chw()).unwrap();
        assert_eq!(buf, back);
    }
}
