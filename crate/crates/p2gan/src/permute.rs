//! Patch permutation: n x n crops of the style image at random positions,
//! assembled row-major into a T x T mosaic. A stream of such mosaics is the
//! training set a single style image cannot provide by itself.

use rand::{Rng, RngExt, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::error::{Error, Result};
use crate::imageio::ImageBuffer;

/// Parameters of the permutation: patch side n, grid side T, stream length
/// hint K and the RNG seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PermutationSpec {
    pub n: usize,
    pub t: usize,
    pub k: usize,
    pub seed: u64,
}

impl PermutationSpec {
    pub fn validate(&self, style: &ImageBuffer) -> Result<()> {
        if self.n < 1 || self.t < 1 || self.k < 1 {
            return Err(Error::Config(format!(
                "permutation spec requires n, T, K >= 1 (got n={}, T={}, K={})",
                self.n, self.t, self.k
            )));
        }
        if self.n > style.height() || self.n > style.width() {
            return Err(Error::Config(format!(
                "patch size {} exceeds style image {}x{}",
                self.n,
                style.height(),
                style.width()
            )));
        }
        Ok(())
    }

    /// RNG for stream element `index`. Every element gets its own ChaCha
    /// stream so elements are reproducible independently of one another.
    pub fn rng(&self, index: u64) -> ChaCha12Rng {
        let mut rng = ChaCha12Rng::seed_from_u64(self.seed);
        rng.set_stream(index);
        rng
    }
}

/// A mosaic together with the crop origin of each of its T^2 blocks.
#[derive(Debug, Clone)]
pub struct PermutedImage {
    pub buffer: ImageBuffer,
    /// Crop origins (row, col) in the style image, row-major block order.
    pub sources: Vec<(usize, usize)>,
}

/// Maps a uniform draw r in [0, 1] to an integer crop origin along one
/// axis: floor((dim - n) * r), clamped so r = 1 lands on dim - n.
fn origin_from_r(r: f64, dim: usize, n: usize) -> usize {
    let span = (dim - n) as f64;
    ((span * r).floor() as usize).min(dim - n)
}

/// Crops one n x n patch at a random position. Returns the patch and its
/// (row, col) origin. Draws the horizontal coordinate first, then the
/// vertical, each from an independent uniform r in [0, 1].
pub fn sample_patch(
    style: &ImageBuffer,
    n: usize,
    rng: &mut impl Rng,
) -> Result<(ImageBuffer, (usize, usize))> {
    if n < 1 || n > style.height() || n > style.width() {
        return Err(Error::Config(format!(
            "patch size {} invalid for style image {}x{}",
            n,
            style.height(),
            style.width()
        )));
    }
    let r_u: f64 = rng.random();
    let r_v: f64 = rng.random();
    let col = origin_from_r(r_u, style.width(), n);
    let row = origin_from_r(r_v, style.height(), n);
    let patch = style.crop(row, col, n, n)?;
    Ok((patch, (row, col)))
}

/// Assembles one mosaic of T^2 random patches, row-major.
pub fn permute(
    style: &ImageBuffer,
    spec: &PermutationSpec,
    rng: &mut impl Rng,
) -> Result<PermutedImage> {
    spec.validate(style)?;
    let side = spec.n * spec.t;
    let mut buffer = ImageBuffer::zeros(side, side);
    let mut sources = Vec::with_capacity(spec.t * spec.t);
    for block_row in 0..spec.t {
        for block_col in 0..spec.t {
            let (patch, origin) = sample_patch(style, spec.n, rng)?;
            buffer.blit(&patch, block_row * spec.n, block_col * spec.n);
            sources.push(origin);
        }
    }
    Ok(PermutedImage { buffer, sources })
}

/// Lazy stream of K mosaics. Element i is generated from its own RNG
/// stream, so `stream.nth(i)` equals the i-th element of a full iteration.
pub struct PermutationStream<'a> {
    style: &'a ImageBuffer,
    spec: PermutationSpec,
    next: u64,
}

impl<'a> PermutationStream<'a> {
    /// Random-access view of the stream; `index` may exceed K, which lets
    /// the trainer draw one fresh mosaic per iteration.
    pub fn element(&self, index: u64) -> PermutedImage {
        let mut rng = self.spec.rng(index);
        permute(self.style, &self.spec, &mut rng).expect("spec validated at stream creation")
    }
}

impl<'a> Iterator for PermutationStream<'a> {
    type Item = PermutedImage;

    fn next(&mut self) -> Option<PermutedImage> {
        if self.next >= self.spec.k as u64 {
            return None;
        }
        let item = self.element(self.next);
        self.next += 1;
        Some(item)
    }
}

/// Creates the K-element mosaic stream. Deterministic in (style, spec).
pub fn permutation_stream<'a>(
    style: &'a ImageBuffer,
    spec: &PermutationSpec,
) -> Result<PermutationStream<'a>> {
    spec.validate(style)?;
    Ok(PermutationStream {
        style,
        spec: *spec,
        next: 0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;
    use rand::SeedableRng;

    fn ramp_image(h: usize, w: usize) -> ImageBuffer {
        let denom = (h * w * 3) as f32;
        ImageBuffer::new(Array3::from_shape_fn((h, w, 3), |(y, x, c)| {
            (y * w * 3 + x * 3 + c) as f32 / denom
        }))
        .unwrap()
    }

    /// Fixed-sequence "rng" for pinning the Eq.-style origin arithmetic.
    struct FixedDraws {
        values: Vec<f64>,
        at: usize,
    }

    impl FixedDraws {
        fn new(values: &[f64]) -> Self {
            FixedDraws {
                values: values.to_vec(),
                at: 0,
            }
        }
    }

    impl rand::TryRng for FixedDraws {
        type Error = std::convert::Infallible;

        fn try_next_u32(&mut self) -> std::result::Result<u32, Self::Error> {
            Ok(self.try_next_u64()? as u32)
        }
        fn try_next_u64(&mut self) -> std::result::Result<u64, Self::Error> {
            // map the prepared f64 in [0,1] onto the 53-bit mantissa layout
            // rand uses for f64 sampling: v = (x >> 11) / 2^53
            let v = self.values[self.at % self.values.len()];
            self.at += 1;
            let scaled = (v * (1u64 << 53) as f64) as u64;
            Ok(scaled.min((1u64 << 53) - 1) << 11)
        }
        fn try_fill_bytes(&mut self, dest: &mut [u8]) -> std::result::Result<(), Self::Error> {
            for b in dest {
                *b = 0;
            }
            Ok(())
        }
    }

    #[test]
    fn origin_zero_draw_gives_top_left() {
        let style = ramp_image(12, 10);
        let mut rng = FixedDraws::new(&[0.0, 0.0]);
        let (patch, origin) = sample_patch(&style, 4, &mut rng).unwrap();
        assert_eq!(origin, (0, 0));
        assert_eq!(patch.data(), &style.crop(0, 0, 4, 4).unwrap().data().view());
    }

    #[test]
    fn origin_unit_draw_gives_bottom_right() {
        // r = 1 is the formula's edge; the clamp keeps the crop in bounds
        assert_eq!(origin_from_r(1.0, 12, 4), 8);
        assert_eq!(origin_from_r(1.0, 10, 4), 6);
    }

    #[test]
    fn origin_half_draw_matches_floor_arithmetic() {
        // 25x25 image, n = 9: floor((25-9) * 0.5) = 8
        assert_eq!(origin_from_r(0.5, 25, 9), 8);
    }

    #[test]
    fn sample_patch_copies_the_source_region() {
        let style = ramp_image(25, 25);
        let mut rng = FixedDraws::new(&[0.5, 0.5]);
        let (patch, origin) = sample_patch(&style, 9, &mut rng).unwrap();
        assert_eq!(origin, (8, 8));
        assert_eq!(patch.data(), &style.crop(8, 8, 9, 9).unwrap().data().view());
    }

    #[test]
    fn patch_larger_than_style_is_a_config_error() {
        let style = ramp_image(8, 8);
        let mut rng = ChaCha12Rng::seed_from_u64(0);
        assert!(sample_patch(&style, 9, &mut rng).is_err());
    }

    #[test]
    fn mosaic_size_is_n_t_by_n_t() {
        let style = ramp_image(30, 40);
        let spec = PermutationSpec { n: 9, t: 24, k: 1, seed: 5 };
        let mut rng = spec.rng(0);
        let mosaic = permute(&style, &spec, &mut rng).unwrap();
        assert_eq!(mosaic.buffer.height(), 216);
        assert_eq!(mosaic.buffer.width(), 216);
        assert_eq!(mosaic.sources.len(), 24 * 24);
    }

    #[test]
    fn t_equals_one_is_a_single_crop() {
        let style = ramp_image(20, 20);
        let spec = PermutationSpec { n: 7, t: 1, k: 1, seed: 9 };
        let mosaic = permute(&style, &spec, &mut spec.rng(0)).unwrap();
        let (row, col) = mosaic.sources[0];
        assert_eq!(mosaic.buffer.data(), style.crop(row, col, 7, 7).unwrap().data());
    }

    #[test]
    fn style_exactly_n_tiles_itself() {
        let style = ramp_image(6, 6);
        let spec = PermutationSpec { n: 6, t: 3, k: 1, seed: 2 };
        let mosaic = permute(&style, &spec, &mut spec.rng(0)).unwrap();
        assert_eq!(mosaic.buffer.height(), 18);
        for (i, &(r, c)) in mosaic.sources.iter().enumerate() {
            assert_eq!((r, c), (0, 0), "block {i} should collapse to origin 0");
        }
        for br in 0..3 {
            for bc in 0..3 {
                let block = mosaic.buffer.crop(br * 6, bc * 6, 6, 6).unwrap();
                assert_eq!(block.data(), style.data());
            }
        }
    }

    #[test]
    fn every_block_matches_its_recorded_source() {
        let style = ramp_image(33, 47);
        let spec = PermutationSpec { n: 5, t: 4, k: 1, seed: 77 };
        let mosaic = permute(&style, &spec, &mut spec.rng(0)).unwrap();
        for br in 0..4 {
            for bc in 0..4 {
                let (sr, sc) = mosaic.sources[br * 4 + bc];
                assert!(sr <= 33 - 5 && sc <= 47 - 5);
                let block = mosaic.buffer.crop(br * 5, bc * 5, 5, 5).unwrap();
                let src = style.crop(sr, sc, 5, 5).unwrap();
                assert_eq!(block.data(), src.data(), "block ({br},{bc})");
            }
        }
    }

    #[test]
    fn stream_is_deterministic_and_indexable() {
        let style = ramp_image(21, 19);
        let spec = PermutationSpec { n: 4, t: 3, k: 3, seed: 123 };
        let first: Vec<_> = permutation_stream(&style, &spec).unwrap().collect();
        let second: Vec<_> = permutation_stream(&style, &spec).unwrap().collect();
        assert_eq!(first.len(), 3);
        for (a, b) in first.iter().zip(&second) {
            assert_eq!(a.sources, b.sources);
            assert_eq!(a.buffer.data(), b.buffer.data());
        }
        // random access agrees with iteration order
        let stream = permutation_stream(&style, &spec).unwrap();
        for (i, item) in first.iter().enumerate() {
            assert_eq!(stream.element(i as u64).sources, item.sources);
        }
    }

    #[test]
    fn different_seeds_give_different_mosaics() {
        let style = ramp_image(40, 40);
        let a = PermutationSpec { n: 5, t: 4, k: 1, seed: 1 };
        let b = PermutationSpec { n: 5, t: 4, k: 1, seed: 2 };
        let ma = permute(&style, &a, &mut a.rng(0)).unwrap();
        let mb = permute(&style, &b, &mut b.rng(0)).unwrap();
        assert_ne!(ma.sources, mb.sources);
    }

    #[test]
    fn singleton_stream_equals_direct_permute_with_stream_zero_rng() {
        let style = ramp_image(18, 18);
        let spec = PermutationSpec { n: 4, t: 2, k: 1, seed: 99 };
        let from_stream: Vec<_> = permutation_stream(&style, &spec).unwrap().collect();
        let direct = permute(&style, &spec, &mut spec.rng(0)).unwrap();
        assert_eq!(from_stream.len(), 1);
        assert_eq!(from_stream[0].sources, direct.sources);
        assert_eq!(from_stream[0].buffer.data(), direct.buffer.data());
    }
}
