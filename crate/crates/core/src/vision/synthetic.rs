//! Deterministic synthetic images for fixtures, demos, and tests.

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn solid(width: u32, height: u32, color: [u8; 3]) -> RgbImage {
    RgbImage::from_pixel(width, height, Rgb(color))
}

/// A base colour with seeded per-pixel jitter.
pub fn noisy_color(width: u32, height: u32, color: [u8; 3], jitter: u8, seed: u64) -> RgbImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    RgbImage::from_fn(width, height, |_, _| {
        let mut px = [0u8; 3];
        for (c, base) in px.iter_mut().zip(color) {
            let d: i16 = rng.gen_range(-(jitter as i16)..=jitter as i16);
            *c = (base as i16 + d).clamp(0, 255) as u8;
        }
        Rgb(px)
    })
}

/// Uniform random noise.
pub fn noise(width: u32, height: u32, seed: u64) -> RgbImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    RgbImage::from_fn(width, height, |_, _| Rgb([rng.gen(), rng.gen(), rng.gen()]))
}

/// Black/white checkerboard whose squares are `square` pixels wide, starting
/// with a black square at the origin.
pub fn checkerboard(width: u32, height: u32, square: u32) -> RgbImage {
    RgbImage::from_fn(width, height, |x, y| {
        if ((x / square) + (y / square)) % 2 == 0 {
            Rgb([0, 0, 0])
        } else {
            Rgb([255, 255, 255])
        }
    })
}

/// A large textured scene of random axis-aligned rectangles and discs over a
/// smooth gradient, rich in corners for keypoint detection.
pub fn scene(width: u32, height: u32, seed: u64) -> RgbImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut img = RgbImage::from_fn(width, height, |x, y| {
        let r = (40.0 + 60.0 * x as f64 / width as f64) as u8;
        let g = (50.0 + 50.0 * y as f64 / height as f64) as u8;
        Rgb([r, g, 90])
    });
    let shapes = (width as u64 * height as u64 / 900).max(12);
    for _ in 0..shapes {
        let color = Rgb([rng.gen(), rng.gen(), rng.gen()]);
        let cx = rng.gen_range(0..width) as i64;
        let cy = rng.gen_range(0..height) as i64;
        let size = rng.gen_range(4..18) as i64;
        let disc = rng.gen_bool(0.3);
        for y in (cy - size).max(0)..(cy + size).min(height as i64) {
            for x in (cx - size).max(0)..(cx + size).min(width as i64) {
                let inside = if disc {
                    (x - cx).pow(2) + (y - cy).pow(2) <= size * size
                } else {
                    (x - cx).abs() <= size * 2 / 3 || (y - cy).abs() <= size / 3
                };
                if inside {
                    img.put_pixel(x as u32, y as u32, color);
                }
            }
        }
    }
    img
}

/// Copies the `width x height` window at `(x, y)`.
pub fn window(img: &RgbImage, x: u32, y: u32, width: u32, height: u32) -> RgbImage {
    image::imageops::crop_imm(img, x, y, width, height).to_image()
}

/// A group photo stand-in: skin-toned rectangles on a dark background.
pub fn group_photo(width: u32, height: u32, faces: &[(u32, u32, u32, u32)]) -> RgbImage {
    let mut img = solid(width, height, [30, 60, 40]);
    for &(x, y, w, h) in faces {
        for yy in y..(y + h).min(height) {
            for xx in x..(x + w).min(width) {
                img.put_pixel(xx, yy, Rgb([210, 150, 120]));
            }
        }
    }
    img
}
