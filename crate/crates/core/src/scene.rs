//! Procedural single-person scenes.
//!
//! Used for the desk-scale demo dataset and as the default clean corpus behind
//! the BRISQUE surrogate statistics.

use image::RgbImage;
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::geometry::BBox;

#[derive(Debug, Clone)]
pub struct Scene {
    pub image: RgbImage,
    pub person: BBox,
    pub caption: String,
}

fn lerp(a: f64, b: f64, t: f64) -> f64 {
    a + (b - a) * t
}

/// Smooth value noise: a coarse random grid upsampled bilinearly.
fn value_noise(rng: &mut ChaCha8Rng, w: u32, h: u32, cells: u32) -> Vec<f64> {
    let gw = cells + 2;
    let gh = cells + 2;
    let grid: Vec<f64> = (0..gw * gh).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut out = Vec::with_capacity((w * h) as usize);
    for y in 0..h {
        for x in 0..w {
            let fx = f64::from(x) / f64::from(w) * f64::from(cells);
            let fy = f64::from(y) / f64::from(h) * f64::from(cells);
            let (ix, iy) = (fx.floor() as u32, fy.floor() as u32);
            let (tx, ty) = (fx - f64::from(ix), fy - f64::from(iy));
            let g = |gx: u32, gy: u32| grid[(gy * gw + gx) as usize];
            let top = lerp(g(ix, iy), g(ix + 1, iy), tx);
            let bottom = lerp(g(ix, iy + 1), g(ix + 1, iy + 1), tx);
            out.push(lerp(top, bottom, ty));
        }
    }
    out
}

pub fn procedural_scene(seed: u64, width: u32, height: u32) -> Scene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sky: [f64; 3] = [rng.random_range(90.0..200.0), rng.random_range(120.0..210.0), rng.random_range(150.0..240.0)];
    let ground: [f64; 3] = [rng.random_range(40.0..140.0), rng.random_range(60.0..150.0), rng.random_range(20.0..110.0)];
    let horizon = rng.random_range(0.3..0.7) * f64::from(height);
    let texture = value_noise(&mut rng, width, height, 6);
    let fine = value_noise(&mut rng, width, height, 17);

    // soft blobs (trees, rocks, clouds)
    let blobs: Vec<(f64, f64, f64, [f64; 3])> = (0..rng.random_range(2..6))
        .map(|_| {
            (
                rng.random_range(0.0..f64::from(width)),
                rng.random_range(0.0..f64::from(height)),
                rng.random_range(0.06..0.2) * f64::from(width.min(height)),
                [rng.random_range(20.0..230.0), rng.random_range(20.0..230.0), rng.random_range(20.0..230.0)],
            )
        })
        .collect();

    // person: head disc over a body rectangle
    let area: f64 = rng.random_range(0.08..0.45);
    let aspect: f64 = rng.random_range(1.6..2.6); // height / width in relative terms scaled by image aspect
    let bw = (area / aspect).sqrt().min(0.9);
    let bh = (area / bw).min(0.95);
    let cx = rng.random_range(bw / 2.0..=1.0 - bw / 2.0);
    let cy = rng.random_range(bh / 2.0..=1.0 - bh / 2.0);
    let person = BBox { cx, cy, w: bw, h: bh };
    let shirt_names = ["red", "black", "yellow"];
    let shirt = *shirt_names.choose(&mut rng).expect("non-empty");
    let shirt_rgb = match shirt {
        "red" => [200.0, 35.0, 30.0],
        "black" => [25.0, 25.0, 30.0],
        _ => [225.0, 205.0, 40.0],
    };
    let skin = [rng.random_range(120.0..230.0), rng.random_range(90.0..190.0), rng.random_range(70.0..160.0)];
    let who = *["man", "woman", "child"].choose(&mut rng).expect("non-empty");
    let where_ = *["on a street", "near a tree", "in a park", "on a beach"].choose(&mut rng).expect("non-empty");
    let caption = format!("a {who} in a {shirt} shirt {where_}");

    let (x0, y0, x1, y1) = person.corners();
    let (px0, px1) = (x0 * f64::from(width), x1 * f64::from(width));
    let (py0, py1) = (y0 * f64::from(height), y1 * f64::from(height));
    let head_r = (px1 - px0).min(py1 - py0) * 0.28;
    let head_c = ((px0 + px1) / 2.0, py0 + head_r);
    let dither = Normal::new(0.0, 1.5).expect("valid sigma");

    let image = RgbImage::from_fn(width, height, |x, y| {
        let (fx, fy) = (f64::from(x) + 0.5, f64::from(y) + 0.5);
        let i = (y * width + x) as usize;
        let t = ((fy - horizon) / 3.0).tanh() * 0.5 + 0.5;
        let mut c = [0.0; 3];
        for k in 0..3 {
            c[k] = lerp(sky[k], ground[k], t) + 28.0 * texture[i] + 9.0 * fine[i];
        }
        for (bx, by, br, col) in &blobs {
            let d2 = ((fx - bx).powi(2) + (fy - by).powi(2)) / (br * br);
            let a = (-d2).exp() * 0.85;
            for k in 0..3 {
                c[k] = lerp(c[k], col[k], a);
            }
        }
        let in_head = (fx - head_c.0).powi(2) + (fy - head_c.1).powi(2) <= head_r * head_r;
        let body_margin = (px1 - px0) * 0.12;
        let in_body = fy >= head_c.1 + head_r * 0.9 && fy <= py1 && fx >= px0 + body_margin && fx <= px1 - body_margin;
        let in_arms = fy >= head_c.1 + head_r * 1.1 && fy <= (py0 + py1) / 2.0 + head_r && fx >= px0 && fx <= px1;
        if in_head {
            c = skin;
        } else if in_body || in_arms {
            c = shirt_rgb;
            c[0] += 10.0 * fine[i];
            c[1] += 10.0 * fine[i];
        }
        let mut px = [0u8; 3];
        for k in 0..3 {
            px[k] = (c[k] + dither.sample(&mut rng)).round().clamp(0.0, 255.0) as u8;
        }
        image::Rgb(px)
    });
    Scene { image, person, caption }
}

/// Adds i.i.d. Gaussian noise to every channel.
pub fn add_gaussian_noise(img: &RgbImage, sigma: f64, seed: u64) -> RgbImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = Normal::new(0.0, sigma).expect("valid sigma");
    let mut out = img.clone();
    for p in out.pixels_mut() {
        for c in p.0.iter_mut() {
            *c = (f64::from(*c) + n.sample(&mut rng)).round().clamp(0.0, 255.0) as u8;
        }
    }
    out
}
