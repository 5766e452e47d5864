//! Procedural test images: smooth gradients with soft-edged ellipses, and a
//! vertical step edge.

use rand::Rng;

use crate::image::ImageTensor;
use crate::rng::stream;

const STREAM_SCENE: u64 = 20;

fn color<R: Rng>(rng: &mut R) -> [f32; 3] {
    [0; 3].map(|_| rng.random_range(-0.85f32..0.85))
}

/// A `size`×`size` scene determined entirely by `seed`.
pub fn scene(size: usize, seed: u64) -> ImageTensor {
    let mut rng = stream(seed, STREAM_SCENE);
    let (c0, c1) = (color(&mut rng), color(&mut rng));
    let angle = rng.random_range(0.0f32..std::f32::consts::TAU);
    let (dx, dy) = (angle.cos(), angle.sin());
    let s = size as f32;
    let blobs: Vec<([f32; 3], f32, f32, f32, f32)> = (0..rng.random_range(2..=4))
        .map(|_| {
            let col = color(&mut rng);
            let cx = rng.random_range(0.1..0.9) * s;
            let cy = rng.random_range(0.1..0.9) * s;
            let rx = rng.random_range(0.12..0.35) * s;
            let ry = rng.random_range(0.12..0.35) * s;
            (col, cx, cy, rx, ry)
        })
        .collect();
    ImageTensor::from_fn(size, size, |y, x| {
        let (fx, fy) = (x as f32 + 0.5, y as f32 + 0.5);
        let t = (((fx / s - 0.5) * dx + (fy / s - 0.5) * dy) + 0.5).clamp(0.0, 1.0);
        let mut px = [0; 3].map(|_| 0.0f32);
        for (c, p) in px.iter_mut().enumerate() {
            *p = c0[c] + (c1[c] - c0[c]) * t;
        }
        for &(col, cx, cy, rx, ry) in &blobs {
            let d = (((fx - cx) / rx).powi(2) + ((fy - cy) / ry).powi(2)).sqrt();
            // soft edge roughly one pixel wide
            let alpha = 1.0 / (1.0 + ((d - 1.0) * rx.min(ry)).exp());
            for c in 0..3 {
                px[c] += (col[c] - px[c]) * alpha;
            }
        }
        px
    })
}

/// Left half black, right half white.
pub fn step_edge(size: usize) -> ImageTensor {
    ImageTensor::from_fn(size, size, |_, x| if x < size / 2 { [-1.0; 3] } else { [1.0; 3] })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scenes_are_seeded_and_in_range() {
        let a = scene(32, 5);
        assert_eq!(a, scene(32, 5));
        assert_ne!(a, scene(32, 6));
        assert!(a.data().iter().all(|v| (-1.0..=1.0).contains(v)));
    }
}
