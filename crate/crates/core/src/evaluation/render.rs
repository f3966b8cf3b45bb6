//! Frame rendering: orthographic front view (x right, y up) of joints and bones.

use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};

use crate::dataset::{SkeletonSequence, SkeletonTopology};
use crate::error::{Error, Result};

/// Axis-aligned drawing window in meters, shared by every image of a comparison.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Bounds {
    pub x: (f64, f64),
    pub y: (f64, f64),
}

impl Bounds {
    /// Smallest square window holding every joint of `seqs` with a 10% margin.
    pub fn covering(seqs: &[&SkeletonSequence]) -> Self {
        let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
        for s in seqs {
            for p in s.data().chunks(3) {
                x0 = x0.min(p[0]);
                x1 = x1.max(p[0]);
                y0 = y0.min(p[1]);
                y1 = y1.max(p[1]);
            }
        }
        if !x0.is_finite() {
            return Self { x: (-1.0, 1.0), y: (-1.0, 1.0) };
        }
        let half = ((x1 - x0).max(y1 - y0) / 2.0).max(1e-3) * 1.1;
        let (cx, cy) = ((x0 + x1) / 2.0, (y0 + y1) / 2.0);
        Self {
            x: (cx - half, cx + half),
            y: (cy - half, cy + half),
        }
    }

    fn to_pixel(&self, x: f64, y: f64, size: u32) -> (i64, i64) {
        let s = (size - 1) as f64;
        let u = (x - self.x.0) / (self.x.1 - self.x.0) * s;
        let v = (self.y.1 - y) / (self.y.1 - self.y.0) * s;
        (u.round() as i64, v.round() as i64)
    }
}

const BONE: Rgb<u8> = Rgb([40, 90, 200]);
const JOINT: Rgb<u8> = Rgb([200, 40, 40]);

fn put(img: &mut RgbImage, x: i64, y: i64, c: Rgb<u8>) {
    if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
        img.put_pixel(x as u32, y as u32, c);
    }
}

fn line(img: &mut RgbImage, (x0, y0): (i64, i64), (x1, y1): (i64, i64), c: Rgb<u8>) {
    let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
    let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
    let (mut x, mut y, mut err) = (x0, y0, dx + dy);
    loop {
        put(img, x, y, c);
        if x == x1 && y == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
    }
}

/// Draws one frame into a `size x size` image.
pub fn render_frame(
    seq: &SkeletonSequence,
    topology: &SkeletonTopology,
    frame: usize,
    bounds: &Bounds,
    size: u32,
) -> Result<RgbImage> {
    if frame >= seq.frames() {
        return Err(Error::IndexOutOfRange {
            index: frame,
            len: seq.frames(),
        });
    }
    let mut img = RgbImage::from_pixel(size, size, Rgb([255, 255, 255]));
    let px = |j: usize| {
        let p = seq.position(frame, j);
        bounds.to_pixel(p[0], p[1], size)
    };
    for (a, b) in topology.bones() {
        line(&mut img, px(a), px(b), BONE);
    }
    for j in 0..seq.joints() {
        let (x, y) = px(j);
        for (dx, dy) in (-1..=1).flat_map(|dx| (-1..=1).map(move |dy| (dx, dy))) {
            put(&mut img, x + dx, y + dy, JOINT);
        }
    }
    Ok(img)
}

/// Writes `{stem}_f{index:03}.png` for each requested frame into `out_dir`.
pub fn render_frames(
    seq: &SkeletonSequence,
    topology: &SkeletonTopology,
    frames: &[usize],
    bounds: &Bounds,
    out_dir: &Path,
    stem: &str,
) -> Result<Vec<PathBuf>> {
    if let Some(&bad) = frames.iter().find(|&&f| f >= seq.frames()) {
        return Err(Error::IndexOutOfRange {
            index: bad,
            len: seq.frames(),
        });
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    frames
        .iter()
        .map(|&f| {
            let img = render_frame(seq, topology, f, bounds, 256)?;
            let path = out_dir.join(format!("{stem}_f{f:03}.png"));
            img.save(&path)
                .map_err(|e| Error::io(&path, std::io::Error::other(e.to_string())))?;
            Ok(path)
        })
        .collect()
}

/// `count` frame indices spread evenly over a sequence of `frames` frames.
pub fn evenly_spaced(frames: usize, count: usize) -> Vec<usize> {
    if frames == 0 || count == 0 {
        return Vec::new();
    }
    if count == 1 {
        return vec![0];
    }
    (0..count).map(|i| i * (frames - 1) / (count - 1)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_synthetic, load_raw, SequenceMeta};

    fn sample() -> (SkeletonSequence, SkeletonTopology) {
        let topo = SkeletonTopology::kinect_v2();
        let idx = generate_synthetic(2, 2, 1, 3).unwrap();
        (load_raw(&idx.entries[0], &topo).unwrap(), topo)
    }

    #[test]
    fn writes_one_image_per_frame_deterministically() {
        let (s, topo) = sample();
        let dir = tempfile::tempdir().unwrap();
        let b = Bounds::covering(&[&s]);
        let a = render_frames(&s, &topo, &[0, 10, 20, 30], &b, dir.path(), "a").unwrap();
        let c = render_frames(&s, &topo, &[0, 10, 20, 30], &b, dir.path(), "b").unwrap();
        assert_eq!(a.len(), 4);
        for (x, y) in a.iter().zip(&c) {
            assert_eq!(std::fs::read(x).unwrap(), std::fs::read(y).unwrap());
        }
        assert!(matches!(
            render_frames(&s, &topo, &[s.frames()], &b, dir.path(), "c"),
            Err(Error::IndexOutOfRange { .. })
        ));
    }

    #[test]
    fn static_sequence_gives_identical_frames() {
        let (s, topo) = sample();
        let first = s.frame(0).to_vec();
        let data: Vec<f64> = (0..5).flat_map(|_| first.iter().copied()).collect();
        let still = SkeletonSequence::new(s.joints(), data, SequenceMeta::default()).unwrap();
        let b = Bounds::covering(&[&still]);
        let f0 = render_frame(&still, &topo, 0, &b, 64).unwrap();
        let f4 = render_frame(&still, &topo, 4, &b, 64).unwrap();
        assert_eq!(f0, f4);
    }

    #[test]
    fn spacing_covers_both_ends() {
        assert_eq!(evenly_spaced(75, 4), vec![0, 24, 49, 74]);
        assert!(evenly_spaced(0, 4).is_empty());
    }
}
