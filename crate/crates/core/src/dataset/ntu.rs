//! NTU RGB+D `.skeleton` text files.
//!
//! Layout: the frame count, then per frame the body count, then per body one
//! metadata line of 10 values, the joint count, and one line of 12 values per
//! joint (`x y z depthX depthY colorX colorY orientW orientX orientY orientZ
//! trackingState`). Only `x y z` are kept.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

use super::sequence::{SequenceMeta, SkeletonSequence};
use super::topology::SkeletonTopology;

struct Tokens<'a> {
    inner: std::str::SplitAsciiWhitespace<'a>,
    path: &'a Path,
}

impl<'a> Tokens<'a> {
    fn next_raw(&mut self, what: &str) -> Result<&'a str> {
        self.inner.next().ok_or_else(|| Error::MalformedFile {
            path: self.path.to_path_buf(),
            reason: format!("unexpected end of file while reading {what}"),
        })
    }

    fn next_usize(&mut self, what: &str) -> Result<usize> {
        let tok = self.next_raw(what)?;
        tok.parse().map_err(|_| Error::MalformedFile {
            path: self.path.to_path_buf(),
            reason: format!("expected integer {what}, found `{tok}`"),
        })
    }

    fn next_f64(&mut self, what: &str) -> Result<f64> {
        let tok = self.next_raw(what)?;
        tok.parse().map_err(|_| Error::MalformedFile {
            path: self.path.to_path_buf(),
            reason: format!("expected number {what}, found `{tok}`"),
        })
    }

    fn skip(&mut self, n: usize, what: &str) -> Result<()> {
        for _ in 0..n {
            self.next_raw(what)?;
        }
        Ok(())
    }
}

const BODY_FIELDS: usize = 10;
const JOINT_FIELDS: usize = 12;

/// Parses NTU text content. Frames without a body are filled with NaN so the
/// denoiser can repair or reject them.
pub fn parse_ntu_str(text: &str, path: &Path, topology: &SkeletonTopology) -> Result<SkeletonSequence> {
    let meta = SequenceMeta::parse_name(&path.to_string_lossy()).ok_or_else(|| Error::MalformedFile {
        path: path.to_path_buf(),
        reason: "file name does not follow SsssCcccPpppRrrrAaaa".into(),
    })?;
    let joints = topology.joints();
    let mut tok = Tokens {
        inner: text.split_ascii_whitespace(),
        path,
    };
    let frames = tok.next_usize("frame count")?;
    if frames == 0 {
        return Err(Error::MalformedFile {
            path: path.to_path_buf(),
            reason: "file has no frames".into(),
        });
    }
    let mut data = Vec::with_capacity(frames * joints * 3);
    for frame in 0..frames {
        let bodies = tok.next_usize("body count")?;
        if bodies > 1 {
            return Err(Error::MultiActorFile {
                path: path.to_path_buf(),
                frame,
            });
        }
        if bodies == 0 {
            data.extend(std::iter::repeat_n(f64::NAN, joints * 3));
            continue;
        }
        tok.skip(BODY_FIELDS, "body metadata")?;
        let count = tok.next_usize("joint count")?;
        if count != joints {
            return Err(Error::MalformedFile {
                path: path.to_path_buf(),
                reason: format!("frame {frame} has {count} joints, expected {joints}"),
            });
        }
        for _ in 0..joints {
            for _ in 0..3 {
                data.push(tok.next_f64("joint coordinate")?);
            }
            tok.skip(JOINT_FIELDS - 3, "joint attributes")?;
        }
    }
    if tok.inner.next().is_some() {
        return Err(Error::MalformedFile {
            path: path.to_path_buf(),
            reason: "trailing content after the declared frames".into(),
        });
    }
    SkeletonSequence::new(joints, data, meta)
}

pub fn parse_ntu_file(path: &Path, topology: &SkeletonTopology) -> Result<SkeletonSequence> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_ntu_str(&text, path, topology)
}

/// Serializes a single-body sequence in the NTU layout. Non-XYZ fields are zero.
pub fn to_ntu_string(seq: &SkeletonSequence) -> String {
    let mut out = String::with_capacity(seq.data().len() * 12);
    let _ = writeln!(out, "{}", seq.frames());
    for t in 0..seq.frames() {
        out.push_str("1\n");
        out.push_str("0 0 0 0 0 0 0 0 0 2\n");
        let _ = writeln!(out, "{}", seq.joints());
        for j in 0..seq.joints() {
            let [x, y, z] = seq.position(t, j);
            // `{}` on f64 prints the shortest representation that round-trips.
            let _ = writeln!(out, "{x} {y} {z} 0 0 0 0 0 0 0 0 2");
        }
    }
    out
}

pub fn write_ntu_file(seq: &SkeletonSequence, path: &Path) -> Result<()> {
    fs::write(path, to_ntu_string(seq)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn body_block(joints: usize, offset: f64) -> String {
        let mut s = String::from("72057594037931101 0 0 0 0 0 0 0.1 0.2 2\n");
        s.push_str(&format!("{joints}\n"));
        for j in 0..joints {
            let v = offset + j as f64 * 0.01;
            s.push_str(&format!("{v} {} {} 1 2 3 4 0.5 0.5 0.5 0.5 2\n", v + 1.0, v + 2.0));
        }
        s
    }

    #[test]
    fn parses_single_body_file() {
        let topo = SkeletonTopology::kinect_v2();
        let mut text = String::from("2\n");
        for f in 0..2 {
            text.push_str("1\n");
            text.push_str(&body_block(25, f as f64));
        }
        let seq = parse_ntu_str(&text, Path::new("S001C002P003R001A010.skeleton"), &topo).unwrap();
        assert_eq!(seq.frames(), 2);
        assert_eq!(seq.joints(), 25);
        assert_eq!(seq.position(1, 2), [1.02, 2.02, 3.02]);
        assert_eq!(seq.meta.camera, 2);
        assert_eq!(seq.meta.actor, 3);
        assert_eq!(seq.meta.action, 10);
    }

    #[test]
    fn two_bodies_in_every_frame_is_multi_actor() {
        let topo = SkeletonTopology::kinect_v2();
        let mut text = String::from("2\n");
        for _ in 0..2 {
            text.push_str("2\n");
            text.push_str(&body_block(25, 0.0));
            text.push_str(&body_block(25, 1.0));
        }
        let err = parse_ntu_str(&text, Path::new("S001C001P001R001A050.skeleton"), &topo).unwrap_err();
        assert!(matches!(err, Error::MultiActorFile { .. }));
    }

    #[test]
    fn empty_and_truncated_files_are_malformed() {
        let topo = SkeletonTopology::kinect_v2();
        let path = Path::new("S001C001P001R001A001.skeleton");
        assert!(matches!(parse_ntu_str("0\n", path, &topo), Err(Error::MalformedFile { .. })));
        assert!(matches!(parse_ntu_str("", path, &topo), Err(Error::MalformedFile { .. })));
        let truncated = format!("1\n1\n{}", &body_block(25, 0.0)[..200]);
        assert!(matches!(parse_ntu_str(&truncated, path, &topo), Err(Error::MalformedFile { .. })));
    }

    #[test]
    fn bodyless_frames_become_nan() {
        let topo = SkeletonTopology::kinect_v2();
        let text = format!("2\n0\n1\n{}", body_block(25, 0.0));
        let seq = parse_ntu_str(&text, Path::new("S001C001P001R001A001"), &topo).unwrap();
        assert!(seq.position(0, 0)[0].is_nan());
        assert!(seq.position(1, 0)[0].is_finite());
    }
}
