//! TUM trajectory files: `timestamp tx ty tz qx qy qz qw` per line, with the
//! frame id as timestamp.

use crate::error::{Error, Result};
use crate::geom::{Pose, UnitQuaternion, Vec3};
use crate::posegraph::FrameId;
use std::collections::BTreeMap;
use std::io::{BufRead, Write};

pub fn format_tum_line(id: FrameId, p: &Pose) -> String {
    let t = p.translation;
    let q = p.rotation;
    format!(
        "{id} {} {} {} {} {} {} {}",
        t.x,
        t.y,
        t.z,
        q.x(),
        q.y(),
        q.z(),
        q.w()
    )
}

pub fn write_tum<W: Write>(mut w: W, trajectory: &BTreeMap<FrameId, Pose>) -> Result<()> {
    for (id, p) in trajectory {
        writeln!(w, "{}", format_tum_line(*id, p))?;
    }
    Ok(())
}

/// Reads a trajectory; blank lines and `#` comments are skipped. Timestamps
/// must be integral frame ids.
pub fn read_tum<R: BufRead>(r: R) -> Result<BTreeMap<FrameId, Pose>> {
    let mut out = BTreeMap::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        let n = i + 1;
        let t = line.trim();
        if t.is_empty() || t.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = t.split_whitespace().collect();
        if fields.len() != 8 {
            return Err(Error::parse(n, format!("expected 8 fields, found {}", fields.len())));
        }
        let mut v = [0.0f64; 8];
        for (slot, s) in v.iter_mut().zip(&fields) {
            *slot = s
                .parse()
                .map_err(|e| Error::parse(n, format!("bad number {s:?}: {e}")))?;
        }
        if v[0] < 0.0 || v[0].fract() != 0.0 {
            return Err(Error::parse(n, format!("timestamp {} is not a frame id", fields[0])));
        }
        let id = FrameId(v[0] as u64);
        let q = UnitQuaternion::new(v[7], v[4], v[5], v[6])
            .map_err(|e| Error::parse(n, e.to_string()))?;
        if out.insert(id, Pose::new(q, Vec3::new(v[1], v[2], v[3]))).is_some() {
            return Err(Error::parse(n, format!("duplicate frame {id}")));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let traj: BTreeMap<FrameId, Pose> = [
            (FrameId(1), Pose::identity()),
            (
                FrameId(4),
                Pose::new(
                    UnitQuaternion::from_axis_angle(&Vec3::new(1.0, 2.0, 3.0), 0.7),
                    Vec3::new(0.1, -2.5, 1e-7),
                ),
            ),
        ]
        .into();
        let mut buf = Vec::new();
        write_tum(&mut buf, &traj).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("1 0 0 0 0 0 0 1\n"));
        let back = read_tum(buf.as_slice()).unwrap();
        for (id, p) in &traj {
            assert!((back[id].translation - p.translation).norm() == 0.0);
            assert!(back[id].rotation.geodesic_rad(&p.rotation) < 1e-12);
        }
    }

    #[test]
    fn rejects_malformed_lines() {
        assert!(matches!(
            read_tum("# header\n1 0 0 0 0 0 0\n".as_bytes()),
            Err(Error::Parse { line: 2, .. })
        ));
        assert!(read_tum("1.5 0 0 0 0 0 0 1\n".as_bytes()).is_err());
        assert!(read_tum("1 0 0 0 0 0 0 1\n1 0 0 0 0 0 0 1\n".as_bytes()).is_err());
    }
}
