//! Interchange formats for label and real-valued fields.
//!
//! Label maps travel as binary PGM (P5) with `maxval = K - 1` and a comment
//! line carrying K. Probability and feature fields travel as a flat
//! little-endian f32 array behind a `CODAPMAP` header (magic, then u32
//! height, width, channels).

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::types::{FeatureMap, LabelMap, ProbabilityMap};

pub const FIELD_MAGIC: &[u8; 8] = b"CODAPMAP";

fn format_err(format: &'static str, reason: impl Into<String>) -> Error {
    Error::Format { format, reason: reason.into() }
}

/// Writes a label map as binary PGM. The comment line records the class
/// count so maps with unused top classes survive the round trip.
pub fn write_pgm<W: Write>(w: &mut W, labels: &LabelMap, classes: usize) -> Result<()> {
    if classes < 2 || classes > 256 {
        return Err(format_err("pgm", format!("class count {classes} not in 2..=256")));
    }
    labels.validate_for(classes)?;
    write!(w, "P5\n# K={classes}\n{} {}\n{}\n", labels.width, labels.height, classes - 1)?;
    w.write_all(&labels.labels)?;
    Ok(())
}

/// Reads a binary PGM written by [`write_pgm`]; returns the map and K.
///
/// K comes from the `# K=` comment when present, else `maxval + 1`.
pub fn read_pgm<R: Read>(r: &mut R) -> Result<(LabelMap, usize)> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    let mut pos = 0usize;
    let mut classes_from_comment = None;

    let mut next_token = |bytes: &[u8], pos: &mut usize| -> Result<String> {
        loop {
            while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
                *pos += 1;
            }
            if *pos < bytes.len() && bytes[*pos] == b'#' {
                let start = *pos;
                while *pos < bytes.len() && bytes[*pos] != b'\n' {
                    *pos += 1;
                }
                let comment = String::from_utf8_lossy(&bytes[start..*pos]).into_owned();
                if let Some(k) = comment.trim_start_matches('#').trim().strip_prefix("K=") {
                    classes_from_comment = k.trim().parse::<usize>().ok();
                }
                continue;
            }
            break;
        }
        let start = *pos;
        while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if start == *pos {
            return Err(format_err("pgm", "unexpected end of header"));
        }
        Ok(String::from_utf8_lossy(&bytes[start..*pos]).into_owned())
    };

    let magic = next_token(&bytes, &mut pos)?;
    if magic != "P5" {
        return Err(format_err("pgm", format!("bad magic {magic:?}")));
    }
    let width: usize = next_token(&bytes, &mut pos)?
        .parse()
        .map_err(|_| format_err("pgm", "bad width"))?;
    let height: usize = next_token(&bytes, &mut pos)?
        .parse()
        .map_err(|_| format_err("pgm", "bad height"))?;
    let maxval: usize = next_token(&bytes, &mut pos)?
        .parse()
        .map_err(|_| format_err("pgm", "bad maxval"))?;
    if maxval > 255 {
        return Err(format_err("pgm", "only one byte per pixel supported"));
    }
    // exactly one whitespace byte separates maxval from the raster
    pos += 1;
    let n = height * width;
    if bytes.len() < pos + n {
        return Err(format_err("pgm", "truncated raster"));
    }
    let labels = LabelMap::new(height, width, bytes[pos..pos + n].to_vec())?;
    let classes = classes_from_comment.unwrap_or(maxval + 1);
    labels.validate_for(classes)?;
    Ok((labels, classes))
}

fn write_field<W: Write>(w: &mut W, h: usize, wd: usize, ch: usize, values: &[f64]) -> Result<()> {
    debug_assert_eq!(values.len(), h * wd * ch);
    w.write_all(FIELD_MAGIC)?;
    for dim in [h, wd, ch] {
        let dim = u32::try_from(dim).map_err(|_| format_err("field", "dimension too large"))?;
        w.write_all(&dim.to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(values.len() * 4);
    for &v in values {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

fn read_field<R: Read>(r: &mut R) -> Result<(usize, usize, usize, Vec<f64>)> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != FIELD_MAGIC {
        return Err(format_err("field", "bad magic"));
    }
    let mut dims = [0usize; 3];
    for d in &mut dims {
        let mut b = [0u8; 4];
        r.read_exact(&mut b)?;
        *d = u32::from_le_bytes(b) as usize;
    }
    let [h, w, ch] = dims;
    let mut raw = Vec::new();
    r.read_to_end(&mut raw)?;
    if raw.len() != h * w * ch * 4 {
        return Err(format_err(
            "field",
            format!("payload {} bytes, expected {}", raw.len(), h * w * ch * 4),
        ));
    }
    let values = raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Ok((h, w, ch, values))
}

/// Exports a probability map as an f32 field (channels = K).
pub fn write_probability_map<W: Write>(w: &mut W, map: &ProbabilityMap) -> Result<()> {
    write_field(w, map.height, map.width, map.classes, &map.values)
}

pub fn read_probability_map<R: Read>(r: &mut R) -> Result<ProbabilityMap> {
    let (h, w, ch, values) = read_field(r)?;
    ProbabilityMap::new(h, w, ch, values)
}

/// Stores a feature map as an f32 field (channels = d). Lossy for values
/// outside f32 precision; dataset files are defined in terms of the stored
/// f32 values.
pub fn write_feature_map<W: Write>(w: &mut W, map: &FeatureMap) -> Result<()> {
    write_field(w, map.height, map.width, map.dim, &map.values)
}

pub fn read_feature_map<R: Read>(r: &mut R) -> Result<FeatureMap> {
    let (h, w, ch, values) = read_field(r)?;
    FeatureMap::new(h, w, ch, values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn pgm_round_trip_carries_class_count() {
        let labels = LabelMap::new(2, 3, vec![0, 1, 2, 3, 0, 1]).unwrap();
        let mut buf = Vec::new();
        write_pgm(&mut buf, &labels, 6).unwrap();
        let (back, k) = read_pgm(&mut &buf[..]).unwrap();
        assert_eq!(back, labels);
        assert_eq!(k, 6);
    }

    #[test]
    fn pgm_header_is_byte_stable() {
        let labels = LabelMap::new(1, 2, vec![0, 4]).unwrap();
        let mut buf = Vec::new();
        write_pgm(&mut buf, &labels, 5).unwrap();
        assert_eq!(&buf[..18], b"P5\n# K=5\n2 1\n4\n\x00\x04"[..18].as_ref());
    }

    #[test]
    fn pgm_rejects_labels_beyond_maxval() {
        let labels = LabelMap::new(1, 1, vec![7]).unwrap();
        let mut buf = Vec::new();
        assert!(write_pgm(&mut buf, &labels, 4).is_err());
    }

    #[test]
    fn field_header_layout() {
        let map = ProbabilityMap::new(1, 1, 2, vec![0.25, 0.75]).unwrap();
        let mut buf = Vec::new();
        write_probability_map(&mut buf, &map).unwrap();
        assert_eq!(&buf[..8], b"CODAPMAP");
        assert_eq!(u32::from_le_bytes(buf[8..12].try_into().unwrap()), 1); // H
        assert_eq!(u32::from_le_bytes(buf[12..16].try_into().unwrap()), 1); // W
        assert_eq!(u32::from_le_bytes(buf[16..20].try_into().unwrap()), 2); // K
        assert_eq!(buf.len(), 20 + 2 * 4);
    }

    #[test]
    fn truncated_field_is_rejected() {
        let map = ProbabilityMap::new(1, 2, 2, vec![0.5, 0.5, 1.0, 0.0]).unwrap();
        let mut buf = Vec::new();
        write_probability_map(&mut buf, &map).unwrap();
        buf.pop();
        assert!(read_probability_map(&mut &buf[..]).is_err());
    }

    proptest! {
        #[test]
        fn pgm_round_trips_any_valid_map(
            h in 1usize..8, w in 1usize..8,
            seed in 0u64..1000,
        ) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let k = rng.gen_range(2usize..=9);
            let labels: Vec<u8> = (0..h * w).map(|_| rng.gen_range(0..k) as u8).collect();
            let map = LabelMap::new(h, w, labels).unwrap();
            let mut buf = Vec::new();
            write_pgm(&mut buf, &map, k).unwrap();
            let (back, k2) = read_pgm(&mut &buf[..]).unwrap();
            prop_assert_eq!(back, map);
            prop_assert_eq!(k2, k);
        }

        #[test]
        fn feature_field_round_trips_f32_exact(
            h in 1usize..6, w in 1usize..6, d in 1usize..5,
            seed in 0u64..1000,
        ) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            // f32-representable values survive exactly
            let values: Vec<f64> = (0..h * w * d).map(|_| rng.gen::<f32>() as f64).collect();
            let map = FeatureMap::new(h, w, d, values).unwrap();
            let mut buf = Vec::new();
            write_feature_map(&mut buf, &map).unwrap();
            let back = read_feature_map(&mut &buf[..]).unwrap();
            prop_assert_eq!(back, map);
        }
    }
}
