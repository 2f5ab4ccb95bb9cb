//! On-disk formats: 8-bit binary PGM frames, one-line condition records, story
//! directories and metric CSVs.

use std::fs;
use std::io::{BufRead, Write};
use std::path::Path;

use crate::error::{format_err, invalid, Result};
use crate::memory::{AttrId, ConditionRecord};

use super::{MetricRow, Story, SIDE};

/// Writes a square frame as binary PGM, clamping to [0, 1] and rounding to 8 bits.
pub fn write_pgm<W: Write>(mut w: W, frame: &[f64]) -> Result<()> {
    let side = (frame.len() as f64).sqrt() as usize;
    if side * side != frame.len() || side == 0 {
        return Err(invalid(format!("frame of {} pixels is not square", frame.len())));
    }
    write!(w, "P5\n{side} {side}\n255\n")?;
    let bytes: Vec<u8> = frame.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    w.write_all(&bytes)?;
    Ok(())
}

pub fn read_pgm(bytes: &[u8]) -> Result<Vec<f64>> {
    let mut fields = Vec::with_capacity(4);
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(format_err("pgm", "truncated header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    if fields[0] != "P5" {
        return Err(format_err("pgm", format!("unsupported magic {:?}", fields[0])));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| format_err("pgm", format!("bad number {s:?}")));
    let (w, h, max) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
    if max != 255 {
        return Err(format_err("pgm", format!("only 8-bit files are supported, maxval {max}")));
    }
    let data = &bytes[(pos + 1).min(bytes.len())..];
    if data.len() != w * h {
        return Err(format_err("pgm", format!("expected {} pixels, found {}", w * h, data.len())));
    }
    Ok(data.iter().map(|b| *b as f64 / 255.0).collect())
}

/// `character=1 background=2 motion=-`; `-` marks an omitted attribute.
pub fn format_condition(c: &ConditionRecord) -> String {
    let f = |v: Option<AttrId>| v.map_or("-".to_string(), |x| x.to_string());
    format!("character={} background={} motion={}", f(c.character), f(c.background), f(c.motion))
}

pub fn parse_condition(line: &str) -> Result<ConditionRecord> {
    let mut out = ConditionRecord::default();
    let mut seen = [false; 3];
    for field in line.split_whitespace() {
        let (k, v) = field
            .split_once('=')
            .ok_or_else(|| format_err("condition", format!("expected key=value, got {field:?}")))?;
        let value = if v == "-" {
            None
        } else {
            Some(v.parse::<AttrId>().map_err(|_| format_err("condition", format!("bad value in {field:?}")))?)
        };
        let slot = match k {
            "character" => 0,
            "background" => 1,
            "motion" => 2,
            _ => return Err(format_err("condition", format!("unknown key {k:?}"))),
        };
        if seen[slot] {
            return Err(format_err("condition", format!("duplicate key {k:?}")));
        }
        seen[slot] = true;
        match slot {
            0 => out.character = value,
            1 => out.background = value,
            _ => out.motion = value,
        }
    }
    if seen.iter().any(|s| !s) {
        return Err(format_err("condition", format!("missing keys in {line:?}")));
    }
    Ok(out)
}

/// Writes `frame_001.pgm`, … and `conditions.txt` (one line per frame) into `dir`.
pub fn write_frames(dir: &Path, frames: &[Vec<f64>], conditions: &[ConditionRecord]) -> Result<()> {
    if frames.len() != conditions.len() {
        return Err(invalid("one condition per frame"));
    }
    fs::create_dir_all(dir)?;
    for (i, f) in frames.iter().enumerate() {
        let file = fs::File::create(dir.join(format!("frame_{:03}.pgm", i + 1)))?;
        write_pgm(std::io::BufWriter::new(file), f)?;
    }
    let mut text = String::new();
    for c in conditions {
        text.push_str(&format_condition(c));
        text.push('\n');
    }
    fs::write(dir.join("conditions.txt"), text)?;
    Ok(())
}

/// Reads the frames and conditions written by [`write_frames`].
pub fn read_frames(dir: &Path) -> Result<(Vec<Vec<f64>>, Vec<ConditionRecord>)> {
    let file = fs::File::open(dir.join("conditions.txt"))?;
    let conditions = std::io::BufReader::new(file)
        .lines()
        .filter(|l| l.as_ref().map_or(true, |l| !l.trim().is_empty()))
        .map(|l| parse_condition(&l?))
        .collect::<Result<Vec<_>>>()?;
    let frames = (0..conditions.len())
        .map(|i| read_pgm(&fs::read(dir.join(format!("frame_{:03}.pgm", i + 1)))?))
        .collect::<Result<Vec<_>>>()?;
    if frames.iter().any(|f| f.len() != SIDE * SIDE) {
        return Err(format_err("story", format!("frames must be {SIDE}x{SIDE}")));
    }
    Ok((frames, conditions))
}

pub fn write_story(dir: &Path, story: &Story) -> Result<()> {
    write_frames(dir, &story.frames, &story.conditions)
}

/// Per-frame metrics as CSV; the first frame has an empty consistency field.
pub fn metrics_csv(rows: &[MetricRow]) -> String {
    let mut out = String::from("story,frame,frame_consistency,manifold_distance,token_error_rate\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.story,
            r.frame + 1,
            r.frame_consistency.map_or(String::new(), |v| v.to_string()),
            r.manifold_distance,
            r.token_error_rate
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::experiment::{make_story, StorySpec};

    #[test]
    fn pgm_round_trip_is_exact_for_eight_bit_frames() {
        let s = make_story(&StorySpec::default(), 5).unwrap();
        let mut buf = Vec::new();
        write_pgm(&mut buf, &s.frames[2]).unwrap();
        assert_eq!(read_pgm(&buf).unwrap(), s.frames[2]);
    }

    #[test]
    fn pgm_clamps_out_of_range_values() {
        let mut buf = Vec::new();
        write_pgm(&mut buf, &[-0.5, 1.5, 0.5, 0.0]).unwrap();
        assert_eq!(read_pgm(&buf).unwrap(), vec![0.0, 1.0, 128.0 / 255.0, 0.0]);
        assert!(write_pgm(&mut Vec::new(), &[0.0; 3]).is_err());
    }

    #[test]
    fn pgm_rejects_bad_input() {
        assert!(read_pgm(b"P2\n1 1\n255\n0").is_err());
        assert!(read_pgm(b"P5\n2 2\n255\n\x00").is_err());
        assert!(read_pgm(b"P5\n2").is_err());
    }

    #[test]
    fn condition_lines_round_trip() {
        for c in [
            ConditionRecord::new(1, 2, 3),
            ConditionRecord::default(),
            ConditionRecord {
                character: None,
                background: Some(0),
                motion: Some(4),
            },
        ] {
            assert_eq!(parse_condition(&format_condition(&c)).unwrap(), c);
        }
        assert!(parse_condition("character=1 background=2").is_err());
        assert!(parse_condition("character=1 background=2 motion=3 mood=4").is_err());
        assert!(parse_condition("character=x background=2 motion=3").is_err());
    }

    #[test]
    fn story_directory_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let s = make_story(&StorySpec::default(), 11).unwrap();
        write_story(dir.path(), &s).unwrap();
        let (frames, conds) = read_frames(dir.path()).unwrap();
        assert_eq!(frames, s.frames);
        assert_eq!(conds, s.conditions);
    }
}
