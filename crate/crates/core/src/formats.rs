//! On-disk formats shared by the command-line tools.
//!
//! Importance vectors are either `NCIV` binary (magic, `u16` version 1,
//! `u16` reserved 0, `u64` count, then `f32` values, all little-endian) or
//! plain text with one value per line. Masks are text: an `n_rows N`
//! header, optional `#` comment lines, then one `start:len` line per run.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::mask::{mask_from_chunks, Chunk, ImportanceVector, SelectionMask, WeightLayout};
use crate::select::ChunkSelectParams;

pub const NCIV_MAGIC: &[u8; 4] = b"NCIV";
pub const NCIV_VERSION: u16 = 1;
const NCIV_HEADER: usize = 16;

/// Rounds to `digits` significant decimal digits.
pub fn round_sig(x: f64, digits: usize) -> f64 {
    if x == 0.0 {
        return 0.0;
    }
    if !x.is_finite() {
        return x;
    }
    format!("{:.*e}", digits.saturating_sub(1), x)
        .parse()
        .unwrap_or(x)
}

/// Canonical text for a real: six significant digits, shortest form.
pub fn fmt_real(x: f64) -> String {
    format!("{}", round_sig(x, 6))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|source| Error::File {
        path: path.to_path_buf(),
        source,
    })
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|source| Error::File {
        path: path.to_path_buf(),
        source,
    })
}

pub fn parse_importance(bytes: &[u8], origin: &str) -> Result<ImportanceVector> {
    let values = if bytes.starts_with(NCIV_MAGIC) {
        parse_nciv(bytes, origin)?
    } else {
        parse_importance_text(bytes, origin)?
    };
    ImportanceVector::new(values).map_err(|e| Error::format(origin, e.to_string()))
}

fn parse_nciv(bytes: &[u8], origin: &str) -> Result<Vec<f64>> {
    if bytes.len() < NCIV_HEADER {
        return Err(Error::format(origin, "truncated NCIV header"));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != NCIV_VERSION {
        return Err(Error::format(
            format!("{origin}: byte 4"),
            format!("unsupported NCIV version {version}"),
        ));
    }
    let reserved = u16::from_le_bytes([bytes[6], bytes[7]]);
    if reserved != 0 {
        return Err(Error::format(
            format!("{origin}: byte 6"),
            "reserved field must be 0",
        ));
    }
    let count = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    let body = &bytes[NCIV_HEADER..];
    if body.len() as u64 != count.saturating_mul(4) {
        return Err(Error::format(
            format!("{origin}: byte 8"),
            format!(
                "count {count} needs {} payload bytes, found {}",
                count.saturating_mul(4),
                body.len()
            ),
        ));
    }
    body.chunks_exact(4)
        .enumerate()
        .map(|(i, b)| {
            let x = f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64;
            if x.is_finite() && x >= 0.0 {
                Ok(x)
            } else {
                Err(Error::format(
                    format!("{origin}: value {i}"),
                    format!("importance must be finite and non-negative, got {x}"),
                ))
            }
        })
        .collect()
}

fn parse_importance_text(bytes: &[u8], origin: &str) -> Result<Vec<f64>> {
    let text = std::str::from_utf8(bytes)
        .map_err(|_| Error::format(origin, "neither NCIV binary nor UTF-8 text"))?;
    let mut values = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let t = line.trim();
        if t.is_empty() || t.starts_with('#') {
            continue;
        }
        let x: f64 = t.parse().map_err(|_| {
            Error::format(
                format!("{origin}:{}", i + 1),
                format!("not a number: {t:?}"),
            )
        })?;
        if !(x.is_finite() && x >= 0.0) {
            return Err(Error::format(
                format!("{origin}:{}", i + 1),
                format!("importance must be finite and non-negative, got {x}"),
            ));
        }
        values.push(x);
    }
    Ok(values)
}

pub fn read_importance(path: &Path) -> Result<ImportanceVector> {
    parse_importance(&read_file(path)?, &path.display().to_string())
}

pub fn encode_nciv(values: &[f32]) -> Vec<u8> {
    let mut out = Vec::with_capacity(NCIV_HEADER + 4 * values.len());
    out.extend_from_slice(NCIV_MAGIC);
    out.extend_from_slice(&NCIV_VERSION.to_le_bytes());
    out.extend_from_slice(&0u16.to_le_bytes());
    out.extend_from_slice(&(values.len() as u64).to_le_bytes());
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn write_importance_nciv(path: &Path, values: &[f32]) -> Result<()> {
    write_file(path, &encode_nciv(values))
}

pub fn write_importance_text(path: &Path, values: &[f64]) -> Result<()> {
    let mut s = String::new();
    for v in values {
        let _ = writeln!(s, "{}", fmt_real(*v));
    }
    write_file(path, s.as_bytes())
}

/// Mask text with optional `# key value` comment lines after the header.
pub fn encode_mask(mask: &SelectionMask, comments: &[(String, String)]) -> String {
    let mut s = format!("n_rows {}\n", mask.len());
    for (k, v) in comments {
        let _ = writeln!(s, "# {k} {v}");
    }
    for c in mask.chunks() {
        let _ = writeln!(s, "{}:{}", c.start, c.len);
    }
    s
}

pub fn parse_mask(text: &str, origin: &str) -> Result<SelectionMask> {
    let mut n_rows = None;
    let mut chunks = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let loc = || format!("{origin}:{}", i + 1);
        let t = line.trim();
        if t.is_empty() || t.starts_with('#') {
            continue;
        }
        if n_rows.is_none() {
            let n = t
                .strip_prefix("n_rows")
                .map(str::trim)
                .and_then(|r| r.parse::<usize>().ok())
                .ok_or_else(|| Error::format(loc(), "expected header \"n_rows N\""))?;
            n_rows = Some(n);
            continue;
        }
        let (a, b) = t
            .split_once(':')
            .ok_or_else(|| Error::format(loc(), format!("expected start:len, got {t:?}")))?;
        let start: usize = a
            .trim()
            .parse()
            .map_err(|_| Error::format(loc(), format!("bad chunk start {a:?}")))?;
        let len: usize = b
            .trim()
            .parse()
            .map_err(|_| Error::format(loc(), format!("bad chunk length {b:?}")))?;
        let chunk = Chunk::new(start, len);
        let n = n_rows.expect("header parsed");
        if len == 0 || chunk.end() > n {
            return Err(Error::format(
                loc(),
                format!("chunk {start}:{len} outside 0..{n}"),
            ));
        }
        if chunks.last().is_some_and(|p: &Chunk| p.end() > start) {
            return Err(Error::format(
                loc(),
                "chunks must be ascending and disjoint",
            ));
        }
        chunks.push(chunk);
    }
    let n = n_rows.ok_or_else(|| Error::format(origin, "missing \"n_rows N\" header"))?;
    mask_from_chunks(&chunks, n)
}

pub fn read_mask(path: &Path) -> Result<SelectionMask> {
    let bytes = read_file(path)?;
    let origin = path.display().to_string();
    let text = std::str::from_utf8(&bytes)
        .map_err(|_| Error::format(&origin, "mask file is not UTF-8"))?;
    parse_mask(text, &origin)
}

pub fn write_mask(path: &Path, mask: &SelectionMask, comments: &[(String, String)]) -> Result<()> {
    write_file(path, encode_mask(mask, comments).as_bytes())
}

/// `"18944x7168"` → 18944 rows of 7168 bytes.
pub fn parse_layout(s: &str) -> Result<WeightLayout> {
    let (a, b) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| Error::Input(format!("layout must look like NxB, got {s:?}")))?;
    let n = a
        .trim()
        .parse()
        .map_err(|_| Error::Input(format!("bad row count in layout {s:?}")))?;
    let b = b
        .trim()
        .parse()
        .map_err(|_| Error::Input(format!("bad row size in layout {s:?}")))?;
    WeightLayout::new(n, b)
}

/// `"start,end,step,cap"` in KB.
pub fn parse_params(s: &str) -> Result<ChunkSelectParams> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    let nums: Option<Vec<u32>> = parts.iter().map(|p| p.parse().ok()).collect();
    match nums.as_deref() {
        Some(&[start, end, step, cap]) => ChunkSelectParams::new(start, end, step, cap),
        _ => Err(Error::Input(format!(
            "params must be four KB integers start,end,step,cap, got {s:?}"
        ))),
    }
}

/// One `NxB` layout per line; blank lines and `#` comments ignored.
pub fn parse_shapes(text: &str, origin: &str) -> Result<Vec<WeightLayout>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let t = line.trim();
        if t.is_empty() || t.starts_with('#') {
            continue;
        }
        out.push(
            parse_layout(t)
                .map_err(|e| Error::format(format!("{origin}:{}", i + 1), e.to_string()))?,
        );
    }
    if out.is_empty() {
        return Err(Error::format(origin, "no shapes listed"));
    }
    Ok(out)
}

/// `"a..b:step"` or `"a..=b:step"` (inclusive either way) or a comma list.
pub fn parse_grid(s: &str) -> Result<Vec<u32>> {
    let bad = || Error::Input(format!("grid must be a,b,c or lo..hi:step, got {s:?}"));
    let grid: Vec<u32> = if let Some((range, step)) = s.split_once(':') {
        let (lo, hi) = range.split_once("..").ok_or_else(bad)?;
        let lo: u32 = lo.trim().parse().map_err(|_| bad())?;
        let hi: u32 = hi
            .trim()
            .trim_start_matches('=')
            .parse()
            .map_err(|_| bad())?;
        let step: usize = step.trim().parse().map_err(|_| bad())?;
        if step == 0 || hi < lo {
            return Err(bad());
        }
        (lo..=hi).step_by(step).collect()
    } else {
        s.split(',')
            .map(|p| p.trim().parse().map_err(|_| bad()))
            .collect::<Result<_>>()?
    };
    if grid.is_empty() || grid.contains(&0) {
        return Err(Error::Input(format!(
            "grid values must be positive, got {s:?}"
        )));
    }
    Ok(grid)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_sig_examples() {
        assert_eq!(round_sig(135.18712, 6), 135.187);
        assert_eq!(round_sig(0.000123456789, 3), 0.000123);
        assert_eq!(round_sig(0.0, 6), 0.0);
        assert_eq!(fmt_real(1.0 / 3.0), "0.333333");
        assert_eq!(fmt_real(170.0), "170");
    }

    #[test]
    fn nciv_round_trip_and_autodetect() {
        let vals = [0.5f32, 0.0, 3.25, 1e-3];
        let v = parse_importance(&encode_nciv(&vals), "x").unwrap();
        assert_eq!(v.values(), &[0.5, 0.0, 3.25, 1e-3f32 as f64]);
        let t = parse_importance(b"0.5\n\n# c\n0\n3.25\n", "t").unwrap();
        assert_eq!(t.values(), &[0.5, 0.0, 3.25]);
    }

    #[test]
    fn nciv_header_errors() {
        let mut b = encode_nciv(&[1.0, 2.0]);
        b.pop();
        assert!(matches!(
            parse_importance(&b, "f"),
            Err(Error::Format { .. })
        ));
        let mut b = encode_nciv(&[1.0]);
        b[4] = 2;
        let e = parse_importance(&b, "f").unwrap_err();
        assert!(e.to_string().contains("version"));
        let mut b = encode_nciv(&[1.0]);
        b[6] = 1;
        assert!(parse_importance(&b, "f").is_err());
        let b = encode_nciv(&[f32::NAN]);
        assert!(parse_importance(&b, "f")
            .unwrap_err()
            .to_string()
            .contains("value 0"));
        assert!(parse_importance(b"NCIV", "f").is_err());
    }

    #[test]
    fn text_errors_carry_line() {
        let e = parse_importance(b"1\n2\nabc\n", "imp.txt").unwrap_err();
        assert_eq!(e.exit_code(), 2);
        assert!(e.to_string().contains("imp.txt:3"), "{e}");
        assert!(parse_importance(b"1\n-2\n", "f")
            .unwrap_err()
            .to_string()
            .contains("f:2"));
    }

    #[test]
    fn mask_round_trip() {
        let m = SelectionMask::from_indices(8, &[1, 2, 4, 6, 7]).unwrap();
        let text = encode_mask(&m, &[("selected_rows".into(), "5".into())]);
        assert_eq!(text, "n_rows 8\n# selected_rows 5\n1:2\n4:1\n6:2\n");
        assert_eq!(parse_mask(&text, "m").unwrap(), m);
        let empty = SelectionMask::zeros(5);
        assert_eq!(parse_mask(&encode_mask(&empty, &[]), "m").unwrap(), empty);
    }

    #[test]
    fn mask_errors() {
        for (text, line) in [
            ("1:2\n", "m:1"),
            ("n_rows 8\n1-2\n", "m:2"),
            ("n_rows 8\n7:2\n", "m:2"),
            ("n_rows 8\n0:0\n", "m:2"),
            ("n_rows 8\n4:2\n1:1\n", "m:3"),
            ("n_rows 8\n0:2\n1:1\n", "m:3"),
        ] {
            let e = parse_mask(text, "m").unwrap_err();
            assert!(e.to_string().contains(line), "{text:?}: {e}");
            assert_eq!(e.exit_code(), 2);
        }
        assert!(parse_mask("", "m").is_err());
    }

    #[test]
    fn layout_params_grid() {
        assert_eq!(
            parse_layout("18944x7168").unwrap(),
            WeightLayout::new(18944, 7168).unwrap()
        );
        assert!(parse_layout("18944").is_err());
        assert!(parse_layout("0x4").is_err());
        let p = parse_params("32,236,32,32").unwrap();
        assert_eq!(
            (
                p.chunk_sz_start_kb,
                p.chunk_sz_end_kb,
                p.chunk_sz_step_kb,
                p.jump_cap_kb
            ),
            (32, 236, 32, 32)
        );
        assert!(parse_params("32,236,32").is_err());
        assert!(parse_params("0,8,4,4").is_err());
        assert_eq!(
            parse_grid("4..64:4").unwrap(),
            (4..=64).step_by(4).collect::<Vec<_>>()
        );
        assert_eq!(parse_grid("4..=12:4").unwrap(), vec![4, 8, 12]);
        assert_eq!(parse_grid("8,16").unwrap(), vec![8, 16]);
        assert!(parse_grid("0..8:4").is_err());
        assert!(parse_grid("4..8:0").is_err());
    }

    #[test]
    fn shapes_file() {
        let s = parse_shapes("# shapes\n896x256\n\n3584x7168\n", "s").unwrap();
        assert_eq!(s.len(), 2);
        assert!(parse_shapes("896x256\nfoo\n", "s")
            .unwrap_err()
            .to_string()
            .contains("s:2"));
        assert!(parse_shapes("# none\n", "s").is_err());
    }
}
