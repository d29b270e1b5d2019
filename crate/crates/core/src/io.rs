//! Path batch serialization: long-format CSV and the `COTK1` binary format.

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::path::PathBatch;

const BATCH_MAGIC: &[u8; 5] = b"COTK1";

/// Writes `# key=value` lines followed by rows `i,t,f1..fd` (0-based `i`, `t`).
pub fn write_batch_csv<W: Write>(batch: &PathBatch, provenance: &[(&str, String)], mut out: W) -> Result<()> {
    for (k, v) in provenance {
        writeln!(out, "# {k}={v}")?;
    }
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["i".to_string(), "t".to_string()];
    header.extend((1..=batch.dim()).map(|k| format!("f{k}")));
    w.write_record(&header)?;
    for (i, p) in batch.iter().enumerate() {
        for (t, row) in p.values().rows().into_iter().enumerate() {
            let mut rec = vec![i.to_string(), t.to_string()];
            rec.extend(row.iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads the CSV layout of [`write_batch_csv`]; `#` lines are skipped. Rows
/// must be sorted by `(i, t)` with no gaps.
pub fn read_batch_csv<R: Read>(input: R) -> Result<PathBatch> {
    let mut r = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(input);
    let header = r.headers()?.clone();
    let dim = header.len().saturating_sub(2);
    let expected: Vec<String> = ["i", "t"]
        .iter()
        .map(|s| s.to_string())
        .chain((1..=dim).map(|k| format!("f{k}")))
        .collect();
    if dim == 0 || header.iter().ne(expected.iter().map(String::as_str)) {
        return Err(Error::Format(format!("expected header i,t,f1..fd, got {}", header.iter().collect::<Vec<_>>().join(","))));
    }
    let mut data = Vec::new();
    let (mut count, mut steps) = (0usize, None::<usize>);
    let mut next = (0usize, 0usize);
    for (line, rec) in r.records().enumerate() {
        let rec = rec?;
        let bad = |what: &str| Error::Format(format!("data row {}: {what}", line + 1));
        let i: usize = rec[0].parse().map_err(|_| bad("bad path index"))?;
        let t: usize = rec[1].parse().map_err(|_| bad("bad time index"))?;
        if (i, t) != next {
            // a new path starts once the previous one closed
            if t == 0 && i == next.0 + 1 && next.1 > 0 {
                match steps {
                    None => steps = Some(next.1),
                    Some(s) if s != next.1 => return Err(bad("ragged path lengths")),
                    _ => {}
                }
                count += 1;
            } else {
                return Err(bad("rows out of order"));
            }
        }
        next = (i, t + 1);
        for k in 0..dim {
            data.push(rec[k + 2].trim().parse::<f64>().map_err(|_| bad("bad value"))?);
        }
    }
    if next.1 == 0 {
        return Err(Error::Format("no data rows".into()));
    }
    match steps {
        Some(s) if s != next.1 => return Err(Error::Format("ragged path lengths".into())),
        _ => {}
    }
    count += 1;
    PathBatch::from_flat(count, next.1, dim, &data)
}

/// `COTK1`, then `m`, `T`, `d` as little-endian `u64`, then all values as
/// little-endian `f64`, path by path in row-major time-by-feature order.
pub fn write_batch_binary<W: Write>(batch: &PathBatch, mut out: W) -> Result<()> {
    out.write_all(BATCH_MAGIC)?;
    for n in [batch.len(), batch.steps(), batch.dim()] {
        out.write_all(&(n as u64).to_le_bytes())?;
    }
    for v in batch.to_flat() {
        out.write_all(&v.to_le_bytes())?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_batch_binary<R: Read>(mut input: R) -> Result<PathBatch> {
    let mut magic = [0u8; 5];
    input.read_exact(&mut magic)?;
    if &magic != BATCH_MAGIC {
        return Err(Error::Format("missing COTK1 magic".into()));
    }
    let mut dims = [0usize; 3];
    let mut buf = [0u8; 8];
    for d in &mut dims {
        input.read_exact(&mut buf)?;
        *d = usize::try_from(u64::from_le_bytes(buf)).map_err(|_| Error::Format("dimension overflow".into()))?;
    }
    let total = dims[0]
        .checked_mul(dims[1])
        .and_then(|v| v.checked_mul(dims[2]))
        .ok_or_else(|| Error::Format("dimension overflow".into()))?;
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes)?;
    if bytes.len() != total * 8 {
        return Err(Error::Format(format!(
            "expected {} payload bytes, found {}",
            total * 8,
            bytes.len()
        )));
    }
    let data: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    PathBatch::from_flat(dims[0], dims[1], dims[2], &data)
}

/// Picks the format from the extension: `.cotk` is binary, anything else CSV.
pub fn is_binary_path(path: &std::path::Path) -> bool {
    path.extension().is_some_and(|e| e == "cotk")
}

pub fn save_batch(batch: &PathBatch, provenance: &[(&str, String)], path: &std::path::Path) -> Result<()> {
    let file = std::io::BufWriter::new(std::fs::File::create(path)?);
    if is_binary_path(path) {
        write_batch_binary(batch, file)
    } else {
        write_batch_csv(batch, provenance, file)
    }
}

pub fn load_batch(path: &std::path::Path) -> Result<PathBatch> {
    let file = std::io::BufReader::new(std::fs::File::open(path)?);
    if is_binary_path(path) {
        read_batch_binary(file)
    } else {
        read_batch_csv(file)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::path::Path;
    use proptest::prelude::*;

    fn batch(m: usize, t: usize, d: usize, data: &[f64]) -> PathBatch {
        PathBatch::from_flat(m, t, d, data).unwrap()
    }

    #[test]
    fn csv_layout_and_comments() {
        let b = batch(2, 2, 1, &[1.0, 2.0, 3.5, -4.0]);
        let mut buf = Vec::new();
        write_batch_csv(&b, &[("seed", "3".into())], &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert_eq!(text, "# seed=3\ni,t,f1\n0,0,1\n0,1,2\n1,0,3.5\n1,1,-4\n");
        assert_eq!(read_batch_csv(buf.as_slice()).unwrap(), b);
    }

    #[test]
    fn csv_rejects_ragged_and_shuffled_rows() {
        assert!(read_batch_csv("i,t,f1\n0,0,1\n0,1,2\n1,0,3\n".as_bytes()).is_err());
        assert!(read_batch_csv("i,t,f1\n0,1,1\n0,0,2\n".as_bytes()).is_err());
        assert!(read_batch_csv("i,t,x\n0,0,1\n".as_bytes()).is_err());
        assert!(read_batch_csv("i,t,f1\n".as_bytes()).is_err());
    }

    #[test]
    fn binary_layout() {
        let b = PathBatch::new(vec![Path::scalar(&[1.0, 2.0]).unwrap()]).unwrap();
        let mut buf = Vec::new();
        write_batch_binary(&b, &mut buf).unwrap();
        assert_eq!(&buf[..5], b"COTK1");
        assert_eq!(u64::from_le_bytes(buf[5..13].try_into().unwrap()), 1);
        assert_eq!(u64::from_le_bytes(buf[13..21].try_into().unwrap()), 2);
        assert_eq!(u64::from_le_bytes(buf[21..29].try_into().unwrap()), 1);
        assert_eq!(f64::from_le_bytes(buf[37..45].try_into().unwrap()), 2.0);
        assert_eq!(buf.len(), 45);
        assert!(read_batch_binary(&buf[..44]).is_err());
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(read_batch_binary(bad.as_slice()).is_err());
    }

    proptest! {
        #[test]
        fn round_trips_are_exact(
            m in 1usize..5, t in 1usize..5, d in 1usize..4,
            seed in proptest::collection::vec(-1e300f64..1e300, 64),
        ) {
            let data: Vec<f64> = seed.iter().cycle().take(m * t * d).copied().collect();
            let b = batch(m, t, d, &data);
            let mut buf = Vec::new();
            write_batch_binary(&b, &mut buf).unwrap();
            prop_assert_eq!(&read_batch_binary(buf.as_slice()).unwrap(), &b);
            let mut buf = Vec::new();
            write_batch_csv(&b, &[], &mut buf).unwrap();
            prop_assert_eq!(&read_batch_csv(buf.as_slice()).unwrap(), &b);
        }
    }
}
