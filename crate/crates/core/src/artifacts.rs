//! On-disk formats.
//!
//! Tables are comma-separated with one header line and floats written with
//! 17 significant digits (`{:.16e}`), which round-trips every `f64`
//! exactly. Records (manifest, transition and energy reports) are JSON.
//!
//! Binary checkpoints are laid out as:
//!
//! | bytes            | content                                         |
//! |------------------|-------------------------------------------------|
//! | 8                | magic `DRCKPT01`                                |
//! | 8                | header length `h`, unsigned little-endian       |
//! | `h`              | UTF-8 JSON header: config, feature map, seed, epoch, parameter count |
//! | 8 × count        | parameters as little-endian IEEE-754 `f64`, in flat order |
//!
//! The text form is the JSON of [`Checkpoint`] with parameters inline.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::diagnostics::FieldGrid;
use crate::error::{Error, Result};
use crate::features::FeatureMap;
use crate::network::NetworkConfig;
use crate::points::PointSet;
use crate::trainer::{Checkpoint, LossRecord};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"DRCKPT01";

pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

fn parse_f64(s: &str, what: &str) -> Result<f64> {
    s.trim()
        .parse()
        .map_err(|_| Error::Format(format!("bad {what} value {s:?}")))
}

/// Writes a comma-separated table with the given header.
pub fn write_table(path: &Path, header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "{}", header.join(","))?;
    for row in rows {
        writeln!(w, "{}", row.join(","))?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a table, returning the header and the raw cells.
pub fn read_table(path: &Path) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let reader = BufReader::new(File::open(path)?);
    let mut lines = reader.lines();
    let header: Vec<String> = match lines.next() {
        Some(line) => line?.split(',').map(str::to_string).collect(),
        None => return Err(Error::Format(format!("{} is empty", path.display()))),
    };
    let mut rows = Vec::new();
    for line in lines {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let cells: Vec<String> = line.split(',').map(str::to_string).collect();
        if cells.len() != header.len() {
            return Err(Error::Format(format!(
                "{}: row has {} cells, header has {}",
                path.display(),
                cells.len(),
                header.len()
            )));
        }
        rows.push(cells);
    }
    Ok((header, rows))
}

fn expect_header(path: &Path, got: &[String], want: &[&str]) -> Result<()> {
    if got.iter().map(String::as_str).ne(want.iter().copied()) {
        return Err(Error::Format(format!(
            "{}: header {:?}, expected {:?}",
            path.display(),
            got,
            want
        )));
    }
    Ok(())
}

pub const LOSS_HEADER: [&str; 2] = ["epoch", "loss"];

pub fn write_loss_history(path: &Path, history: &[LossRecord]) -> Result<()> {
    write_table(
        path,
        &LOSS_HEADER,
        history.iter().map(|r| vec![r.epoch.to_string(), fmt_f64(r.loss)]),
    )
}

pub fn read_loss_history(path: &Path) -> Result<Vec<(usize, f64)>> {
    let (header, rows) = read_table(path)?;
    expect_header(path, &header, &LOSS_HEADER)?;
    rows.iter()
        .map(|r| {
            let epoch = r[0]
                .parse()
                .map_err(|_| Error::Format(format!("bad epoch {:?}", r[0])))?;
            Ok((epoch, parse_f64(&r[1], "loss")?))
        })
        .collect()
}

fn field_header(dim: usize, has_uyy: bool) -> Vec<&'static str> {
    let mut h = if dim == 1 {
        vec!["x", "u", "u_x"]
    } else {
        vec!["x", "y", "u", "u_x", "u_y"]
    };
    if has_uyy {
        h.push("u_yy");
    }
    h
}

pub fn write_field_grid(path: &Path, grid: &FieldGrid) -> Result<()> {
    let header = field_header(grid.dim, grid.u_yy.is_some());
    let rows = grid.points.iter().enumerate().map(|(p, x)| {
        let mut row: Vec<String> = x.iter().map(|v| fmt_f64(*v)).collect();
        row.push(fmt_f64(grid.u[p]));
        row.extend(grid.grad.iter().map(|g| fmt_f64(g[p])));
        if let Some(uyy) = &grid.u_yy {
            row.push(fmt_f64(uyy[p]));
        }
        row
    });
    write_table(path, &header, rows)
}

pub fn read_field_grid(path: &Path) -> Result<FieldGrid> {
    let (header, rows) = read_table(path)?;
    let dim = if header.first().map(String::as_str) == Some("x") && header.get(1).map(String::as_str) == Some("y") {
        2
    } else {
        1
    };
    let has_uyy = header.last().map(String::as_str) == Some("u_yy");
    expect_header(path, &header, &field_header(dim, has_uyy))?;
    let n = rows.len();
    let resolution = if dim == 1 {
        n
    } else {
        (n as f64).sqrt().round() as usize
    };
    if resolution < 2 || resolution.pow(dim as u32) != n {
        return Err(Error::Format(format!(
            "{}: {n} rows do not form a square grid",
            path.display()
        )));
    }
    let mut coords = Vec::with_capacity(n * dim);
    let mut u = Vec::with_capacity(n);
    let mut grad = vec![Vec::with_capacity(n); dim];
    let mut uyy = Vec::new();
    for r in &rows {
        let vals: Vec<f64> = r.iter().map(|c| parse_f64(c, "field")).collect::<Result<_>>()?;
        coords.extend_from_slice(&vals[..dim]);
        u.push(vals[dim]);
        for (i, g) in grad.iter_mut().enumerate() {
            g.push(vals[dim + 1 + i]);
        }
        if has_uyy {
            uyy.push(vals[2 * dim + 1]);
        }
    }
    Ok(FieldGrid {
        dim,
        resolution,
        points: PointSet::from_flat(dim, coords)?,
        u,
        grad,
        u_yy: has_uyy.then_some(uyy),
    })
}

pub const SPECTRUM_HEADER: [&str; 2] = ["k", "lambda"];

/// `(k, λ_k)` with `k` starting at 1.
pub fn write_spectrum(path: &Path, eigenvalues: &[f64]) -> Result<()> {
    write_table(
        path,
        &SPECTRUM_HEADER,
        eigenvalues
            .iter()
            .enumerate()
            .map(|(k, v)| vec![(k + 1).to_string(), fmt_f64(*v)]),
    )
}

pub fn read_spectrum(path: &Path) -> Result<Vec<f64>> {
    let (header, rows) = read_table(path)?;
    expect_header(path, &header, &SPECTRUM_HEADER)?;
    rows.iter()
        .enumerate()
        .map(|(i, r)| {
            if r[0] != (i + 1).to_string() {
                return Err(Error::Format(format!("spectrum index {:?} out of order", r[0])));
            }
            parse_f64(&r[1], "eigenvalue")
        })
        .collect()
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    Ok(serde_json::from_reader(BufReader::new(File::open(path)?))?)
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    version: String,
    network: NetworkConfig,
    feature_map: FeatureMap,
    seed: u64,
    epoch: usize,
    param_count: usize,
}

pub fn write_checkpoint_binary(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let header = serde_json::to_vec(&CheckpointHeader {
        version: crate::trainer::ARTIFACT_VERSION.to_string(),
        network: ckpt.network,
        feature_map: ckpt.feature_map,
        seed: ckpt.seed,
        epoch: ckpt.epoch,
        param_count: ckpt.params.len(),
    })?;
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&(header.len() as u64).to_le_bytes())?;
    w.write_all(&header)?;
    for p in &ckpt.params {
        w.write_all(&p.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_checkpoint_text(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    write_json(path, ckpt)
}

/// Reads either checkpoint form, detected by the magic bytes.
pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut bytes = Vec::new();
    File::open(path)?.read_to_end(&mut bytes)?;
    if !bytes.starts_with(CHECKPOINT_MAGIC) {
        return Ok(serde_json::from_slice(&bytes)?);
    }
    let truncated = || Error::Format(format!("{}: truncated checkpoint", path.display()));
    let len_bytes: [u8; 8] = bytes.get(8..16).ok_or_else(truncated)?.try_into().unwrap();
    let hlen = u64::from_le_bytes(len_bytes) as usize;
    let header: CheckpointHeader = serde_json::from_slice(bytes.get(16..16 + hlen).ok_or_else(truncated)?)?;
    let body = &bytes[16 + hlen..];
    if body.len() != header.param_count * 8 {
        return Err(Error::Format(format!(
            "{}: expected {} parameters, found {} bytes",
            path.display(),
            header.param_count,
            body.len()
        )));
    }
    let params = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(Checkpoint {
        network: header.network,
        feature_map: header.feature_map,
        seed: header.seed,
        epoch: header.epoch,
        params,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{Activation, Network};
    use crate::problems::{ProblemKind, VariationalProblem};

    #[test]
    fn floats_round_trip_exactly() {
        for v in [0.1, 1.0 / 3.0, -2.5e-300, f64::MAX, 5e-324, 0.0] {
            assert_eq!(fmt_f64(v).parse::<f64>().unwrap().to_bits(), v.to_bits());
        }
    }

    #[test]
    fn history_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("loss_history.csv");
        let hist: Vec<LossRecord> = (0..5)
            .map(|k| LossRecord {
                epoch: k * 10,
                loss: 1.0 / (k as f64 + 3.0),
                energy: 0.0,
                penalty: 0.0,
            })
            .collect();
        write_loss_history(&path, &hist).unwrap();
        let back = read_loss_history(&path).unwrap();
        assert_eq!(back, hist.iter().map(|r| (r.epoch, r.loss)).collect::<Vec<_>>());
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("epoch,loss\n0,"));
    }

    #[test]
    fn field_and_spectrum_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = NetworkConfig::new(6, 2, 8, Activation::SmoothSqrt { rho: 0.1 });
        let net = Network::init(&cfg, 1).unwrap();
        let prob = VariationalProblem::new(ProblemKind::Twin2DReg).with_eps(0.01);
        let grid =
            crate::diagnostics::evaluate_grid(&net, &FeatureMap::Fourier2DPlusIdentity { i: 1 }, &prob, 7).unwrap();
        let path = dir.path().join("fields.csv");
        write_field_grid(&path, &grid).unwrap();
        assert_eq!(read_field_grid(&path).unwrap(), grid);

        let ev = vec![3.5, 1.25, 1e-17, -2e-20];
        let path = dir.path().join("spectrum.csv");
        write_spectrum(&path, &ev).unwrap();
        assert_eq!(read_spectrum(&path).unwrap(), ev);
    }

    #[test]
    fn checkpoints_round_trip_in_both_forms() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = NetworkConfig::new(2, 3, 8, Activation::Relu);
        let net = Network::init(&cfg, 9).unwrap();
        let ckpt = Checkpoint::capture(&net, &cfg, &FeatureMap::Fourier1D { i: 3 }, 9, 1234);
        let bin = dir.path().join("c.bin");
        let txt = dir.path().join("c.json");
        write_checkpoint_binary(&bin, &ckpt).unwrap();
        write_checkpoint_text(&txt, &ckpt).unwrap();
        assert_eq!(read_checkpoint(&bin).unwrap(), ckpt);
        assert_eq!(read_checkpoint(&txt).unwrap(), ckpt);
        assert_eq!(
            read_checkpoint(&bin).unwrap().restore().unwrap().to_flat(),
            net.to_flat()
        );
        // Parameters follow the header as raw little-endian doubles.
        let bytes = std::fs::read(&bin).unwrap();
        let tail = &bytes[bytes.len() - 8..];
        assert_eq!(
            f64::from_le_bytes(tail.try_into().unwrap()),
            *ckpt.params.last().unwrap()
        );
    }

    #[test]
    fn malformed_tables_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        std::fs::write(&path, "epoch,loss\n1,2,3\n").unwrap();
        assert!(matches!(read_loss_history(&path), Err(Error::Format(_))));
        std::fs::write(&path, "k,lambda\n2,1.0\n").unwrap();
        assert!(matches!(read_spectrum(&path), Err(Error::Format(_))));
    }
}
