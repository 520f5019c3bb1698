//! Binary weight files.
//!
//! Layout (all little-endian):
//!
//! ```text
//! "USGN"            4 bytes
//! version           u32
//! fingerprint       u64   FNV-1a of the layer spec string
//! parameter count   u64
//! statistic count   u64
//! parameters        f64 × parameter count, graph order (weights then bias / gamma then beta)
//! BN statistics     f64 × statistic count, per BN layer: running mean then running variance
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use super::{LayerGraph, LayerKind};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"USGN";
pub const CHECKPOINT_VERSION: u32 = 1;
pub(crate) const HEADER_BYTES: u64 = 32;

fn stat_count(graph: &LayerGraph) -> usize {
    graph.batchnorms().map(|bn| 2 * bn.channels).sum()
}

pub fn save_weights(graph: &LayerGraph, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let io = |e| Error::io(path, e);
    let mut out = BufWriter::new(File::create(path).map_err(io)?);
    write_weights(graph, &mut out).map_err(io)?;
    out.flush().map_err(io)
}

fn write_weights(graph: &LayerGraph, out: &mut impl Write) -> std::io::Result<()> {
    out.write_all(CHECKPOINT_MAGIC)?;
    out.write_u32::<LittleEndian>(CHECKPOINT_VERSION)?;
    out.write_u64::<LittleEndian>(graph.fingerprint())?;
    out.write_u64::<LittleEndian>(graph.param_count() as u64)?;
    out.write_u64::<LittleEndian>(stat_count(graph) as u64)?;
    for layer in graph.layers() {
        for p in layer.params() {
            for &v in &p.value {
                out.write_f64::<LittleEndian>(v)?;
            }
        }
    }
    for bn in graph.batchnorms() {
        for &v in bn.running_mean.iter().chain(&bn.running_var) {
            out.write_f64::<LittleEndian>(v)?;
        }
    }
    Ok(())
}

/// Restores parameters and BN running statistics into a graph of identical topology.
pub fn load_weights(graph: &mut LayerGraph, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut input = BufReader::new(file);
    let truncated = |_| Error::Checkpoint(format!("{}: truncated file", path.display()));

    let mut magic = [0u8; 4];
    input.read_exact(&mut magic).map_err(truncated)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint(format!("{}: bad magic {magic:?}", path.display())));
    }
    let version = input.read_u32::<LittleEndian>().map_err(truncated)?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let fingerprint = input.read_u64::<LittleEndian>().map_err(truncated)?;
    if fingerprint != graph.fingerprint() {
        return Err(Error::FingerprintMismatch {
            file: fingerprint,
            graph: graph.fingerprint(),
        });
    }
    let params = input.read_u64::<LittleEndian>().map_err(truncated)?;
    let stats = input.read_u64::<LittleEndian>().map_err(truncated)?;
    if params != graph.param_count() as u64 || stats != stat_count(graph) as u64 {
        return Err(Error::Checkpoint(format!(
            "payload sizes {params}/{stats} do not match graph {}/{}",
            graph.param_count(),
            stat_count(graph)
        )));
    }

    // Read into fresh buffers first so a truncated file leaves the graph untouched.
    let mut values = vec![0.0; params as usize];
    input.read_f64_into::<LittleEndian>(&mut values).map_err(truncated)?;
    let mut running = vec![0.0; stats as usize];
    input.read_f64_into::<LittleEndian>(&mut running).map_err(truncated)?;
    let mut rest = [0u8; 1];
    if input.read(&mut rest).map_err(|e| Error::io(path, e))? != 0 {
        return Err(Error::Checkpoint(format!("{}: trailing bytes", path.display())));
    }

    let mut values = values.into_iter();
    let mut running = running.into_iter();
    for layer in graph.layers_mut() {
        for p in layer.params_mut() {
            p.value
                .iter_mut()
                .for_each(|v| *v = values.next().expect("sized above"));
        }
    }
    for layer in graph.layers_mut() {
        if let LayerKind::BatchNorm(bn) = &mut layer.kind {
            for v in bn.running_mean.iter_mut().chain(bn.running_var.iter_mut()) {
                *v = running.next().expect("sized above");
            }
            bn.stats_ready = true;
        }
    }
    Ok(())
}

/// Byte size of a checkpoint for `graph`.
pub fn checkpoint_size(graph: &LayerGraph) -> u64 {
    HEADER_BYTES + 8 * (graph.param_count() + stat_count(graph)) as u64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{build_segnet, build_usegnet, NetConfig};
    use crate::tensor::{Mode, Shape, Tensor};

    fn input() -> Tensor {
        Tensor::from_fn(Shape::new(2, 3, 40, 40), |b, c, y, x| {
            ((b + 2 * c + 3 * y + 5 * x) % 11) as f64 / 11.0 - 0.5
        })
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.usgn");
        let mut g = build_usegnet(&NetConfig::reduced(8, 3));
        // populate running statistics with something other than defaults
        g.forward(&input(), Mode::Train).unwrap();
        save_weights(&g, &path).unwrap();
        assert_eq!(std::fs::metadata(&path).unwrap().len(), checkpoint_size(&g));

        let mut h = build_usegnet(&NetConfig::reduced(8, 99));
        load_weights(&mut h, &path).unwrap();
        assert_eq!(g, h);
        let a = g.predict(&input()).unwrap();
        let b = h.predict(&input()).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn size_is_eight_bytes_per_value_plus_header() {
        let g = build_segnet(&NetConfig::default());
        assert_eq!(checkpoint_size(&g), 32 + 8 * (3_475_396 + 4_096));
    }

    #[test]
    fn wrong_topology_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("seg.usgn");
        save_weights(&build_segnet(&NetConfig::reduced(8, 0)), &path).unwrap();
        let mut other = build_usegnet(&NetConfig::reduced(8, 0));
        assert!(matches!(
            load_weights(&mut other, &path),
            Err(Error::FingerprintMismatch { .. })
        ));
    }

    #[test]
    fn truncated_and_bad_magic_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.usgn");
        let g = build_segnet(&NetConfig::reduced(8, 0));
        save_weights(&g, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();

        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        let mut h = g.clone();
        let err = load_weights(&mut h, &path).unwrap_err();
        assert!(err.to_string().contains("truncated"), "{err}");
        assert_eq!(h, g);

        let mut bad = bytes.clone();
        bad[0] = b'X';
        std::fs::write(&path, &bad).unwrap();
        let err = load_weights(&mut h, &path).unwrap_err();
        assert!(err.to_string().contains("magic"), "{err}");
    }
}
