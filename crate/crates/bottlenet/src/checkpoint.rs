//! Model checkpoints: "BNMD" magic, version, JSON graph header, then raw
//! little-endian f64 parameter blobs in layer order.

use crate::bottleneck::BottleneckConfig;
use crate::error::{Error, Result};
use crate::graph::{GraphSpec, NetworkGraph};
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"BNMD";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub graph: GraphSpec,
    /// Present when the graph carries an inserted bottleneck unit.
    pub bottleneck: Option<BottleneckConfig>,
}

pub fn save(graph: &NetworkGraph, bottleneck: Option<BottleneckConfig>, w: &mut impl Write) -> Result<()> {
    let header = CheckpointHeader {
        graph: graph.spec(),
        bottleneck,
    };
    let json = serde_json::to_vec(&header)?;
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(json.len() as u32).to_le_bytes())?;
    w.write_all(&json)?;
    for layer in &graph.layers {
        for blob in layer.param_blobs() {
            for v in blob {
                w.write_all(&v.to_le_bytes())?;
            }
        }
    }
    Ok(())
}

pub fn load(r: &mut impl Read) -> Result<(NetworkGraph, Option<BottleneckConfig>)> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::CorruptStream {
            offset: 0,
            reason: "bad BNMD magic".into(),
        });
    }
    let mut u32buf = [0u8; 4];
    r.read_exact(&mut u32buf)?;
    let version = u32::from_le_bytes(u32buf);
    if version != VERSION {
        return Err(Error::CorruptStream {
            offset: 4,
            reason: format!("unsupported checkpoint version {version}"),
        });
    }
    r.read_exact(&mut u32buf)?;
    let header_len = u32::from_le_bytes(u32buf) as usize;
    let mut json = vec![0u8; header_len];
    r.read_exact(&mut json)?;
    let header: CheckpointHeader = serde_json::from_slice(&json)?;
    let mut graph = NetworkGraph::build(&header.graph, 0)?;
    let mut f64buf = [0u8; 8];
    for layer in &mut graph.layers {
        for blob in layer.param_blobs_mut() {
            for v in blob.iter_mut() {
                r.read_exact(&mut f64buf).map_err(|_| Error::CorruptStream {
                    offset: 12 + header_len,
                    reason: "truncated parameter blob".into(),
                })?;
                *v = f64::from_le_bytes(f64buf);
            }
        }
    }
    Ok((graph, header.bottleneck))
}

pub fn save_file(graph: &NetworkGraph, bottleneck: Option<BottleneckConfig>, path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    save(graph, bottleneck, &mut f)
}

pub fn load_file(path: &Path) -> Result<(NetworkGraph, Option<BottleneckConfig>)> {
    let mut f = std::fs::File::open(path)?;
    load(&mut f)
}
