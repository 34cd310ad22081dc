//! Binary model container.
//!
//! Layout (little-endian): magic `LFNT`, `u16` version, `u8` architecture
//! kind, `u8` fusion, seven `u32` spec fields, `u32` node count, then one
//! record per node in topological order: `u32` node id, `u8` tensor count,
//! and per tensor a `u8` rank, `rank × u32` dims and the `f32` data.

use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::lattice::{ArchSpec, Fusion, LatticeSpec, PlainSpec};
use crate::model::{NetworkModel, NodeParams};
use crate::tensor::{BatchNormParams, ConvParams, Scalar, Shape, Tensor};

pub const MAGIC: [u8; 4] = *b"LFNT";
pub const FORMAT_VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum PersistError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("not a model file (magic {0:?})")]
    BadMagic([u8; 4]),
    #[error("unsupported model format version {found} (this build reads version {FORMAT_VERSION})")]
    UnsupportedVersion { found: u16 },
    #[error("model file truncated: needed {needed} bytes at offset {offset}, {available} available")]
    Truncated {
        offset: usize,
        needed: usize,
        available: usize,
    },
    #[error("corrupt model file: {0}")]
    Corrupt(String),
}

type Result<T> = std::result::Result<T, PersistError>;

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u16(&mut self, v: u16) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u32(&mut self, v: usize) {
        let v = u32::try_from(v).expect("dimension fits in u32");
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn tensor<T: Scalar>(&mut self, dims: &[usize], data: &[T]) {
        self.u8(dims.len() as u8);
        for &d in dims {
            self.u32(d);
        }
        for v in data {
            let x = v.as_f64() as f32;
            self.0.extend_from_slice(&x.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let available = self.bytes.len() - self.pos;
        if n > available {
            return Err(PersistError::Truncated {
                offset: self.pos,
                needed: n,
                available,
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }
    fn tensor(&mut self) -> Result<(Vec<usize>, Vec<f32>)> {
        let rank = self.u8()? as usize;
        let dims = (0..rank).map(|_| self.u32()).collect::<Result<Vec<_>>>()?;
        let count = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| PersistError::Corrupt("tensor size overflows".into()))?;
        let bytes_needed = count
            .checked_mul(4)
            .ok_or_else(|| PersistError::Corrupt("tensor size overflows".into()))?;
        let raw = self.take(bytes_needed)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok((dims, data))
    }
}

/// Serialize `model`; parameters are stored as `f32`.
pub fn encode_model<T: Scalar>(model: &NetworkModel<T>) -> Vec<u8> {
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(&MAGIC);
    w.u16(FORMAT_VERSION);
    match model.arch() {
        ArchSpec::Lattice(s) => {
            w.u8(0);
            w.u8(match s.fusion {
                Fusion::Concat => 0,
                Fusion::Sum => 1,
            });
            for v in [s.rows, s.cols, s.filters, 0, s.kernel_size, s.in_channels, s.out_channels] {
                w.u32(v);
            }
        }
        ArchSpec::Plain(s) => {
            w.u8(1);
            w.u8(0);
            for v in [
                s.layers,
                s.wide_prefix,
                s.filters,
                s.wide_filters,
                s.kernel_size,
                s.in_channels,
                s.out_channels,
            ] {
                w.u32(v);
            }
        }
    }
    let order = model.topology().validate().expect("model topology is valid");
    w.u32(order.len());
    for id in order {
        let p = &model.nodes[id];
        w.u32(id);
        w.u8(if p.bn.is_some() { 7 } else { 2 });
        w.tensor(&p.conv.weights.shape().dims(), p.conv.weights.data());
        w.tensor(&[p.conv.bias.len()], &p.conv.bias);
        if let Some(bn) = &p.bn {
            let c = bn.channels();
            for v in [&bn.gamma, &bn.beta, &bn.running_mean, &bn.running_var] {
                w.tensor(&[c], v);
            }
            w.tensor(&[1], &[bn.epsilon]);
            w.tensor(&[1], &[bn.momentum]);
        }
    }
    w.0
}

fn corrupt(msg: impl Into<String>) -> PersistError {
    PersistError::Corrupt(msg.into())
}

pub fn decode_model(bytes: &[u8]) -> Result<NetworkModel<f32>> {
    let mut r = Reader { bytes, pos: 0 };
    let magic: [u8; 4] = match r.take(4) {
        Ok(m) => m.try_into().unwrap(),
        Err(_) => {
            let mut m = [0u8; 4];
            m[..bytes.len()].copy_from_slice(bytes);
            if bytes != &MAGIC[..bytes.len()] {
                return Err(PersistError::BadMagic(m));
            }
            return Err(PersistError::Truncated {
                offset: 0,
                needed: 4,
                available: bytes.len(),
            });
        }
    };
    if magic != MAGIC {
        return Err(PersistError::BadMagic(magic));
    }
    let version = r.u16()?;
    if version != FORMAT_VERSION {
        return Err(PersistError::UnsupportedVersion { found: version });
    }
    let kind = r.u8()?;
    let fusion = match r.u8()? {
        0 => Fusion::Concat,
        1 => Fusion::Sum,
        f => return Err(corrupt(format!("unknown fusion code {f}"))),
    };
    let mut f = [0usize; 7];
    for v in &mut f {
        *v = r.u32()?;
    }
    let arch = match kind {
        0 => ArchSpec::Lattice(LatticeSpec {
            rows: f[0],
            cols: f[1],
            filters: f[2],
            kernel_size: f[4],
            in_channels: f[5],
            out_channels: f[6],
            fusion,
        }),
        1 => ArchSpec::Plain(PlainSpec {
            layers: f[0],
            wide_prefix: f[1],
            filters: f[2],
            wide_filters: f[3],
            kernel_size: f[4],
            in_channels: f[5],
            out_channels: f[6],
        }),
        k => return Err(corrupt(format!("unknown architecture kind {k}"))),
    };
    let topology = arch.build().map_err(|e| corrupt(format!("invalid spec header: {e}")))?;
    let order = topology.validate().map_err(|e| corrupt(e.to_string()))?;
    let count = r.u32()?;
    if count != order.len() {
        return Err(corrupt(format!("{count} node records for a {}-node network", order.len())));
    }
    let mut nodes: Vec<Option<NodeParams<f32>>> = vec![None; count];
    for &expected in &order {
        let id = r.u32()?;
        if id != expected {
            return Err(corrupt(format!("node record {id} out of order (expected {expected})")));
        }
        let n_tensors = r.u8()?;
        let (wdims, wdata) = r.tensor()?;
        let (_, bias) = r.tensor()?;
        if wdims.len() != 4 {
            return Err(corrupt(format!("node {id}: conv weights have rank {}", wdims.len())));
        }
        let weights = Tensor::from_vec(Shape::new(wdims[0], wdims[1], wdims[2], wdims[3]), wdata)
            .map_err(|e| corrupt(format!("node {id}: {e}")))?;
        let bn = match n_tensors {
            2 => None,
            7 => {
                let mut v = Vec::with_capacity(6);
                for _ in 0..6 {
                    v.push(r.tensor()?.1);
                }
                let scalar = |x: &Vec<f32>| x.first().copied().ok_or_else(|| corrupt(format!("node {id}: empty scalar")));
                Some(BatchNormParams {
                    gamma: v[0].clone(),
                    beta: v[1].clone(),
                    running_mean: v[2].clone(),
                    running_var: v[3].clone(),
                    epsilon: scalar(&v[4])?,
                    momentum: scalar(&v[5])?,
                })
            }
            n => return Err(corrupt(format!("node {id}: {n} tensors"))),
        };
        nodes[id] = Some(NodeParams {
            conv: ConvParams { weights, bias },
            bn,
        });
    }
    if r.pos != bytes.len() {
        return Err(corrupt(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    let nodes = nodes.into_iter().map(|n| n.expect("every node read")).collect();
    NetworkModel::from_parts(arch, nodes).map_err(|e| corrupt(e.to_string()))
}

pub fn save_model<T: Scalar>(model: &NetworkModel<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_model(model)).map_err(|source| PersistError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_model(path: impl AsRef<Path>) -> Result<NetworkModel<f32>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|source| PersistError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    decode_model(&bytes)
}
