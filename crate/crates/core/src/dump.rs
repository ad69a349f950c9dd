//! Tensor-dump interchange format: the ingestion path for K/V payloads.
//!
//! Layout: magic "LXTD", version u16, dtype u8 (0 = f32, 1 = f16), n_dims
//! u8, dims u32 x n_dims, packed values, little-endian throughout. The dims
//! convention is (layer, role, token, head, head_dim); singleton axes are
//! fine. Values are held as f32 in memory regardless of the stored dtype.

use std::io::{Read, Write};
use std::path::Path;

use half::f16;

use crate::error::{Error, Result};
use crate::tensor::DenseMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DumpDtype {
    F32,
    F16,
}

impl DumpDtype {
    fn code(self) -> u8 {
        match self {
            DumpDtype::F32 => 0,
            DumpDtype::F16 => 1,
        }
    }

    fn from_code(c: u8) -> Result<Self> {
        match c {
            0 => Ok(DumpDtype::F32),
            1 => Ok(DumpDtype::F16),
            other => Err(Error::Corrupt(format!("unknown dump dtype {other}"))),
        }
    }

    fn size(self) -> usize {
        match self {
            DumpDtype::F32 => 4,
            DumpDtype::F16 => 2,
        }
    }
}

/// In-memory tensor dump with dims (layer, role, token, head, head_dim).
#[derive(Debug, Clone)]
pub struct TensorDump {
    pub dtype: DumpDtype,
    pub dims: [u32; 5],
    data: Vec<f32>,
}

impl TensorDump {
    pub fn new(dtype: DumpDtype, dims: [u32; 5], data: Vec<f32>) -> Result<Self> {
        let expected: u64 = dims.iter().map(|d| *d as u64).product();
        if dims.contains(&0) {
            return Err(Error::InvalidInput("dump dims must be positive".into()));
        }
        if data.len() as u64 != expected {
            return Err(Error::Dimension(format!(
                "payload {} values != dims product {expected}",
                data.len()
            )));
        }
        if let Some(bad) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "non-finite value at flat index {bad}"
            )));
        }
        Ok(Self { dtype, dims, data })
    }

    pub fn layers(&self) -> usize {
        self.dims[0] as usize
    }

    pub fn roles(&self) -> usize {
        self.dims[1] as usize
    }

    pub fn tokens(&self) -> usize {
        self.dims[2] as usize
    }

    pub fn heads(&self) -> usize {
        self.dims[3] as usize
    }

    pub fn head_dim(&self) -> usize {
        self.dims[4] as usize
    }

    fn offset(&self, layer: usize, role: usize, token: usize, head: usize) -> usize {
        (((layer * self.roles() + role) * self.tokens() + token) * self.heads() + head)
            * self.head_dim()
    }

    /// Token-ordered rows of one (layer, role, head) stream.
    pub fn rows_for(&self, layer: usize, role: usize, head: usize) -> Result<DenseMatrix> {
        if layer >= self.layers() || role >= self.roles() || head >= self.heads() {
            return Err(Error::Dimension(format!(
                "(layer {layer}, role {role}, head {head}) outside dump dims {:?}",
                self.dims
            )));
        }
        let m = self.head_dim();
        let mut data = Vec::with_capacity(self.tokens() * m);
        for token in 0..self.tokens() {
            let off = self.offset(layer, role, token, head);
            data.extend_from_slice(&self.data[off..off + m]);
        }
        DenseMatrix::new(data, self.tokens(), m)
    }

    /// All (token, head) rows of one (layer, role), token-major: training
    /// samples for that layer's dictionary.
    pub fn samples_for(&self, layer: usize, role: usize) -> Result<DenseMatrix> {
        if layer >= self.layers() || role >= self.roles() {
            return Err(Error::Dimension(format!(
                "(layer {layer}, role {role}) outside dump dims {:?}",
                self.dims
            )));
        }
        let m = self.head_dim();
        let rows = self.tokens() * self.heads();
        let mut data = Vec::with_capacity(rows * m);
        for token in 0..self.tokens() {
            for head in 0..self.heads() {
                let off = self.offset(layer, role, token, head);
                data.extend_from_slice(&self.data[off..off + m]);
            }
        }
        DenseMatrix::new(data, rows, m)
    }

    /// Assemble a dump from per-(layer, role, head) token-major matrices,
    /// indexed `[layer][role][head]`.
    pub fn from_streams(dtype: DumpDtype, streams: &[Vec<Vec<DenseMatrix>>]) -> Result<Self> {
        let layers = streams.len();
        let roles = streams.first().map(|l| l.len()).unwrap_or(0);
        let heads = streams
            .first()
            .and_then(|l| l.first())
            .map(|r| r.len())
            .unwrap_or(0);
        let first = streams
            .first()
            .and_then(|l| l.first())
            .and_then(|r| r.first())
            .ok_or_else(|| Error::InvalidInput("empty dump".into()))?;
        let tokens = first.rows();
        let m = first.cols();
        let mut data = Vec::with_capacity(layers * roles * tokens * heads * m);
        for layer in streams {
            if layer.len() != roles {
                return Err(Error::Dimension("ragged role axis".into()));
            }
            for role in layer {
                if role.len() != heads {
                    return Err(Error::Dimension("ragged head axis".into()));
                }
                for hm in role {
                    if hm.rows() != tokens || hm.cols() != m {
                        return Err(Error::Dimension("ragged token/head_dim axes".into()));
                    }
                }
                for token in 0..tokens {
                    for hm in role {
                        data.extend_from_slice(hm.row(token));
                    }
                }
            }
        }
        Self::new(
            dtype,
            [
                layers as u32,
                roles as u32,
                tokens as u32,
                heads as u32,
                m as u32,
            ],
            data,
        )
    }

    // ---- io -----------------------------------------------------------------

    const MAGIC: &'static [u8; 4] = b"LXTD";
    const VERSION: u16 = 1;

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(Self::MAGIC)?;
        w.write_all(&Self::VERSION.to_le_bytes())?;
        w.write_all(&[self.dtype.code(), 5u8])?;
        for d in &self.dims {
            w.write_all(&d.to_le_bytes())?;
        }
        match self.dtype {
            DumpDtype::F32 => {
                let mut buf = Vec::with_capacity(self.data.len() * 4);
                for v in &self.data {
                    buf.extend_from_slice(&v.to_le_bytes());
                }
                w.write_all(&buf)?;
            }
            DumpDtype::F16 => {
                let mut buf = Vec::with_capacity(self.data.len() * 2);
                for v in &self.data {
                    buf.extend_from_slice(&f16::from_f32(*v).to_le_bytes());
                }
                w.write_all(&buf)?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != Self::MAGIC {
            return Err(Error::Corrupt("bad dump magic".into()));
        }
        let mut v = [0u8; 2];
        r.read_exact(&mut v)?;
        if u16::from_le_bytes(v) != Self::VERSION {
            return Err(Error::Corrupt("unsupported dump version".into()));
        }
        let mut hdr = [0u8; 2];
        r.read_exact(&mut hdr)?;
        let dtype = DumpDtype::from_code(hdr[0])?;
        if hdr[1] != 5 {
            return Err(Error::Corrupt(format!(
                "expected 5 dims (layer, role, token, head, head_dim), got {}",
                hdr[1]
            )));
        }
        let mut dims = [0u32; 5];
        for d in &mut dims {
            let mut b = [0u8; 4];
            r.read_exact(&mut b)?;
            *d = u32::from_le_bytes(b);
        }
        let count: u64 = dims.iter().map(|d| *d as u64).product();
        if count > (1 << 31) {
            return Err(Error::Corrupt(format!("dump too large: {count} values")));
        }
        let mut payload = vec![0u8; count as usize * dtype.size()];
        r.read_exact(&mut payload)?;
        let mut trailing = [0u8; 1];
        if r.read(&mut trailing)? != 0 {
            return Err(Error::Corrupt("trailing bytes after dump payload".into()));
        }
        let data: Vec<f32> = match dtype {
            DumpDtype::F32 => payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect(),
            DumpDtype::F16 => payload
                .chunks_exact(2)
                .map(|c| f16::from_le_bytes([c[0], c[1]]).to_f32())
                .collect(),
        };
        Self::new(dtype, dims, data).map_err(|e| Error::Corrupt(format!("dump payload: {e}")))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut f)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        Self::read_from(&mut f)
    }
}

/// Build a two-role dump (keys and values) from independent mixture draws,
/// one head. The standard synthetic input for the command-line harness.
pub fn synthetic_dump(
    spec: &crate::analysis::SubspaceMixtureSpec,
    layers: usize,
) -> Result<TensorDump> {
    let mut streams = Vec::with_capacity(layers);
    for layer in 0..layers {
        let mut roles = Vec::with_capacity(2);
        for role in 0..2usize {
            let rows = crate::analysis::generate_subspace_mixture(
                &crate::analysis::SubspaceMixtureSpec {
                    seed: spec.seed.wrapping_add((layer * 2 + role) as u64),
                    ..*spec
                },
            )?;
            roles.push(vec![rows]);
        }
        streams.push(roles);
    }
    TensorDump::from_streams(DumpDtype::F32, &streams)
}
