//! Model checkpoint format (`DXRM`), all integers little-endian:
//!
//! ```text
//! "DXRM" | version u32 | input_width u32 | kernel u32 | pool u32 | padding u32 | seed u64
//! | tensor_count u32 | tensors...
//! | has_optimizer u8 [| step u64 | m tensors... | v tensors...]
//! tensor := rank u32 | dims u32 * rank | values f64 * prod(dims)
//! ```
//!
//! Tensors follow [`PARAM_NAMES`](super::PARAM_NAMES) order.

use std::path::Path;

use super::{AdamState, Architecture, Network, NnError, PoolPadding, Result, Tensor};

const MAGIC: &[u8; 4] = b"DXRM";
const VERSION: u32 = 1;

/// A saved network plus optional optimizer state for exact resume.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub network: Network,
    pub optimizer: Option<AdamState>,
}

fn corrupt(msg: impl Into<String>) -> NnError {
    NnError::Checkpoint(msg.into())
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| corrupt("value does not fit in 32 bits"))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_tensor(out: &mut Vec<u8>, t: &Tensor) -> Result<()> {
    put_u32(out, t.shape().len())?;
    for &d in t.shape() {
        put_u32(out, d)?;
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(())
}

pub fn encode_checkpoint(net: &Network, optimizer: Option<&AdamState>) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(8 * net.param_count() + 64);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    put_u32(&mut out, net.arch.input_width)?;
    put_u32(&mut out, net.arch.kernel_size)?;
    put_u32(&mut out, net.arch.pool_size)?;
    out.extend_from_slice(&net.arch.pool_padding.code().to_le_bytes());
    out.extend_from_slice(&net.seed.to_le_bytes());
    let params = net.params();
    put_u32(&mut out, params.len())?;
    for t in params {
        put_tensor(&mut out, t)?;
    }
    match optimizer {
        None => out.push(0),
        Some(state) => {
            out.push(1);
            out.extend_from_slice(&state.step.to_le_bytes());
            for t in state.m.iter().chain(&state.v) {
                put_tensor(&mut out, t)?;
            }
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() < n {
            return Err(corrupt("unexpected end of checkpoint"));
        }
        let (head, rest) = self.buf.split_at(n);
        self.buf = rest;
        Ok(head)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn tensor(&mut self) -> Result<Tensor> {
        let rank = self.u32()? as usize;
        if rank > 8 {
            return Err(corrupt(format!("implausible tensor rank {rank}")));
        }
        let shape = (0..rank).map(|_| self.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let len = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .filter(|&n| n.checked_mul(8).is_some_and(|b| b <= self.buf.len()))
            .ok_or_else(|| corrupt("tensor larger than the remaining checkpoint"))?;
        let data = self
            .take(len * 8)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Tensor::from_vec(shape, data))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { buf: bytes };
    if r.take(4)? != MAGIC {
        return Err(corrupt("bad magic, expected DXRM"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(corrupt(format!("unsupported version {version}")));
    }
    let input_width = r.u32()? as usize;
    let kernel_size = r.u32()? as usize;
    let pool_size = r.u32()? as usize;
    let padding = r.u32()?;
    let pool_padding =
        PoolPadding::from_code(padding).ok_or_else(|| corrupt(format!("unknown padding code {padding}")))?;
    let seed = r.u64()?;
    let count = r.u32()? as usize;
    if count != 8 {
        return Err(corrupt(format!("expected 8 tensors, found {count}")));
    }
    let tensors = (0..count).map(|_| r.tensor()).collect::<Result<Vec<_>>>()?;

    let conv1_shape = tensors[0].shape();
    let conv2_shape = tensors[2].shape();
    let dense1_shape = tensors[4].shape();
    if conv1_shape.len() != 3 || conv2_shape.len() != 3 || dense1_shape.len() != 2 {
        return Err(corrupt("unexpected tensor ranks"));
    }
    let arch = Architecture {
        input_width,
        kernel_size,
        pool_size,
        filters: [conv1_shape[0], conv2_shape[0]],
        hidden: dense1_shape[0],
        pool_padding,
    };
    let mut network = Network::zeros(arch)?;
    network.seed = seed;
    for (slot, t) in network.params_mut().into_iter().zip(tensors) {
        if slot.shape() != t.shape() {
            return Err(NnError::ShapeMismatch { expected: slot.shape().to_vec(), found: t.shape().to_vec() });
        }
        *slot = t;
    }

    let optimizer = match r.u8()? {
        0 => None,
        1 => {
            let step = r.u64()?;
            let mut moments = (0..16).map(|_| r.tensor()).collect::<Result<Vec<_>>>()?;
            let v = moments.split_off(8);
            let state = AdamState { step, m: moments, v };
            for (p, (m, v)) in network.params().iter().zip(state.m.iter().zip(&state.v)) {
                if p.shape() != m.shape() || p.shape() != v.shape() {
                    return Err(corrupt("optimizer state shape mismatch"));
                }
            }
            Some(state)
        }
        other => return Err(corrupt(format!("bad optimizer flag {other}"))),
    };
    if !r.buf.is_empty() {
        return Err(corrupt(format!("{} trailing bytes", r.buf.len())));
    }
    Ok(Checkpoint { network, optimizer })
}

pub fn write_checkpoint(path: impl AsRef<Path>, net: &Network, optimizer: Option<&AdamState>) -> Result<()> {
    std::fs::write(path, encode_checkpoint(net, optimizer)?)?;
    Ok(())
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    decode_checkpoint(&std::fs::read(path)?)
}
