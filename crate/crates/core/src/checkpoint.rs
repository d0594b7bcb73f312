//! Binary checkpoints: parameters, batch-norm buffers and a metadata record.
//!
//! Layout (all integers little-endian `u64`): magic `SAGCKPT1`; parameter
//! count then records `(name length, UTF-8 name, rank, extents, f32 data)`;
//! buffer count then records of the same form; metadata as a length-prefixed
//! block of `key=value` lines.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Result, SagError};
use crate::model::{build_model_with_l2, BackboneConfig, DepthSet, TwoBranchModel};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SAGCKPT1";

#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointMeta {
    pub config: BackboneConfig,
    pub depths: DepthSet,
    pub l2_depths: DepthSet,
    pub epoch: usize,
    pub seed: u64,
    /// Dataset pixel mean used for preprocessing.
    pub mean: [f64; 3],
}

impl CheckpointMeta {
    pub fn for_model<T: Scalar>(model: &TwoBranchModel<T>, epoch: usize, mean: [f64; 3]) -> Self {
        CheckpointMeta {
            config: model.config().clone(),
            depths: model.depths(),
            l2_depths: model.l2_depths(),
            epoch,
            seed: model.seed(),
            mean,
        }
    }

    fn to_text(&self) -> String {
        let c = &self.config;
        let ch = c.stage_channels.map(|v| v.to_string()).join(",");
        format!(
            "channels={ch}\ninput={}x{}\nclasses={}\ndepths={}\nl2_depths={}\nepoch={}\nseed={}\nmean={:.9},{:.9},{:.9}\n",
            c.input_height,
            c.input_width,
            c.num_classes,
            self.depths,
            self.l2_depths,
            self.epoch,
            self.seed,
            self.mean[0],
            self.mean[1],
            self.mean[2]
        )
    }

    fn parse(text: &str) -> Result<Self> {
        let kv: BTreeMap<&str, &str> = text.lines().filter_map(|l| l.split_once('=')).collect();
        let get = |k: &str| kv.get(k).copied().ok_or_else(|| SagError::Format(format!("checkpoint metadata lacks {k}")));
        let bad = |k: &str| SagError::Format(format!("bad checkpoint metadata field {k}"));
        let nums = |k: &str| -> Result<Vec<f64>> {
            get(k)?.split([',', 'x']).map(|v| v.parse::<f64>().map_err(|_| bad(k))).collect()
        };
        let ch = nums("channels")?;
        let input = nums("input")?;
        let mean = nums("mean")?;
        if ch.len() != 4 || input.len() != 2 || mean.len() != 3 {
            return Err(bad("channels/input/mean"));
        }
        Ok(CheckpointMeta {
            config: BackboneConfig {
                stage_channels: [ch[0] as usize, ch[1] as usize, ch[2] as usize, ch[3] as usize],
                input_height: input[0] as usize,
                input_width: input[1] as usize,
                num_classes: get("classes")?.parse().map_err(|_| bad("classes"))?,
            },
            depths: get("depths")?.parse()?,
            l2_depths: get("l2_depths")?.parse()?,
            epoch: get("epoch")?.parse().map_err(|_| bad("epoch"))?,
            seed: get("seed")?.parse().map_err(|_| bad("seed"))?,
            mean: [mean[0], mean[1], mean[2]],
        })
    }
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_record<T: Scalar>(out: &mut Vec<u8>, name: &str, t: &Tensor<T>) {
    put_u64(out, name.len() as u64);
    out.extend_from_slice(name.as_bytes());
    put_u64(out, t.rank() as u64);
    for &d in t.shape() {
        put_u64(out, d as u64);
    }
    for &v in t.data() {
        out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
    }
}

pub fn encode_checkpoint<T: Scalar>(model: &TwoBranchModel<T>, meta: &CheckpointMeta) -> Vec<u8> {
    let mut out = CHECKPOINT_MAGIC.to_vec();
    put_u64(&mut out, model.store.len() as u64);
    for p in model.store.iter() {
        put_record(&mut out, &p.name, &p.value);
    }
    let buffers = model.buffers();
    put_u64(&mut out, buffers.len() as u64);
    for (name, t) in buffers {
        put_record(&mut out, &name, t);
    }
    let text = meta.to_text();
    put_u64(&mut out, text.len() as u64);
    out.extend_from_slice(text.as_bytes());
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| SagError::Format("checkpoint is truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self) -> Result<usize> {
        let v = self.u64()?;
        usize::try_from(v)
            .ok()
            .filter(|&v| v <= self.bytes.len())
            .ok_or_else(|| SagError::Format(format!("implausible length {v} in checkpoint")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.len()?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| SagError::Format("checkpoint name is not UTF-8".into()))
    }

    fn record(&mut self) -> Result<(String, Vec<usize>, Vec<f32>)> {
        let name = self.string()?;
        let rank = self.len()?;
        let shape = (0..rank).map(|_| self.len()).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let data = self
            .take(n.checked_mul(4).ok_or_else(|| SagError::Format("tensor too large".into()))?)?
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect();
        Ok((name, shape, data))
    }

    fn records(&mut self) -> Result<Vec<(String, Vec<usize>, Vec<f32>)>> {
        let n = self.len()?;
        (0..n).map(|_| self.record()).collect()
    }
}

fn assign<T: Scalar>(kind: &str, dst: Vec<(String, &mut Tensor<T>)>, src: Vec<(String, Vec<usize>, Vec<f32>)>) -> Result<()> {
    if dst.len() != src.len() {
        return Err(SagError::CheckpointMismatch(format!(
            "model has {} {kind} tensors, checkpoint has {}",
            dst.len(),
            src.len()
        )));
    }
    for ((name, t), (sname, shape, data)) in dst.into_iter().zip(src) {
        if name != sname || t.shape() != shape.as_slice() {
            return Err(SagError::CheckpointMismatch(format!(
                "{kind} {name} {:?} does not match checkpoint entry {sname} {shape:?}",
                t.shape()
            )));
        }
        *t = Tensor::new(&shape, data.into_iter().map(|v| T::lit(v as f64)).collect())?;
    }
    Ok(())
}

pub fn decode_checkpoint<T: Scalar>(bytes: &[u8]) -> Result<(TwoBranchModel<T>, CheckpointMeta)> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8)? != CHECKPOINT_MAGIC {
        return Err(SagError::Format("not a SAGCKPT1 checkpoint".into()));
    }
    let params = r.records()?;
    let buffers = r.records()?;
    let meta = CheckpointMeta::parse(&r.string()?)?;
    let mut model = build_model_with_l2(&meta.config, meta.depths, meta.l2_depths, meta.seed)?;
    let dst: Vec<(String, &mut Tensor<T>)> = model.store.iter_mut().map(|p| (p.name.clone(), &mut p.value)).collect();
    assign("parameter", dst, params)?;
    assign("buffer", model.buffers_mut(), buffers)?;
    Ok((model, meta))
}

pub fn save_checkpoint<T: Scalar>(model: &TwoBranchModel<T>, meta: &CheckpointMeta, path: &Path) -> Result<()> {
    fs::write(path, encode_checkpoint(model, meta))?;
    Ok(())
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<(TwoBranchModel<T>, CheckpointMeta)> {
    decode_checkpoint(&fs::read(path)?)
}
