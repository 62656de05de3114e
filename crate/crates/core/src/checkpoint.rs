//! Versioned binary checkpoint container: a small header (magic, version,
//! architecture fingerprint, model spec JSON) followed by a named-tensor
//! index with little-endian IEEE-754 payloads. Optimizer state rides along
//! under `opt.`-prefixed names.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{config_err, data_err, CoreError, Result};
use crate::graph::Graph;
use crate::layers::ParamSet;
use crate::models::{fingerprint, ModelSpec};
use crate::optim::Adam;
use crate::tensor::{Scalar, Tensor};

const MAGIC: &[u8; 8] = b"ECHOCKPT";
const FORMAT_VERSION: u32 = 1;
/// Refuse absurd element counts before allocating.
const MAX_TENSOR_ELEMS: u64 = 1 << 33;

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub spec: ModelSpec,
    pub fingerprint: String,
    tensors: BTreeMap<String, (Vec<usize>, Vec<f64>)>,
}

impl Checkpoint {
    pub fn new(spec: ModelSpec) -> Checkpoint {
        let fingerprint = fingerprint(&spec);
        Checkpoint { spec, fingerprint, tensors: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: &str, shape: Vec<usize>, data: Vec<f64>) -> Result<()> {
        if shape.iter().product::<usize>() != data.len() {
            return config_err(format!(
                "tensor '{name}' shape {shape:?} does not hold {} values",
                data.len()
            ));
        }
        if self.tensors.insert(name.to_string(), (shape, data)).is_some() {
            return config_err(format!("tensor '{name}' stored twice"));
        }
        Ok(())
    }

    pub fn tensor(&self, name: &str) -> Option<(&[usize], &[f64])> {
        self.tensors.get(name).map(|(s, d)| (s.as_slice(), d.as_slice()))
    }

    pub fn tensor_names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn has_optimizer_state(&self) -> bool {
        self.tensors.contains_key("opt.steps")
    }

    /// Error unless the checkpoint was produced by exactly this model spec.
    pub fn ensure_matches(&self, spec: &ModelSpec) -> Result<()> {
        let want = fingerprint(spec);
        if self.fingerprint != want {
            return data_err(format!(
                "checkpoint fingerprint {} does not match the requested model ({want})",
                self.fingerprint
            ));
        }
        Ok(())
    }

    /// Store every registered parameter under its registered name.
    pub fn capture_params<T: Scalar>(&mut self, graph: &Graph<T>, params: &ParamSet) -> Result<()> {
        for (name, var) in params.entries() {
            let t = graph.value(var);
            self.insert(name, t.shape().to_vec(), t.cast::<f64>().into_data())?;
        }
        Ok(())
    }

    /// Store Adam moments (aligned with parameter registration order) plus
    /// the step counter.
    pub fn capture_optimizer<T: Scalar>(
        &mut self,
        params: &ParamSet,
        opt: &Adam<T>,
    ) -> Result<()> {
        let (m, v) = opt.moments();
        if m.len() != params.len() {
            return config_err(format!(
                "optimizer tracks {} buffers but the model has {} parameters",
                m.len(),
                params.len()
            ));
        }
        for (i, (name, _)) in params.entries().enumerate() {
            let shape = vec![m[i].len()];
            let to_f64 = |buf: &[T]| buf.iter().map(|x| Scalar::to_f64(*x)).collect::<Vec<f64>>();
            self.insert(&format!("opt.m.{name}"), shape.clone(), to_f64(&m[i]))?;
            self.insert(&format!("opt.v.{name}"), shape, to_f64(&v[i]))?;
        }
        self.insert("opt.steps", vec![1], vec![opt.steps() as f64])?;
        Ok(())
    }

    /// Write stored values back onto a freshly built model's parameters.
    /// Every registered parameter must be present with a matching shape.
    pub fn restore_params<T: Scalar>(&self, graph: &mut Graph<T>, params: &ParamSet) -> Result<()> {
        for (name, var) in params.entries() {
            let (shape, data) = self.tensor(name).ok_or(()).or_else(|_| {
                data_err(format!("checkpoint is missing parameter '{name}'"))
            })?;
            if shape != graph.value(var).shape() {
                return data_err(format!(
                    "parameter '{name}' stored as {shape:?} but the model wants {:?}",
                    graph.value(var).shape()
                ));
            }
            graph.set_value(var, Tensor::from_f64_slice(shape.to_vec(), data)?)?;
        }
        Ok(())
    }

    pub fn restore_optimizer<T: Scalar>(
        &self,
        params: &ParamSet,
        opt: &mut Adam<T>,
    ) -> Result<()> {
        let steps = self.tensor("opt.steps").ok_or(()).or_else(|_| {
            data_err("checkpoint holds no optimizer state")
        })?;
        let steps = steps.1[0] as u64;
        let mut m = Vec::with_capacity(params.len());
        let mut v = Vec::with_capacity(params.len());
        for (name, _) in params.entries() {
            for (prefix, out) in [("opt.m.", &mut m), ("opt.v.", &mut v)] {
                let key = format!("{prefix}{name}");
                let (_, data) = self.tensor(&key).ok_or(()).or_else(|_| {
                    data_err(format!("checkpoint is missing '{key}'"))
                })?;
                out.push(data.iter().map(|&x| T::from_f64(x)).collect::<Vec<T>>());
            }
        }
        opt.restore(steps, m, v)
    }

    pub fn write_to(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        write_bytes(&mut w, self.fingerprint.as_bytes())?;
        write_bytes(&mut w, serde_json::to_string(&self.spec)?.as_bytes())?;
        w.write_all(&(self.tensors.len() as u64).to_le_bytes())?;
        for (name, (shape, data)) in &self.tensors {
            write_bytes(&mut w, name.as_bytes())?;
            w.write_all(&(shape.len() as u64).to_le_bytes())?;
            for &d in shape {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            let mut bytes = Vec::with_capacity(data.len() * 8);
            for x in data {
                bytes.extend_from_slice(&x.to_le_bytes());
            }
            w.write_all(&bytes)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_from(path: &Path) -> Result<Checkpoint> {
        let file = File::open(path)
            .map_err(|e| CoreError::Data(format!("checkpoint {}: {e}", path.display())))?;
        let mut r = BufReader::new(file);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return data_err("not a checkpoint file (bad magic)");
        }
        let mut ver = [0u8; 4];
        r.read_exact(&mut ver)?;
        let version = u32::from_le_bytes(ver);
        if version != FORMAT_VERSION {
            return data_err(format!("unsupported checkpoint format version {version}"));
        }
        let stored_fp = String::from_utf8(read_bytes(&mut r)?)
            .map_err(|_| ())
            .or_else(|_| data_err("fingerprint is not valid utf-8"))?;
        let spec_json = String::from_utf8(read_bytes(&mut r)?)
            .map_err(|_| ())
            .or_else(|_| data_err("model spec is not valid utf-8"))?;
        let spec: ModelSpec = serde_json::from_str(&spec_json)?;
        if fingerprint(&spec) != stored_fp {
            return data_err("checkpoint fingerprint does not match its own model spec");
        }
        let count = read_u64(&mut r)?;
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let name = String::from_utf8(read_bytes(&mut r)?)
                .map_err(|_| ())
                .or_else(|_| data_err("tensor name is not valid utf-8"))?;
            let rank = read_u64(&mut r)? as usize;
            if rank > 8 {
                return data_err(format!("tensor '{name}' claims rank {rank}"));
            }
            let mut shape = Vec::with_capacity(rank);
            let mut numel = 1u64;
            for _ in 0..rank {
                let d = read_u64(&mut r)?;
                numel = numel.saturating_mul(d.max(1));
                shape.push(d as usize);
            }
            if numel > MAX_TENSOR_ELEMS {
                return data_err(format!("tensor '{name}' is implausibly large"));
            }
            let numel = shape.iter().product::<usize>();
            let mut bytes = vec![0u8; numel * 8];
            r.read_exact(&mut bytes)?;
            let data = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect::<Vec<f64>>();
            if tensors.insert(name.clone(), (shape, data)).is_some() {
                return data_err(format!("tensor '{name}' appears twice"));
            }
        }
        Ok(Checkpoint { spec, fingerprint: stored_fp, tensors })
    }
}

fn write_bytes<W: Write>(w: &mut W, bytes: &[u8]) -> Result<()> {
    w.write_all(&(bytes.len() as u64).to_le_bytes())?;
    w.write_all(bytes)?;
    Ok(())
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

fn read_bytes<R: Read>(r: &mut R) -> Result<Vec<u8>> {
    let len = read_u64(r)?;
    if len > 1 << 20 {
        return data_err("unreasonably long string field");
    }
    let mut buf = vec![0u8; len as usize];
    r.read_exact(&mut buf)?;
    Ok(buf)
}
