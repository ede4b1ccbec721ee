//! `.spmx` checkpoint container.
//!
//! Layout:
//!
//! ```text
//! "SPMX" | u32 LE version | u32 LE header length | header (UTF-8) | payload
//! ```
//!
//! The header has three sections. `[config]` echoes the [`ModelConfig`] as `key=value`
//! lines, `[state]` holds training progress (floats as hex bit patterns so they round
//! trip exactly) and `[tensors]` lists `name dtype d0xd1xd2xd3 offset bytes` entries.
//! The payload is the tensors' little-endian `f32` values in manifest order, packed
//! without gaps.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::autodiff::ParamStore;
use crate::error::{Error, Result};
use crate::mixing::parse_fraction;
use crate::model::{Model, ModelConfig};
use crate::tensor::{Element, Shape4, Tensor4};
use crate::train::{AdamW, EpochMetrics};

pub const MAGIC: &[u8; 4] = b"SPMX";
pub const VERSION: u32 = 1;

/// Training progress saved alongside the weights.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainState {
    /// Completed epochs.
    pub epoch: usize,
    pub total_steps: u64,
    pub best_acc: f64,
    pub history: Vec<EpochMetrics>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Shape4,
    pub data: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub state: TrainState,
    pub optimizer_step: Option<u64>,
    pub tensors: Vec<NamedTensor>,
}

const RUNNING_MEAN: &str = ".running_mean";
const RUNNING_VAR: &str = ".running_var";
const OPT_M: &str = "optim.m.";
const OPT_V: &str = "optim.v.";

fn to_f32<T: Element>(t: &Tensor4<T>) -> Vec<f32> {
    t.data().iter().map(|v| v.as_f64() as f32).collect()
}

fn channel_tensor<T: Element>(name: String, values: &[T]) -> NamedTensor {
    NamedTensor {
        name,
        shape: Shape4 {
            n: 1,
            c: values.len(),
            h: 1,
            w: 1,
        },
        data: values.iter().map(|v| v.as_f64() as f32).collect(),
    }
}

impl Checkpoint {
    /// Snapshot of a model, optionally with its optimizer, stored as `f32`.
    pub fn capture<T: Element>(model: &Model<T>, optimizer: Option<&AdamW<T>>, state: &TrainState) -> Self {
        let mut tensors = Vec::new();
        for (_, p) in model.params.iter() {
            tensors.push(NamedTensor {
                name: p.name.clone(),
                shape: p.value.shape(),
                data: to_f32(&p.value),
            });
        }
        for (name, norm) in model.norms() {
            tensors.push(channel_tensor(format!("{name}{RUNNING_MEAN}"), &norm.running_mean));
            tensors.push(channel_tensor(format!("{name}{RUNNING_VAR}"), &norm.running_var));
        }
        if let Some(opt) = optimizer {
            for (prefix, bufs) in [(OPT_M, opt.first_moments()), (OPT_V, opt.second_moments())] {
                for ((_, p), buf) in model.params.iter().zip(bufs) {
                    tensors.push(NamedTensor {
                        name: format!("{prefix}{}", p.name),
                        shape: buf.shape(),
                        data: to_f32(buf),
                    });
                }
            }
        }
        Self {
            config: model.config,
            state: state.clone(),
            optimizer_step: optimizer.map(|o| o.step_count()),
            tensors,
        }
    }

    fn tensor(&self, name: &str) -> Result<&NamedTensor> {
        self.tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| Error::Format(format!("checkpoint has no tensor '{name}'")))
    }

    fn tensor_as<T: Element>(&self, name: &str, shape: Shape4) -> Result<Tensor4<T>> {
        let t = self.tensor(name)?;
        if t.shape != shape {
            return Err(Error::Format(format!(
                "tensor '{name}' has shape {} in the checkpoint, model expects {shape}",
                t.shape
            )));
        }
        Tensor4::from_vec(shape, t.data.iter().map(|&v| T::from_f64_lossy(v as f64)).collect())
    }

    /// Fails with the list of differing fields when `config` is not the saved one.
    pub fn check_config(&self, config: &ModelConfig) -> Result<()> {
        let diffs: Vec<String> = self
            .config
            .fields()
            .into_iter()
            .zip(config.fields())
            .filter(|(a, b)| a.1 != b.1)
            .map(|(a, b)| format!("{}: checkpoint={} model={}", a.0, a.1, b.1))
            .collect();
        if diffs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(format!("checkpoint config mismatch: {}", diffs.join("; "))))
        }
    }

    /// Copies weights and running statistics into `model`; nothing is written unless
    /// every tensor is present with the right shape.
    pub fn restore_into<T: Element>(&self, model: &mut Model<T>) -> Result<()> {
        self.check_config(&model.config)?;
        let params: Vec<Tensor4<T>> = model
            .params
            .iter()
            .map(|(_, p)| self.tensor_as(&p.name, p.value.shape()))
            .collect::<Result<_>>()?;
        let stats: Vec<(Vec<T>, Vec<T>)> = model
            .norms()
            .iter()
            .map(|(name, n)| {
                let shape = Shape4 {
                    n: 1,
                    c: n.running_mean.len(),
                    h: 1,
                    w: 1,
                };
                let mean = self.tensor_as::<T>(&format!("{name}{RUNNING_MEAN}"), shape)?;
                let var = self.tensor_as::<T>(&format!("{name}{RUNNING_VAR}"), shape)?;
                Ok((mean.into_vec(), var.into_vec()))
            })
            .collect::<Result<_>>()?;
        for ((_, p), value) in model.params.iter_mut().zip(params) {
            p.value = value;
        }
        for ((_, n), (mean, var)) in model.norms_mut().iter_mut().zip(stats) {
            n.running_mean = mean;
            n.running_var = var;
        }
        Ok(())
    }

    /// Builds the saved model.
    pub fn to_model<T: Element>(&self) -> Result<Model<T>> {
        let mut model = Model::build(self.config, 0)?;
        self.restore_into(&mut model)?;
        Ok(model)
    }

    pub fn restore_optimizer<T: Element>(&self, params: &ParamStore<T>, opt: &mut AdamW<T>) -> Result<()> {
        let step = self
            .optimizer_step
            .ok_or_else(|| Error::Format("checkpoint holds no optimizer state".into()))?;
        let read = |prefix: &str| -> Result<Vec<Tensor4<T>>> {
            params
                .iter()
                .map(|(_, p)| self.tensor_as(&format!("{prefix}{}", p.name), p.value.shape()))
                .collect()
        };
        opt.set_state(step, read(OPT_M)?, read(OPT_V)?)
    }

    fn header(&self) -> String {
        let mut h = String::from("[config]\n");
        for (k, v) in self.config.fields() {
            let _ = writeln!(h, "{k}={v}");
        }
        h.push_str("[state]\n");
        let _ = writeln!(h, "epoch={}", self.state.epoch);
        let _ = writeln!(h, "total_steps={}", self.state.total_steps);
        let _ = writeln!(h, "best_acc={:016x}", self.state.best_acc.to_bits());
        if let Some(step) = self.optimizer_step {
            let _ = writeln!(h, "optimizer_step={step}");
        }
        for row in &self.state.history {
            let _ = writeln!(h, "metrics.{}={}", row.epoch, row.csv_row());
        }
        h.push_str("[tensors]\n");
        let mut offset = 0usize;
        for t in &self.tensors {
            let bytes = t.data.len() * 4;
            let [a, b, c, d] = t.shape.dims();
            let _ = writeln!(h, "{} f32 {a}x{b}x{c}x{d} {offset} {bytes}", t.name);
            offset += bytes;
        }
        h
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = self.header();
        let payload: usize = self.tensors.iter().map(|t| t.data.len() * 4).sum();
        let mut out = Vec::with_capacity(12 + header.len() + payload);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(header.as_bytes());
        for t in &self.tensors {
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let fmt = |msg: String| Error::Format(msg);
        if bytes.len() < 12 {
            return Err(fmt(format!("file of {} bytes is too short for the fixed header", bytes.len())));
        }
        if &bytes[..4] != MAGIC {
            return Err(fmt(format!("magic: expected \"SPMX\", found {:?}", &bytes[..4])));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(fmt(format!("version: expected {VERSION}, found {version}")));
        }
        let header_len = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
        let body = &bytes[12..];
        if header_len > body.len() {
            return Err(fmt(format!("header_len: {header_len} exceeds the {} bytes that follow", body.len())));
        }
        let header = std::str::from_utf8(&body[..header_len]).map_err(|_| fmt("header: not valid UTF-8".into()))?;
        let payload = &body[header_len..];

        let mut sections: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
        let mut current = None;
        for line in header.lines() {
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                if sections.insert(name, Vec::new()).is_some() {
                    return Err(fmt(format!("header: duplicate section [{name}]")));
                }
                current = Some(name);
            } else if let Some(sec) = current {
                sections.get_mut(sec).expect("inserted").push(line);
            } else if !line.is_empty() {
                return Err(fmt(format!("header: line '{line}' outside any section")));
            }
        }
        let section = |name: &str| {
            sections
                .get(name)
                .cloned()
                .ok_or_else(|| fmt(format!("header: missing section [{name}]")))
        };
        let key_values = |lines: Vec<&str>, what: &str| -> Result<Vec<(String, String)>> {
            lines
                .into_iter()
                .map(|l| {
                    l.split_once('=')
                        .map(|(k, v)| (k.to_string(), v.to_string()))
                        .ok_or_else(|| Error::Format(format!("{what}: malformed line '{l}'")))
                })
                .collect()
        };

        let config_map: BTreeMap<String, String> = key_values(section("config")?, "config")?.into_iter().collect();
        let config = config_from_fields(&config_map)?;

        let mut state = TrainState::default();
        let mut optimizer_step = None;
        for (k, v) in key_values(section("state")?, "state")? {
            let bad = || Error::Format(format!("state.{k}: cannot read '{v}'"));
            match k.as_str() {
                "epoch" => state.epoch = v.parse().map_err(|_| bad())?,
                "total_steps" => state.total_steps = v.parse().map_err(|_| bad())?,
                "best_acc" => state.best_acc = f64::from_bits(u64::from_str_radix(&v, 16).map_err(|_| bad())?),
                "optimizer_step" => optimizer_step = Some(v.parse().map_err(|_| bad())?),
                _ if k.starts_with("metrics.") => state.history.push(EpochMetrics::parse_csv_row(&v)?),
                _ => return Err(Error::Format(format!("state: unknown key '{k}'"))),
            }
        }

        let mut tensors = Vec::new();
        let mut expected_offset = 0usize;
        for line in section("tensors")? {
            let bad = |field: &str| Error::Format(format!("manifest entry '{line}': bad {field}"));
            let f: Vec<&str> = line.split(' ').collect();
            if f.len() != 5 {
                return Err(bad("field count"));
            }
            if f[1] != "f32" {
                return Err(bad("dtype"));
            }
            let dims: Vec<usize> = f[2].split('x').map(|d| d.parse()).collect::<Result<_, _>>().map_err(|_| bad("shape"))?;
            if dims.len() != 4 {
                return Err(bad("shape"));
            }
            let shape = Shape4::new(dims[0], dims[1], dims[2], dims[3]).map_err(|_| bad("shape"))?;
            let offset: usize = f[3].parse().map_err(|_| bad("offset"))?;
            let len: usize = f[4].parse().map_err(|_| bad("length"))?;
            if offset != expected_offset {
                return Err(bad("offset (entries must be contiguous and increasing)"));
            }
            if len != shape.numel() * 4 {
                return Err(bad("length (does not match shape)"));
            }
            let end = offset + len;
            if end > payload.len() {
                return Err(Error::Format(format!(
                    "payload: truncated ({} bytes, manifest needs {end})",
                    payload.len()
                )));
            }
            let data = payload[offset..end]
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
                .collect();
            tensors.push(NamedTensor {
                name: f[0].to_string(),
                shape,
                data,
            });
            expected_offset = end;
        }
        if expected_offset != payload.len() {
            return Err(Error::Format(format!(
                "payload: {} bytes present, manifest accounts for {expected_offset}",
                payload.len()
            )));
        }
        Ok(Self {
            config,
            state,
            optimizer_step,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// Rebuilds a [`ModelConfig`] from the `key=value` echo written by [`ModelConfig::fields`].
pub fn config_from_fields(map: &BTreeMap<String, String>) -> Result<ModelConfig> {
    let get = |k: &str| {
        map.get(k)
            .map(String::as_str)
            .ok_or_else(|| Error::Format(format!("config: missing key '{k}'")))
    };
    let num = |k: &str| -> Result<usize> {
        get(k)?
            .parse()
            .map_err(|_| Error::Format(format!("config.{k}: not an integer")))
    };
    let field_err = |k: &'static str| move |e: Error| Error::Format(format!("config.{k}: {e}"));
    let mut c = ModelConfig::parse_name(&format!("{}-{}/{}", get("variant")?, num("h")?, num("b")?))
        .map_err(field_err("variant"))?;
    c.p = num("p")?;
    c.k = num("k")?;
    c.alpha = match get("alpha")? {
        "-" => None,
        a => Some(parse_fraction(a).map_err(field_err("alpha"))?),
    };
    c.segments = match get("segments")? {
        "-" => None,
        _ => Some(num("segments")?),
    };
    c.classes = num("classes")?;
    c.in_channels = num("in_channels")?;
    c.activation = get("activation")?.parse().map_err(field_err("activation"))?;
    c.norm = get("norm")?.parse().map_err(field_err("norm"))?;
    c.residual = get("residual")?.parse().map_err(field_err("residual"))?;
    c.spatial = get("spatial")?.parse().map_err(field_err("spatial"))?;
    c.channel = get("channel")?.parse().map_err(field_err("channel"))?;
    Ok(c)
}
