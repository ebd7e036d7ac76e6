//! Checkpoint container: a versioned little-endian binary file holding
//! named parameter tensors, the network config, training counters, the
//! optimizer moments, the best-validation record, and the training RNG
//! position, so a resumed run continues bit-identically.

use super::optim::AdamState;
use super::PipelineError;
use crate::net::{NetConfig, ParamStore};
use crate::tensor::{DType, Element, Tensor};
use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

pub const CKPT_MAGIC: [u8; 4] = *b"DCKP";
pub const CKPT_VERSION: u16 = 1;

/// Serialized position of a `ChaCha8` stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub word_pos: u128,
    pub stream: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct TrainCounters {
    pub epoch: u64,
    pub global_step: u64,
    pub finetune_step: u64,
    /// 1 = supervised pretraining, 2 = consistency finetuning.
    pub phase: u8,
    /// Epochs since the last significant validation improvement.
    pub stagnation_epochs: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BestRecord {
    pub val_dsc: f64,
    pub epoch: u64,
}

#[derive(Debug, Clone)]
pub struct Checkpoint<E: Element> {
    pub net_cfg: NetConfig,
    pub params: ParamStore<E>,
    pub moments: BTreeMap<String, AdamState<E>>,
    pub counters: TrainCounters,
    pub best: Option<BestRecord>,
    pub rng: RngState,
}

fn dtype_code(d: DType) -> u8 {
    match d {
        DType::F32 => 1,
        DType::F64 => 2,
    }
}

struct Writer<W: Write> {
    w: W,
}

impl<W: Write> Writer<W> {
    fn u8(&mut self, v: u8) -> std::io::Result<()> {
        self.w.write_all(&[v])
    }
    fn u16(&mut self, v: u16) -> std::io::Result<()> {
        self.w.write_all(&v.to_le_bytes())
    }
    fn u32(&mut self, v: u32) -> std::io::Result<()> {
        self.w.write_all(&v.to_le_bytes())
    }
    fn u64(&mut self, v: u64) -> std::io::Result<()> {
        self.w.write_all(&v.to_le_bytes())
    }
    fn u128(&mut self, v: u128) -> std::io::Result<()> {
        self.w.write_all(&v.to_le_bytes())
    }
    fn f64(&mut self, v: f64) -> std::io::Result<()> {
        self.w.write_all(&v.to_le_bytes())
    }
    fn name(&mut self, s: &str) -> std::io::Result<()> {
        self.u16(s.len() as u16)?;
        self.w.write_all(s.as_bytes())
    }
    fn tensor<E: Element>(&mut self, t: &Tensor<E>) -> std::io::Result<()> {
        self.u8(t.shape().len() as u8)?;
        for &d in t.shape() {
            self.u32(d as u32)?;
        }
        match E::DTYPE {
            DType::F32 => {
                for &x in t.data() {
                    self.w.write_all(&(x.to_f64() as f32).to_le_bytes())?;
                }
            }
            DType::F64 => {
                for &x in t.data() {
                    self.w.write_all(&x.to_f64().to_le_bytes())?;
                }
            }
        }
        Ok(())
    }
}

struct Reader<R: Read> {
    r: R,
    path: String,
}

impl<R: Read> Reader<R> {
    fn bytes<const N: usize>(&mut self) -> Result<[u8; N], PipelineError> {
        let mut buf = [0u8; N];
        self.r
            .read_exact(&mut buf)
            .map_err(|e| PipelineError::Checkpoint(format!("{}: truncated: {e}", self.path)))?;
        Ok(buf)
    }
    fn u8(&mut self) -> Result<u8, PipelineError> {
        Ok(self.bytes::<1>()?[0])
    }
    fn u16(&mut self) -> Result<u16, PipelineError> {
        Ok(u16::from_le_bytes(self.bytes()?))
    }
    fn u32(&mut self) -> Result<u32, PipelineError> {
        Ok(u32::from_le_bytes(self.bytes()?))
    }
    fn u64(&mut self) -> Result<u64, PipelineError> {
        Ok(u64::from_le_bytes(self.bytes()?))
    }
    fn u128(&mut self) -> Result<u128, PipelineError> {
        Ok(u128::from_le_bytes(self.bytes()?))
    }
    fn f64(&mut self) -> Result<f64, PipelineError> {
        Ok(f64::from_le_bytes(self.bytes()?))
    }
    fn name(&mut self) -> Result<String, PipelineError> {
        let len = self.u16()? as usize;
        let mut buf = vec![0u8; len];
        self.r
            .read_exact(&mut buf)
            .map_err(|e| PipelineError::Checkpoint(format!("{}: truncated name: {e}", self.path)))?;
        String::from_utf8(buf)
            .map_err(|_| PipelineError::Checkpoint(format!("{}: non-utf8 name", self.path)))
    }
    fn tensor<E: Element>(&mut self) -> Result<Tensor<E>, PipelineError> {
        let ndim = self.u8()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(self.u32()? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        match E::DTYPE {
            DType::F32 => {
                for _ in 0..numel {
                    data.push(E::from_f64(f32::from_le_bytes(self.bytes()?) as f64));
                }
            }
            DType::F64 => {
                for _ in 0..numel {
                    data.push(E::from_f64(f64::from_le_bytes(self.bytes()?)));
                }
            }
        }
        Tensor::from_vec(shape, data)
            .map_err(|e| PipelineError::Checkpoint(format!("{}: bad tensor: {e}", self.path)))
    }
}

pub fn save_checkpoint<E: Element>(
    path: impl AsRef<Path>,
    ckpt: &Checkpoint<E>,
) -> Result<(), PipelineError> {
    let path = path.as_ref();
    let file = File::create(path)
        .map_err(|e| PipelineError::Checkpoint(format!("{}: {e}", path.display())))?;
    let mut w = Writer {
        w: BufWriter::new(file),
    };
    let io = |e: std::io::Error| PipelineError::Checkpoint(format!("{}: {e}", path.display()));

    (|| -> std::io::Result<()> {
        w.w.write_all(&CKPT_MAGIC)?;
        w.u16(CKPT_VERSION)?;
        w.u8(dtype_code(E::DTYPE))?;
        w.u8(0)?;
        let c = &ckpt.net_cfg;
        for v in [
            c.levels,
            c.base_channels,
            c.aux_decoders,
            c.patch,
            c.in_channels,
            c.out_channels,
        ] {
            w.u32(v as u32)?;
        }
        w.u64(ckpt.counters.epoch)?;
        w.u64(ckpt.counters.global_step)?;
        w.u64(ckpt.counters.finetune_step)?;
        w.u8(ckpt.counters.phase)?;
        w.u64(ckpt.counters.stagnation_epochs)?;
        match ckpt.best {
            Some(b) => {
                w.u8(1)?;
                w.f64(b.val_dsc)?;
                w.u64(b.epoch)?;
            }
            None => {
                w.u8(0)?;
                w.f64(0.0)?;
                w.u64(0)?;
            }
        }
        w.w.write_all(&ckpt.rng.seed)?;
        w.u128(ckpt.rng.word_pos)?;
        w.u64(ckpt.rng.stream)?;

        w.u32(ckpt.params.len() as u32)?;
        for (name, tensor) in ckpt.params.iter() {
            w.name(name)?;
            w.tensor(tensor)?;
        }
        w.u32(ckpt.moments.len() as u32)?;
        for (name, state) in &ckpt.moments {
            w.name(name)?;
            w.u64(state.t)?;
            w.tensor(&state.m)?;
            w.tensor(&state.v)?;
        }
        w.w.flush()
    })()
    .map_err(io)
}

pub fn load_checkpoint<E: Element>(path: impl AsRef<Path>) -> Result<Checkpoint<E>, PipelineError> {
    let path = path.as_ref();
    let file = File::open(path)
        .map_err(|e| PipelineError::Checkpoint(format!("{}: {e}", path.display())))?;
    let mut r = Reader {
        r: BufReader::new(file),
        path: path.display().to_string(),
    };
    let magic = r.bytes::<4>()?;
    if magic != CKPT_MAGIC {
        return Err(PipelineError::Checkpoint(format!(
            "{}: not a checkpoint file",
            path.display()
        )));
    }
    let version = r.u16()?;
    if version != CKPT_VERSION {
        return Err(PipelineError::Checkpoint(format!(
            "{}: unsupported version {version}",
            path.display()
        )));
    }
    let dtype = r.u8()?;
    if dtype != dtype_code(E::DTYPE) {
        return Err(PipelineError::Checkpoint(format!(
            "{}: dtype code {dtype} does not match requested {}",
            path.display(),
            E::DTYPE
        )));
    }
    r.u8()?; // reserved
    let mut dims = [0usize; 6];
    for d in dims.iter_mut() {
        *d = r.u32()? as usize;
    }
    let net_cfg = NetConfig {
        levels: dims[0],
        base_channels: dims[1],
        aux_decoders: dims[2],
        patch: dims[3],
        in_channels: dims[4],
        out_channels: dims[5],
    };
    let counters = TrainCounters {
        epoch: r.u64()?,
        global_step: r.u64()?,
        finetune_step: r.u64()?,
        phase: r.u8()?,
        stagnation_epochs: r.u64()?,
    };
    let has_best = r.u8()? != 0;
    let best_dsc = r.f64()?;
    let best_epoch = r.u64()?;
    let best = has_best.then_some(BestRecord {
        val_dsc: best_dsc,
        epoch: best_epoch,
    });
    let seed: [u8; 32] = r.bytes()?;
    let word_pos = r.u128()?;
    let stream = r.u64()?;

    let n_params = r.u32()? as usize;
    let mut params = ParamStore::new();
    for _ in 0..n_params {
        let name = r.name()?;
        params.insert(name, r.tensor()?);
    }
    let n_moments = r.u32()? as usize;
    let mut moments = BTreeMap::new();
    for _ in 0..n_moments {
        let name = r.name()?;
        let t = r.u64()?;
        let m = r.tensor()?;
        let v = r.tensor()?;
        moments.insert(name, AdamState { m, v, t });
    }

    Ok(Checkpoint {
        net_cfg,
        params,
        moments,
        counters,
        best,
        rng: RngState {
            seed,
            word_pos,
            stream,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::build_network;

    #[test]
    fn checkpoint_round_trip_is_bit_identical() {
        let cfg = NetConfig {
            levels: 2,
            base_channels: 2,
            aux_decoders: 2,
            patch: 8,
            in_channels: 1,
            out_channels: 1,
        };
        let mut net = build_network::<f64>(&cfg, 5).unwrap();
        net.instantiate_aux_decoders(6);
        let mut moments = BTreeMap::new();
        moments.insert(
            "enc.l0.c1.w".to_string(),
            AdamState {
                m: Tensor::full(&[2, 1, 3, 3, 3], 0.25),
                v: Tensor::full(&[2, 1, 3, 3, 3], 0.125),
                t: 17,
            },
        );
        let ckpt = Checkpoint {
            net_cfg: cfg,
            params: net.params().clone(),
            moments,
            counters: TrainCounters {
                epoch: 3,
                global_step: 120,
                finetune_step: 40,
                phase: 2,
                stagnation_epochs: 1,
            },
            best: Some(BestRecord {
                val_dsc: 81.25,
                epoch: 2,
            }),
            rng: RngState {
                seed: [7u8; 32],
                word_pos: 123456789,
                stream: 42,
            },
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.dckp");
        save_checkpoint(&path, &ckpt).unwrap();
        let back: Checkpoint<f64> = load_checkpoint(&path).unwrap();
        assert_eq!(back.net_cfg, ckpt.net_cfg);
        assert_eq!(back.counters, ckpt.counters);
        assert_eq!(back.best, ckpt.best);
        assert_eq!(back.rng, ckpt.rng);
        assert_eq!(back.params.len(), ckpt.params.len());
        for ((n1, t1), (n2, t2)) in back.params.iter().zip(ckpt.params.iter()) {
            assert_eq!(n1, n2);
            assert!(t1
                .data()
                .iter()
                .zip(t2.data())
                .all(|(a, b)| a.to_bits() == b.to_bits()));
        }
        assert_eq!(back.moments["enc.l0.c1.w"].t, 17);
    }

    #[test]
    fn dtype_mismatch_is_rejected() {
        let cfg = NetConfig {
            levels: 2,
            base_channels: 1,
            aux_decoders: 1,
            patch: 4,
            in_channels: 1,
            out_channels: 1,
        };
        let net = build_network::<f32>(&cfg, 1).unwrap();
        let ckpt = Checkpoint {
            net_cfg: cfg,
            params: net.params().clone(),
            moments: BTreeMap::new(),
            counters: TrainCounters::default(),
            best: None,
            rng: RngState {
                seed: [0; 32],
                word_pos: 0,
                stream: 0,
            },
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck32.dckp");
        save_checkpoint(&path, &ckpt).unwrap();
        assert!(load_checkpoint::<f64>(&path).is_err());
        assert!(load_checkpoint::<f32>(&path).is_ok());
    }

    #[test]
    fn junk_file_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk");
        std::fs::write(&path, b"not a checkpoint at all").unwrap();
        assert!(load_checkpoint::<f32>(&path).is_err());
    }
}
