//! Named-tensor checkpoint files.
//!
//! Layout (little-endian): magic `OFL1`, then records until end of file,
//! each `u32` name length, UTF-8 name, `u32` rank, `rank × u64` dims and
//! `f64` values in row-major order.

use std::fs;
use std::path::Path;

use ofl_core::model::Model;
use ofl_core::optim::OptState;
use ofl_core::tensor::Tensor;
use ofl_core::train::{TrainConfig, Trainer};

use crate::bytes::Reader;
use crate::error::{OflError, Result};

pub const MAGIC: &[u8; 4] = b"OFL1";

const OPT_META: &str = "optimizer.state";
const OPT_FIRST: &str = "optimizer.m.";
const OPT_SECOND: &str = "optimizer.v.";

pub fn encode(records: &[(String, Tensor)]) -> Vec<u8> {
    let mut out = MAGIC.to_vec();
    for (name, t) in records {
        out.extend((name.len() as u32).to_le_bytes());
        out.extend(name.as_bytes());
        out.extend((t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend((d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend(v.to_le_bytes());
        }
    }
    out
}

pub fn decode(data: &[u8], path: &Path) -> Result<Vec<(String, Tensor)>> {
    let mut r = Reader::new(data, path);
    if r.take(4, "magic")? != MAGIC {
        return Err(r.error(0, "bad magic, expected OFL1"));
    }
    let mut records = Vec::new();
    while !r.at_end() {
        let start = r.offset();
        let len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| r.error(start + 4, "name is not UTF-8"))?
            .to_string();
        let rank = r.u32("rank")? as usize;
        let mut shape = Vec::with_capacity(rank.min(16));
        for _ in 0..rank {
            let d = r.u64("dimension")?;
            shape.push(
                usize::try_from(d).map_err(|_| r.error(r.offset() - 8, "dimension too large"))?,
            );
        }
        let count = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| r.error(r.offset(), "element count overflows"))?;
        let values = r.f64s(count, "values")?;
        let t = Tensor::new(&shape, values).map_err(|e| r.error(start, e.to_string()))?;
        records.push((name, t));
    }
    Ok(records)
}

pub fn write(path: &Path, records: &[(String, Tensor)]) -> Result<()> {
    fs::write(path, encode(records)).map_err(|e| OflError::io(path, e))
}

pub fn read(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let data = fs::read(path).map_err(|e| OflError::io(path, e))?;
    decode(&data, path)
}

/// Parameter values of `model`, in store order.
pub fn model_records(model: &Model) -> Vec<(String, Tensor)> {
    let s = &model.store;
    s.ids()
        .map(|id| (s.name(id).to_string(), s.value(id).clone()))
        .collect()
}

/// Parameters plus optimizer moments, step, learning rate and epoch count.
pub fn trainer_records(trainer: &Trainer) -> Vec<(String, Tensor)> {
    let mut out = model_records(&trainer.model);
    let s = &trainer.model.store;
    let o = &trainer.optimizer;
    for id in s.ids() {
        out.push((
            format!("{OPT_FIRST}{}", s.name(id)),
            o.first_moment[id.index()].clone(),
        ));
        out.push((
            format!("{OPT_SECOND}{}", s.name(id)),
            o.second_moment[id.index()].clone(),
        ));
    }
    let meta = vec![o.step as f64, o.learning_rate, trainer.epochs_done as f64];
    out.push((
        OPT_META.to_string(),
        Tensor::new(&[3], meta).expect("shape"),
    ));
    out
}

fn lookup<'a>(records: &'a [(String, Tensor)], name: &str, path: &Path) -> Result<&'a Tensor> {
    records
        .iter()
        .find(|(n, _)| n == name)
        .map(|(_, t)| t)
        .ok_or_else(|| {
            OflError::Usage(format!(
                "{}: checkpoint has no record {name}",
                path.display()
            ))
        })
}

/// Loads parameter values into `model`; every model parameter must be present
/// with a matching shape.
pub fn load_model(model: &mut Model, records: &[(String, Tensor)], path: &Path) -> Result<()> {
    for id in model.store.ids().collect::<Vec<_>>() {
        let name = model.store.name(id).to_string();
        let t = lookup(records, &name, path)?;
        model
            .store
            .set(id, t.clone())
            .map_err(|e| OflError::Usage(format!("{}: {name}: {e}", path.display())))?;
    }
    Ok(())
}

pub fn load_trainer(
    mut model: Model,
    config: TrainConfig,
    records: &[(String, Tensor)],
    path: &Path,
) -> Result<Trainer> {
    load_model(&mut model, records, path)?;
    let mut opt = OptState::new(
        &model.store,
        config.learning_rate,
        config.decay_factor,
        config.decay_interval,
    )?;
    for id in model.store.ids() {
        let name = model.store.name(id);
        let m = lookup(records, &format!("{OPT_FIRST}{name}"), path)?;
        let v = lookup(records, &format!("{OPT_SECOND}{name}"), path)?;
        let shape = model.store.value(id).shape();
        if m.shape() != shape || v.shape() != shape {
            return Err(OflError::Usage(format!(
                "{}: optimizer moments of {name} have the wrong shape",
                path.display()
            )));
        }
        opt.first_moment[id.index()] = m.clone();
        opt.second_moment[id.index()] = v.clone();
    }
    let meta = lookup(records, OPT_META, path)?;
    if meta.len() != 3 {
        return Err(OflError::Usage(format!(
            "{}: malformed optimizer state",
            path.display()
        )));
    }
    let d = meta.data();
    opt.step = d[0] as u64;
    opt.learning_rate = d[1];
    let epochs_done = d[2] as usize;
    Ok(Trainer::resume(model, opt, config, epochs_done)?)
}
