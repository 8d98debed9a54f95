//! Parameter checkpoints: a JSON object mapping parameter name to
//! `{"shape":[rows,cols],"values":[...]}`, numbers printed with 17
//! significant digits so every `f64` survives the round trip bit-exactly.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::Deserialize;

use super::{Matrix, ParamTensor, Parameters};
use crate::error::{Error, Result};

#[derive(Deserialize)]
struct Entry {
    shape: [usize; 2],
    values: Vec<f64>,
}

fn push_f64(out: &mut String, v: f64) {
    // `{:.16e}` is 17 significant digits; finite values only reach here.
    let _ = write!(out, "{v:.16e}");
}

/// Serializes every parameter of `model` in its declared order.
pub fn to_json<P: Parameters<f64> + ?Sized>(model: &P) -> Result<String> {
    let mut out = String::from("{\n");
    let params = model.params();
    for (n, p) in params.iter().enumerate() {
        if !p.value.is_finite() {
            return Err(Error::Checkpoint(format!(
                "parameter `{}` has non-finite values",
                p.name
            )));
        }
        let (r, c) = p.shape();
        let _ = write!(
            out,
            "  {}: {{\"shape\": [{r}, {c}], \"values\": [",
            serde_json::to_string(&p.name)?
        );
        for (k, &v) in p.value.as_slice().iter().enumerate() {
            if k > 0 {
                out.push_str(", ");
            }
            push_f64(&mut out, v);
        }
        out.push_str("]}");
        out.push_str(if n + 1 < params.len() { ",\n" } else { "\n" });
    }
    out.push_str("}\n");
    Ok(out)
}

/// Parses a checkpoint into name → matrix.
pub fn parse(text: &str) -> Result<BTreeMap<String, Matrix<f64>>> {
    let raw: BTreeMap<String, Entry> = serde_json::from_str(text)?;
    raw.into_iter()
        .map(|(name, e)| {
            let m = Matrix::from_vec(e.shape[0], e.shape[1], e.values)
                .map_err(|err| Error::Checkpoint(format!("`{name}`: {err}")))?;
            Ok((name, m))
        })
        .collect()
}

/// Overwrites every parameter of `model` from `entries`; names and shapes
/// must match exactly.
pub fn restore<P: Parameters<f64> + ?Sized>(
    model: &mut P,
    entries: &BTreeMap<String, Matrix<f64>>,
) -> Result<()> {
    let expected = model.params().len();
    if entries.len() != expected {
        return Err(Error::Checkpoint(format!(
            "checkpoint has {} tensors, model expects {expected}",
            entries.len()
        )));
    }
    for p in model.params_mut() {
        let m = entries
            .get(&p.name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{}`", p.name)))?;
        if m.shape() != p.shape() {
            return Err(Error::Checkpoint(format!(
                "`{}` has shape {:?}, model expects {:?}",
                p.name,
                m.shape(),
                p.shape()
            )));
        }
        *p = ParamTensor::new(p.name.clone(), m.clone());
    }
    Ok(())
}

pub fn save<P: Parameters<f64> + ?Sized>(model: &P, path: &Path) -> Result<()> {
    std::fs::write(path, to_json(model)?).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<BTreeMap<String, Matrix<f64>>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse(&text)
}
