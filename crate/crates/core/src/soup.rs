//! Parameter averaging of structurally identical checkpoints.

use std::path::PathBuf;

use crate::checkpoint::Checkpoint;
use crate::encoder::EncoderParams;
use crate::error::{Error, Result};
use crate::numcore::Tensor;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SoupSpec {
    pub inputs: Vec<PathBuf>,
    pub output: PathBuf,
}

/// Sum by recursive halving, which keeps rounding error logarithmic in the
/// number of terms.
fn pairwise_sum(v: &[f64]) -> f64 {
    match v.len() {
        0 => 0.0,
        1 => v[0],
        n => pairwise_sum(&v[..n / 2]) + pairwise_sum(&v[n / 2..]),
    }
}

/// Mean of one coordinate across inputs. Values are sorted first so the
/// result does not depend on input order.
fn mean_of(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    if values[0] == values[values.len() - 1] {
        return values[0];
    }
    pairwise_sum(values) / values.len() as f64
}

fn check_compatible(inputs: &[&Checkpoint]) -> Result<()> {
    let first = inputs[0];
    for other in &inputs[1..] {
        if other.config != first.config {
            return Err(Error::Incompatible {
                tensor: "<config>".to_string(),
                reason: "encoder configurations differ".to_string(),
            });
        }
        let a: Vec<&str> = first.params.names().collect();
        let b: Vec<&str> = other.params.names().collect();
        if let Some(name) = a.iter().zip(&b).find(|(x, y)| x != y).map(|(x, _)| *x) {
            return Err(Error::Incompatible {
                tensor: name.to_string(),
                reason: "tensor missing from another input".to_string(),
            });
        }
        if a.len() != b.len() {
            let name = if a.len() > b.len() { a[b.len()] } else { b[a.len()] };
            return Err(Error::Incompatible {
                tensor: name.to_string(),
                reason: "tensor missing from another input".to_string(),
            });
        }
        for (name, t) in first.params.iter() {
            let u = other.params.get(name).expect("names checked above");
            if t.shape() != u.shape() {
                return Err(Error::Incompatible {
                    tensor: name.to_string(),
                    reason: format!("shapes {:?} and {:?}", t.shape(), u.shape()),
                });
            }
        }
    }
    Ok(())
}

/// Elementwise mean of every named tensor; the configuration is copied from
/// the first input.
pub fn soup_checkpoints(inputs: &[Checkpoint]) -> Result<Checkpoint> {
    let refs: Vec<&Checkpoint> = inputs.iter().collect();
    soup_refs(&refs)
}

pub fn soup_refs(inputs: &[&Checkpoint]) -> Result<Checkpoint> {
    if inputs.len() < 2 {
        return Err(Error::contract(format!(
            "souping needs at least 2 checkpoints, got {}",
            inputs.len()
        )));
    }
    check_compatible(inputs)?;
    let first = inputs[0];
    let mut tensors = std::collections::BTreeMap::new();
    let mut column = vec![0.0; inputs.len()];
    for (name, t) in first.params.iter() {
        let sources: Vec<&[f64]> = inputs
            .iter()
            .map(|c| c.params.get(name).expect("checked").data())
            .collect();
        let data = (0..t.len())
            .map(|i| {
                for (slot, src) in column.iter_mut().zip(&sources) {
                    *slot = src[i];
                }
                mean_of(&mut column)
            })
            .collect();
        tensors.insert(name.to_string(), Tensor::new(t.shape().to_vec(), data)?);
    }
    let params = EncoderParams::from_tensors(&first.config, tensors)?;
    Checkpoint::new(first.config.clone(), params)
}

/// Loads the inputs, averages them and writes the result.
pub fn soup_files(spec: &SoupSpec) -> Result<Checkpoint> {
    if spec.inputs.len() < 2 {
        return Err(Error::contract(format!(
            "souping needs at least 2 checkpoints, got {}",
            spec.inputs.len()
        )));
    }
    let loaded = spec
        .inputs
        .iter()
        .map(Checkpoint::load)
        .collect::<Result<Vec<_>>>()?;
    let out = soup_checkpoints(&loaded)?;
    out.save(&spec.output)?;
    Ok(out)
}
