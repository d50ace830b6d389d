use std::fmt;
use std::str::FromStr;

use indexmap::IndexMap;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<u64>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<u64>, data: Vec<f32>) -> Result<Self> {
        let numel = numel(&shape).ok_or_else(|| Error::InvalidTensor {
            name: String::new(),
            reason: "shape overflows".into(),
        })?;
        if numel != data.len() as u64 {
            return Err(Error::InvalidTensor {
                name: String::new(),
                reason: format!("shape {shape:?} needs {numel} elements, got {}", data.len()),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<u64>) -> Result<Self> {
        let n = numel(&shape).ok_or_else(|| Error::InvalidTensor {
            name: String::new(),
            reason: "shape overflows".into(),
        })?;
        Self::new(shape, vec![0.0; n as usize])
    }

    pub fn shape(&self) -> &[u64] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_parts(self) -> (Vec<u64>, Vec<f32>) {
        (self.shape, self.data)
    }
}

fn numel(shape: &[u64]) -> Option<u64> {
    shape.iter().try_fold(1u64, |acc, &d| acc.checked_mul(d))
}

/// Named adapter tensors in insertion order.
///
/// Only trainable adapter state lives here; base-model weights are never
/// represented.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParameterSet {
    tensors: IndexMap<String, Tensor>,
}

impl ParameterSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts a tensor at the end of the order. Re-inserting an existing
    /// name is an error since it would silently reorder the checkpoint.
    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<()> {
        let name = name.into();
        if name.is_empty() {
            return Err(Error::InvalidTensor {
                name,
                reason: "empty tensor name".into(),
            });
        }
        if self.tensors.contains_key(&name) {
            return Err(Error::InvalidTensor {
                name,
                reason: "duplicate tensor name".into(),
            });
        }
        self.tensors.insert(name, tensor);
        Ok(())
    }

    pub fn with(mut self, name: &str, shape: Vec<u64>, data: Vec<f32>) -> Result<Self> {
        let t = Tensor::new(shape, data).map_err(|e| rename(e, name))?;
        self.insert(name, t)?;
        Ok(self)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_elements(&self) -> usize {
        self.tensors.values().map(|t| t.data.len()).sum()
    }

    /// Sum of every element, accumulated in f64.
    pub fn checksum(&self) -> f64 {
        self.tensors
            .values()
            .flat_map(|t| t.data.iter())
            .map(|&x| f64::from(x))
            .sum()
    }

    /// Identical name sets and, per name, identical shapes.
    pub fn check_compatible(&self, other: &ParameterSet) -> Result<()> {
        if self.tensors.len() != other.tensors.len()
            || self.tensors.keys().any(|k| !other.tensors.contains_key(k))
        {
            return Err(Error::NameSetMismatch);
        }
        for (name, t) in &self.tensors {
            if other.tensors[name].shape != t.shape {
                return Err(Error::ShapeMismatch(name.clone()));
            }
        }
        Ok(())
    }

    /// All elements concatenated in tensor order.
    pub fn flatten(&self) -> Vec<f32> {
        self.tensors
            .values()
            .flat_map(|t| t.data.iter().copied())
            .collect()
    }

    /// Overwrites every element from `flat`, in tensor order.
    pub fn assign_flat(&mut self, flat: &[f32]) -> Result<()> {
        if flat.len() != self.num_elements() {
            return Err(Error::InvalidTensor {
                name: String::new(),
                reason: format!(
                    "flat vector has {} elements, parameter set has {}",
                    flat.len(),
                    self.num_elements()
                ),
            });
        }
        let mut at = 0;
        for t in self.tensors.values_mut() {
            let n = t.data.len();
            t.data.copy_from_slice(&flat[at..at + n]);
            at += n;
        }
        Ok(())
    }
}

fn rename(e: Error, name: &str) -> Error {
    match e {
        Error::InvalidTensor { reason, .. } => Error::InvalidTensor {
            name: name.to_string(),
            reason,
        },
        other => other,
    }
}

/// A list of `name=d0xd1x...` entries, e.g. `lora_a=8x32,lora_b=32x8`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShapeSpec(pub Vec<(String, Vec<u64>)>);

impl ShapeSpec {
    pub fn zeros(&self) -> Result<ParameterSet> {
        let mut ps = ParameterSet::new();
        for (name, shape) in &self.0 {
            let t = Tensor::zeros(shape.clone()).map_err(|e| rename(e, name))?;
            ps.insert(name.clone(), t)?;
        }
        Ok(ps)
    }
}

impl FromStr for ShapeSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = |m: String| Error::Config(format!("shape spec {s:?}: {m}"));
        let mut out = Vec::new();
        for entry in s.split(',').map(str::trim).filter(|e| !e.is_empty()) {
            let (name, dims) = entry
                .split_once('=')
                .ok_or_else(|| bad(format!("entry {entry:?} lacks '='")))?;
            let shape = dims
                .split('x')
                .map(|d| d.trim().parse::<u64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| bad(e.to_string()))?;
            out.push((name.trim().to_string(), shape));
        }
        if out.is_empty() {
            return Err(bad("no tensors".into()));
        }
        Ok(ShapeSpec(out))
    }
}

impl fmt::Display for ShapeSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, (name, shape)) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str(",")?;
            }
            let dims: Vec<String> = shape.iter().map(u64::to_string).collect();
            write!(f, "{name}={}", dims.join("x"))?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_must_match_data() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        // scalar
        assert!(Tensor::new(vec![], vec![1.0]).is_ok());
    }

    #[test]
    fn insertion_order_is_kept() {
        let ps = ParameterSet::new()
            .with("z", vec![1], vec![0.0])
            .unwrap()
            .with("a", vec![1], vec![0.0])
            .unwrap();
        assert_eq!(ps.names().collect::<Vec<_>>(), ["z", "a"]);
        assert!(ps.clone().with("z", vec![1], vec![1.0]).is_err());
    }

    #[test]
    fn compatibility() {
        let a = ParameterSet::new().with("w", vec![2], vec![1.0, 2.0]).unwrap();
        let b = ParameterSet::new().with("w", vec![1, 2], vec![1.0, 2.0]).unwrap();
        let c = ParameterSet::new().with("v", vec![2], vec![1.0, 2.0]).unwrap();
        assert!(a.check_compatible(&a).is_ok());
        assert!(matches!(a.check_compatible(&b), Err(Error::ShapeMismatch(n)) if n == "w"));
        assert!(matches!(a.check_compatible(&c), Err(Error::NameSetMismatch)));
    }

    #[test]
    fn shape_spec_round_trip() {
        let s: ShapeSpec = "lora_a=8x32, lora_b=32x8".parse().unwrap();
        assert_eq!(s.to_string(), "lora_a=8x32,lora_b=32x8");
        let ps = s.zeros().unwrap();
        assert_eq!(ps.num_elements(), 512);
        assert!("w".parse::<ShapeSpec>().is_err());
        assert!("w=2xq".parse::<ShapeSpec>().is_err());
    }

    #[test]
    fn flat_assignment() {
        let mut ps = ShapeSpec(vec![("a".into(), vec![2]), ("b".into(), vec![1])])
            .zeros()
            .unwrap();
        ps.assign_flat(&[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(ps.flatten(), [1.0, 2.0, 3.0]);
        assert_eq!(ps.checksum(), 6.0);
        assert!(ps.assign_flat(&[1.0]).is_err());
    }
}
