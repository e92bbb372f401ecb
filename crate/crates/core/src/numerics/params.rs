use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::array::{NdArray, Scalar};
use crate::error::{Error, Result};

/// Which learning-rate group a parameter belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Group {
    Encoder,
    Decoder,
    Other,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry<T> {
    pub value: NdArray<T>,
    pub grad: NdArray<T>,
    pub trainable: bool,
    pub group: Group,
}

/// Named trainable arrays of one network. Iteration is lexicographic by name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    entries: BTreeMap<String, ParamEntry<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            entries: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: NdArray<T>, group: Group) -> Result<()> {
        self.insert_entry(name, value, group, true)
    }

    pub fn insert_entry(
        &mut self,
        name: impl Into<String>,
        value: NdArray<T>,
        group: Group,
        trainable: bool,
    ) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::InvalidArgument(format!("duplicate parameter `{name}`")));
        }
        let grad = NdArray::zeros(value.shape().to_vec());
        self.entries.insert(
            name,
            ParamEntry {
                value,
                grad,
                trainable,
                group,
            },
        );
        Ok(())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Result<&ParamEntry<T>> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut ParamEntry<T>> {
        self.entries
            .get_mut(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn value(&self, name: &str) -> Result<&NdArray<T>> {
        Ok(&self.get(name)?.value)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &ParamEntry<T>)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut ParamEntry<T>)> {
        self.entries.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar values across all entries.
    pub fn num_values(&self) -> usize {
        self.entries.values().map(|e| e.value.len()).sum()
    }

    pub fn accumulate_grad(&mut self, name: &str, grad: &NdArray<T>) -> Result<()> {
        let entry = self.get_mut(name)?;
        if entry.grad.shape() != grad.shape() {
            return Err(Error::shape(
                "accumulate_grad",
                format!("`{name}`: {:?} vs {:?}", entry.grad.shape(), grad.shape()),
            ));
        }
        for (g, &d) in entry.grad.data_mut().iter_mut().zip(grad.data()) {
            *g = *g + d;
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for e in self.entries.values_mut() {
            e.grad.data_mut().iter_mut().for_each(|g| *g = T::zero());
        }
    }

    /// True when both stores hold the same names with the same shapes.
    pub fn same_layout(&self, other: &Self) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|((na, a), (nb, b))| na == nb && a.value.shape() == b.value.shape())
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|(k, e)| {
                    (
                        k.clone(),
                        ParamEntry {
                            value: e.value.cast(),
                            grad: e.grad.cast(),
                            trainable: e.trainable,
                            group: e.group,
                        },
                    )
                })
                .collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_are_unique_and_sorted() {
        let mut s = ParamStore::<f32>::new();
        s.insert("b.w", NdArray::zeros([2]), Group::Encoder).unwrap();
        s.insert("a.w", NdArray::zeros([3]), Group::Decoder).unwrap();
        assert!(s.insert("a.w", NdArray::zeros([3]), Group::Decoder).is_err());
        let names: Vec<_> = s.names().cloned().collect();
        assert_eq!(names, ["a.w", "b.w"]);
        assert_eq!(s.num_values(), 5);
    }

    #[test]
    fn grad_shape_is_checked() {
        let mut s = ParamStore::<f64>::new();
        s.insert("w", NdArray::zeros([2, 2]), Group::Other).unwrap();
        assert!(s.accumulate_grad("w", &NdArray::zeros([4])).is_err());
        s.accumulate_grad("w", &NdArray::full([2, 2], 1.5)).unwrap();
        s.accumulate_grad("w", &NdArray::full([2, 2], 1.0)).unwrap();
        assert_eq!(s.get("w").unwrap().grad.data(), &[2.5; 4]);
        s.zero_grads();
        assert_eq!(s.get("w").unwrap().grad.sum(), 0.0);
    }
}
