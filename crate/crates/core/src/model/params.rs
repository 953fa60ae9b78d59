use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, Range, SubAssign};

use num_traits::{Float, FromPrimitive};
use serde::{Deserialize, Serialize};

/// Floating-point type the networks are generic over. Training runs in
/// `f32`; gradient checks replicate small nets in `f64`.
pub trait Real:
    Float
    + FromPrimitive
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Send
    + Sync
    + Debug
    + Default
    + 'static
{
    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("f64 converts to every Real")
    }
}

impl Real for f32 {}
impl Real for f64 {}

/// Location of one named tensor inside a flat parameter vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId {
    pub offset: usize,
    pub len: usize,
}

impl ParamId {
    pub fn range(self) -> Range<usize> {
        self.offset..self.offset + self.len
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
}

/// Named tensors stored back to back in one vector, so optimizers and
/// gradient buffers can treat a whole model as a flat slice.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamBundle<S> {
    specs: Vec<ParamSpec>,
    ids: Vec<ParamId>,
    pub values: Vec<S>,
}

impl<S: Real> Default for ParamBundle<S> {
    fn default() -> Self {
        Self {
            specs: Vec::new(),
            ids: Vec::new(),
            values: Vec::new(),
        }
    }
}

impl<S: Real> ParamBundle<S> {
    pub fn add(&mut self, name: &str, shape: &[usize], mut init: impl FnMut() -> S) -> ParamId {
        let len = shape.iter().product();
        let id = ParamId {
            offset: self.values.len(),
            len,
        };
        self.values.extend((0..len).map(|_| init()));
        self.specs.push(ParamSpec {
            name: name.to_string(),
            shape: shape.to_vec(),
        });
        self.ids.push(id);
        id
    }

    pub fn get(&self, id: ParamId) -> &[S] {
        &self.values[id.range()]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut [S] {
        &mut self.values[id.range()]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn entries(&self) -> impl Iterator<Item = (&ParamSpec, ParamId)> {
        self.specs.iter().zip(self.ids.iter().copied())
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries()
            .find(|(s, _)| s.name == name)
            .map(|(_, id)| id)
    }

    /// Name of the tensor holding flat index `i`.
    pub fn name_of(&self, i: usize) -> Option<&str> {
        self.entries()
            .find(|(_, id)| id.range().contains(&i))
            .map(|(s, _)| s.name.as_str())
    }

    pub fn cast<T: Real>(&self) -> ParamBundle<T> {
        ParamBundle {
            specs: self.specs.clone(),
            ids: self.ids.clone(),
            values: self
                .values
                .iter()
                .map(|v| T::of(v.to_f64().expect("finite parameter")))
                .collect(),
        }
    }
}
