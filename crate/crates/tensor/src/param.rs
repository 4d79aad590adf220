use std::sync::Arc;

use crate::error::{invalid, Result};
use crate::scalar::Scalar;
use crate::tensor::{NodeId, Tensor};

/// A named trainable array with a stable graph identity.
pub struct Param<T: Scalar = f32> {
    name: String,
    shape: Vec<usize>,
    data: Arc<Vec<T>>,
    id: NodeId,
}

impl<T: Scalar> Clone for Param<T> {
    /// Clones get a fresh identity so two copies never share gradients.
    fn clone(&self) -> Self {
        Param {
            name: self.name.clone(),
            shape: self.shape.clone(),
            data: Arc::clone(&self.data),
            id: NodeId::fresh(),
        }
    }
}

impl<T: Scalar> std::fmt::Debug for Param<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Param({} {:?})", self.name, self.shape)
    }
}

impl<T: Scalar> Param<T> {
    pub fn new(name: impl Into<String>, shape: &[usize], data: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        let name = name.into();
        if data.len() != n {
            return Err(invalid(
                "param",
                format!("{name}: shape {shape:?} needs {n} values, got {}", data.len()),
            ));
        }
        Ok(Param {
            name,
            shape: shape.to_vec(),
            data: Arc::new(data),
            id: NodeId::fresh(),
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Mutable view; copies the buffer if a live graph still references it.
    pub fn data_mut(&mut self) -> &mut [T] {
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    pub fn set_data(&mut self, data: Vec<T>) -> Result<()> {
        if data.len() != self.data.len() {
            return Err(invalid(
                "param",
                format!("{}: expected {} values, got {}", self.name, self.data.len(), data.len()),
            ));
        }
        self.data = Arc::new(data);
        Ok(())
    }

    /// Leaf tensor sharing this parameter's storage. When `track` is set the
    /// leaf carries the parameter id and collects a gradient.
    pub fn bind(&self, track: bool) -> Tensor<T> {
        let id = if track { self.id } else { NodeId::fresh() };
        Tensor::leaf(Arc::clone(&self.data), &self.shape, track, id).expect("param shape is consistent")
    }
}

/// Anything that owns parameters.
pub trait Module<T: Scalar> {
    fn params(&self) -> Vec<&Param<T>>;
    fn params_mut(&mut self) -> Vec<&mut Param<T>>;

    fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }
}
