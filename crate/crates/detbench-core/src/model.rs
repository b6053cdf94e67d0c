//! Object-safe view of a scorable, differentiable detector.
//!
//! Attack and benchmark code works against this trait so that tests can
//! substitute instrumented wrappers (e.g. counting gradient-graph usage).

use crate::error::Result;
use crate::graph::{sigmoid, Graph, NodeId};
use crate::tensor::Tensor;
use crate::zoo::Detector;

pub trait Model: Sync {
    fn id(&self) -> String;

    /// Record this model's forward pass on an attack graph. Anything built
    /// through this node participates in gradient computation.
    fn logit_node(&self, graph: &mut Graph, image: NodeId) -> Result<NodeId>;

    /// Plain (non-differentiated) probability that the image is generated.
    fn probability(&self, image: &Tensor) -> Result<f64> {
        let mut graph = Graph::new();
        let x = graph.leaf(image.clone());
        let z = self.logit_node(&mut graph, x)?;
        Ok(sigmoid(graph.value(z).scalar_value()?))
    }
}

impl Model for Detector {
    fn id(&self) -> String {
        self.name().to_string()
    }

    fn logit_node(&self, graph: &mut Graph, image: NodeId) -> Result<NodeId> {
        self.validate_image(graph.value(image))?;
        let (logit, _) = self.build_forward(graph, image)?;
        Ok(logit)
    }

    fn probability(&self, image: &Tensor) -> Result<f64> {
        Detector::probability(self, image)
    }
}

impl<T: Model + ?Sized> Model for &T {
    fn id(&self) -> String {
        (**self).id()
    }

    fn logit_node(&self, graph: &mut Graph, image: NodeId) -> Result<NodeId> {
        (**self).logit_node(graph, image)
    }

    fn probability(&self, image: &Tensor) -> Result<f64> {
        (**self).probability(image)
    }
}
