//! Embedding distances. L2 is the default everywhere; L1 and cosine exist
//! as config switches so recognition can be re-run under alternative
//! metrics.

use serde::{Deserialize, Serialize};

use crate::graph::{Graph, NodeId};
use crate::tensor::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum DistKind {
    #[default]
    L2,
    L1,
    Cos,
}

const COS_EPS: f64 = 1e-12;

/// Per-row distance between equal-shape matrices as an R x 1 node.
pub fn row_distance_graph<T: Scalar>(
    g: &mut Graph<T>,
    a: NodeId,
    b: NodeId,
    kind: DistKind,
) -> NodeId {
    match kind {
        DistKind::L2 => {
            let d = g.sub(a, b);
            g.row_l2(d)
        }
        DistKind::L1 => {
            let d = g.sub(a, b);
            g.row_l1(d)
        }
        DistKind::Cos => {
            let dot = g.row_dot(a, b);
            let na = g.row_l2(a);
            let nb = g.row_l2(b);
            let prod = g.mul(na, nb);
            let denom = g.clamp_min(prod, T::lit(COS_EPS));
            let cosine = g.div(dot, denom);
            let neg = g.scale(cosine, -T::one());
            g.add_scalar(neg, T::one())
        }
    }
}

/// Slice form of the same distances.
pub fn distance_slices<T: Scalar>(u: &[T], v: &[T], kind: DistKind) -> T {
    debug_assert_eq!(u.len(), v.len());
    match kind {
        DistKind::L2 => crate::tensor::l2_distance_slices(u, v),
        DistKind::L1 => u.iter().zip(v).map(|(&a, &b)| (a - b).abs()).sum(),
        DistKind::Cos => {
            let dot: T = u.iter().zip(v).map(|(&a, &b)| a * b).sum();
            let nu: T = u.iter().map(|&a| a * a).sum::<T>().sqrt();
            let nv: T = v.iter().map(|&a| a * a).sum::<T>().sqrt();
            T::one() - dot / (nu * nv).max(T::lit(COS_EPS))
        }
    }
}
