//! String-keyed dispatch over the op catalog.
//!
//! Typed methods on [`Tensor`] are the primary interface; this front exists
//! for generic drivers and tests that address ops by name.

use std::collections::BTreeMap;

use super::{Scalar, Tensor, TensorError};
use crate::rng::RngStream;

#[derive(Debug, Clone, PartialEq)]
pub enum AttrValue {
    Int(i64),
    Float(f64),
    Bool(bool),
    IntList(Vec<i64>),
}

pub type Attrs = BTreeMap<String, AttrValue>;

fn attr_int(attrs: &Attrs, op: &str, key: &str) -> Result<i64, TensorError> {
    match attrs.get(key) {
        Some(AttrValue::Int(v)) => Ok(*v),
        other => Err(TensorError::InvalidAttr {
            op: op.into(),
            detail: format!("'{key}' must be an int, got {other:?}"),
        }),
    }
}

fn attr_int_opt(attrs: &Attrs, op: &str, key: &str) -> Result<Option<i64>, TensorError> {
    match attrs.get(key) {
        None => Ok(None),
        Some(AttrValue::Int(v)) => Ok(Some(*v)),
        other => Err(TensorError::InvalidAttr {
            op: op.into(),
            detail: format!("'{key}' must be an int, got {other:?}"),
        }),
    }
}

fn attr_float(attrs: &Attrs, op: &str, key: &str) -> Result<f64, TensorError> {
    match attrs.get(key) {
        Some(AttrValue::Float(v)) => Ok(*v),
        Some(AttrValue::Int(v)) => Ok(*v as f64),
        other => Err(TensorError::InvalidAttr {
            op: op.into(),
            detail: format!("'{key}' must be a float, got {other:?}"),
        }),
    }
}

fn attr_bool_or(attrs: &Attrs, op: &str, key: &str, default: bool) -> Result<bool, TensorError> {
    match attrs.get(key) {
        None => Ok(default),
        Some(AttrValue::Bool(v)) => Ok(*v),
        other => Err(TensorError::InvalidAttr {
            op: op.into(),
            detail: format!("'{key}' must be a bool, got {other:?}"),
        }),
    }
}

fn attr_usize_list(attrs: &Attrs, op: &str, key: &str) -> Result<Vec<usize>, TensorError> {
    match attrs.get(key) {
        Some(AttrValue::IntList(v)) => v
            .iter()
            .map(|&x| {
                usize::try_from(x).map_err(|_| TensorError::InvalidAttr {
                    op: op.into(),
                    detail: format!("'{key}' entries must be non-negative, got {x}"),
                })
            })
            .collect(),
        other => Err(TensorError::InvalidAttr {
            op: op.into(),
            detail: format!("'{key}' must be an int list, got {other:?}"),
        }),
    }
}

fn expect_arity<F: Scalar>(op: &str, inputs: &[&Tensor<F>], n: usize) -> Result<(), TensorError> {
    if inputs.len() != n {
        return Err(TensorError::InvalidAttr {
            op: op.into(),
            detail: format!("expected {n} input(s), got {}", inputs.len()),
        });
    }
    Ok(())
}

/// Apply a catalog op by name. Unknown kinds report an error; shape
/// violations name the op and the offending dimensions.
pub fn forward_op<F: Scalar>(
    kind: &str,
    inputs: &[&Tensor<F>],
    attrs: &Attrs,
) -> Result<Tensor<F>, TensorError> {
    match kind {
        "matmul" => {
            expect_arity(kind, inputs, 2)?;
            inputs[0].matmul(inputs[1])
        }
        "add" => {
            expect_arity(kind, inputs, 2)?;
            inputs[0].add(inputs[1])
        }
        "mul" => {
            expect_arity(kind, inputs, 2)?;
            inputs[0].mul(inputs[1])
        }
        "sub" => {
            expect_arity(kind, inputs, 2)?;
            inputs[0].sub(inputs[1])
        }
        "abs" => {
            expect_arity(kind, inputs, 1)?;
            Ok(inputs[0].abs())
        }
        "sigmoid" => {
            expect_arity(kind, inputs, 1)?;
            Ok(inputs[0].sigmoid())
        }
        "relu" => {
            expect_arity(kind, inputs, 1)?;
            Ok(inputs[0].relu())
        }
        "tanh" => {
            expect_arity(kind, inputs, 1)?;
            Ok(inputs[0].tanh())
        }
        "softmax" => {
            expect_arity(kind, inputs, 1)?;
            let axis = attr_int(attrs, kind, "axis")? as usize;
            inputs[0].softmax(axis)
        }
        "log" => {
            expect_arity(kind, inputs, 1)?;
            Ok(inputs[0].log())
        }
        "exp" => {
            expect_arity(kind, inputs, 1)?;
            Ok(inputs[0].exp())
        }
        "sum" => {
            expect_arity(kind, inputs, 1)?;
            let axis = attr_int_opt(attrs, kind, "axis")?.map(|a| a as usize);
            let keepdims = attr_bool_or(attrs, kind, "keepdims", false)?;
            inputs[0].sum(axis, keepdims)
        }
        "mean" => {
            expect_arity(kind, inputs, 1)?;
            let axis = attr_int_opt(attrs, kind, "axis")?.map(|a| a as usize);
            let keepdims = attr_bool_or(attrs, kind, "keepdims", false)?;
            inputs[0].mean(axis, keepdims)
        }
        "embedding_lookup" => {
            expect_arity(kind, inputs, 1)?;
            let ids = attr_usize_list(attrs, kind, "ids")?;
            let ids_shape = match attrs.get("ids_shape") {
                Some(_) => attr_usize_list(attrs, kind, "ids_shape")?,
                None => vec![ids.len()],
            };
            inputs[0].embedding_lookup(&ids, &ids_shape)
        }
        "layer_norm" => {
            expect_arity(kind, inputs, 3)?;
            let eps = match attrs.get("eps") {
                Some(_) => attr_float(attrs, kind, "eps")?,
                None => 1e-5,
            };
            inputs[0].layer_norm(inputs[1], inputs[2], eps)
        }
        "concat" => {
            if inputs.is_empty() {
                return Err(TensorError::InvalidAttr {
                    op: kind.into(),
                    detail: "expected at least one input".into(),
                });
            }
            let axis = attr_int(attrs, kind, "axis")? as usize;
            let owned: Vec<Tensor<F>> = inputs.iter().map(|t| (*t).clone()).collect();
            Tensor::concat(&owned, axis)
        }
        "slice" => {
            expect_arity(kind, inputs, 1)?;
            let axis = attr_int(attrs, kind, "axis")? as usize;
            let start = attr_int(attrs, kind, "start")? as usize;
            let end = attr_int(attrs, kind, "end")? as usize;
            inputs[0].slice(axis, start, end)
        }
        "reshape" => {
            expect_arity(kind, inputs, 1)?;
            let shape = attr_usize_list(attrs, kind, "shape")?;
            inputs[0].reshape(&shape)
        }
        "transpose" => {
            expect_arity(kind, inputs, 1)?;
            let rank = inputs[0].shape().len();
            let d0 = attr_int_opt(attrs, kind, "dim0")?.map(|v| v as usize).unwrap_or(rank.saturating_sub(2));
            let d1 = attr_int_opt(attrs, kind, "dim1")?.map(|v| v as usize).unwrap_or(rank.saturating_sub(1));
            inputs[0].transpose(d0, d1)
        }
        "dropout" => {
            expect_arity(kind, inputs, 1)?;
            let p = attr_float(attrs, kind, "p")?;
            let seed = attr_int(attrs, kind, "seed")? as u64;
            let mut rng = RngStream::named(seed, "dropout");
            inputs[0].dropout(p, &mut rng)
        }
        "scale" => {
            expect_arity(kind, inputs, 1)?;
            let c = attr_float(attrs, kind, "factor")?;
            Ok(inputs[0].scale(F::from_f64(c)))
        }
        other => Err(TensorError::UnknownKind(other.to_string())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_kind_is_rejected() {
        let x = Tensor::<f64>::ones(&[2]);
        let err = forward_op("conv2d", &[&x], &Attrs::new()).unwrap_err();
        assert!(matches!(err, TensorError::UnknownKind(k) if k == "conv2d"));
    }

    #[test]
    fn dispatch_matches_typed_path() {
        let a = Tensor::<f64>::from_vec(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::<f64>::from_vec(vec![2, 2], vec![5.0, 6.0, 7.0, 8.0]).unwrap();
        let via_dispatch = forward_op("matmul", &[&a, &b], &Attrs::new()).unwrap();
        let via_method = a.matmul(&b).unwrap();
        assert_eq!(via_dispatch.to_vec(), via_method.to_vec());
    }

    #[test]
    fn softmax_requires_axis_attr() {
        let x = Tensor::<f64>::ones(&[2, 2]);
        assert!(forward_op("softmax", &[&x], &Attrs::new()).is_err());
        let mut attrs = Attrs::new();
        attrs.insert("axis".into(), AttrValue::Int(1));
        assert!(forward_op("softmax", &[&x], &attrs).is_ok());
    }

    #[test]
    fn graph_flows_through_dispatch() {
        let x = Tensor::<f64>::param(vec![3], vec![1.0, -2.0, 3.0]).unwrap();
        let y = forward_op("abs", &[&x], &Attrs::new()).unwrap();
        let mut attrs = Attrs::new();
        attrs.insert("keepdims".into(), AttrValue::Bool(false));
        let loss = forward_op("sum", &[&y], &attrs).unwrap();
        let grads = crate::tensor::backward(&loss).unwrap();
        assert_eq!(grads.get(&x).unwrap(), &vec![1.0, -1.0, 1.0]);
    }
}
