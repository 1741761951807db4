use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::tape::{BackwardRule, Tape, Var};
use super::{broadcast_shape, broadcast_strides, for_each_offset, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

impl BinaryKind {
    fn name(self) -> &'static str {
        match self {
            BinaryKind::Add => "add",
            BinaryKind::Sub => "sub",
            BinaryKind::Mul => "mul",
            BinaryKind::Div => "div",
        }
    }

    #[inline]
    fn apply<S: Scalar>(self, a: S, b: S) -> S {
        match self {
            BinaryKind::Add => a + b,
            BinaryKind::Sub => a - b,
            BinaryKind::Mul => a * b,
            BinaryKind::Div => a / b,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceKind {
    Sum,
    Mean,
}

/// Element-wise `a kind b` with broadcasting, outside of any tape.
pub fn binary<S: Scalar>(kind: BinaryKind, a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    let out_shape = broadcast_shape(a.shape(), b.shape()).ok_or_else(|| Error::ShapeMismatch {
        op: kind.name(),
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    })?;
    if kind == BinaryKind::Div && b.data().iter().any(|v| v.is_zero()) {
        return Err(Error::DivideByZero { op: "div" });
    }
    if a.shape() == b.shape() {
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| kind.apply(x, y)).collect();
        return Ok(Tensor::from_parts(out_shape, data));
    }
    let sa = broadcast_strides(a.shape(), &out_shape);
    let sb = broadcast_strides(b.shape(), &out_shape);
    let n: usize = out_shape.iter().product();
    let mut data = vec![S::zero(); n];
    let (ad, bd) = (a.data(), b.data());
    for_each_offset(&out_shape, [&sa, &sb], |flat, [oa, ob]| {
        data[flat] = kind.apply(ad[oa], bd[ob]);
    });
    Ok(Tensor::from_parts(out_shape, data))
}

fn normalize_axes(axes: &[usize], rank: usize) -> Result<Vec<bool>> {
    let mut mask = vec![false; rank];
    for &ax in axes {
        if ax >= rank {
            return Err(Error::AxisOutOfRange { axis: ax, rank });
        }
        mask[ax] = true;
    }
    Ok(mask)
}

/// Sum or mean over `axes`; reduced axes are dropped unless `keep_dims`.
pub fn reduce<S: Scalar>(
    kind: ReduceKind,
    x: &Tensor<S>,
    axes: &[usize],
    keep_dims: bool,
) -> Result<Tensor<S>> {
    let mask = normalize_axes(axes, x.rank())?;
    let kept: Vec<usize> =
        x.shape().iter().zip(&mask).map(|(&d, &m)| if m { 1 } else { d }).collect();
    let count: usize = x.shape().iter().zip(&mask).filter(|(_, &m)| m).map(|(&d, _)| d).product();
    let out_strides = broadcast_strides(&kept, x.shape());
    let mut acc = vec![S::zero(); kept.iter().product()];
    let xd = x.data();
    for_each_offset(x.shape(), [&out_strides], |flat, [o]| acc[o] += xd[flat]);
    if kind == ReduceKind::Mean {
        let c = S::lit(count as f64);
        for v in &mut acc {
            *v /= c;
        }
    }
    let shape = if keep_dims {
        kept
    } else {
        x.shape().iter().zip(&mask).filter(|(_, &m)| !m).map(|(&d, _)| d).collect()
    };
    Ok(Tensor::from_parts(shape, acc))
}

struct BinaryBackward {
    kind: BinaryKind,
}

impl<S: Scalar> BackwardRule<S> for BinaryBackward {
    fn name(&self) -> &'static str {
        self.kind.name()
    }

    fn backward(
        &self,
        inputs: &[&Tensor<S>],
        output: &Tensor<S>,
        grad: &Tensor<S>,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor<S>>>> {
        let (a, b) = (inputs[0], inputs[1]);
        let out_shape = output.shape();
        let sa = broadcast_strides(a.shape(), out_shape);
        let sb = broadcast_strides(b.shape(), out_shape);
        let mut ga = needs[0].then(|| Tensor::zeros_like(a));
        let mut gb = needs[1].then(|| Tensor::zeros_like(b));
        let (ad, bd, gd) = (a.data(), b.data(), grad.data());
        let kind = self.kind;
        for_each_offset(out_shape, [&sa, &sb], |flat, [oa, ob]| {
            let g = gd[flat];
            let (da, db) = match kind {
                BinaryKind::Add => (g, g),
                BinaryKind::Sub => (g, -g),
                BinaryKind::Mul => (g * bd[ob], g * ad[oa]),
                BinaryKind::Div => {
                    let inv = S::one() / bd[ob];
                    (g * inv, -g * ad[oa] * inv * inv)
                }
            };
            if let Some(t) = ga.as_mut() {
                t.data_mut()[oa] += da;
            }
            if let Some(t) = gb.as_mut() {
                t.data_mut()[ob] += db;
            }
        });
        Ok(vec![ga, gb])
    }
}

struct ReduceBackward {
    kind: ReduceKind,
    mask: Vec<bool>,
}

impl<S: Scalar> BackwardRule<S> for ReduceBackward {
    fn name(&self) -> &'static str {
        match self.kind {
            ReduceKind::Sum => "sum",
            ReduceKind::Mean => "mean",
        }
    }

    fn backward(
        &self,
        inputs: &[&Tensor<S>],
        _output: &Tensor<S>,
        grad: &Tensor<S>,
        _needs: &[bool],
    ) -> Result<Vec<Option<Tensor<S>>>> {
        let x = inputs[0];
        let kept: Vec<usize> =
            x.shape().iter().zip(&self.mask).map(|(&d, &m)| if m { 1 } else { d }).collect();
        let count: usize =
            x.shape().iter().zip(&self.mask).filter(|(_, &m)| m).map(|(&d, _)| d).product();
        let scale = match self.kind {
            ReduceKind::Sum => S::one(),
            ReduceKind::Mean => S::one() / S::lit(count as f64),
        };
        let strides = broadcast_strides(&kept, x.shape());
        let mut gx = vec![S::zero(); x.numel()];
        let gd = grad.data();
        for_each_offset(x.shape(), [&strides], |flat, [o]| gx[flat] = gd[o] * scale);
        Ok(vec![Some(Tensor::from_parts(x.shape().to_vec(), gx))])
    }
}

struct ReshapeBackward;

impl<S: Scalar> BackwardRule<S> for ReshapeBackward {
    fn name(&self) -> &'static str {
        "reshape"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<S>],
        _output: &Tensor<S>,
        grad: &Tensor<S>,
        _needs: &[bool],
    ) -> Result<Vec<Option<Tensor<S>>>> {
        Ok(vec![Some(Tensor::from_parts(inputs[0].shape().to_vec(), grad.data().to_vec()))])
    }
}

impl<S: Scalar> Tape<S> {
    pub fn binary(&mut self, kind: BinaryKind, a: Var, b: Var) -> Result<Var> {
        let out = binary(kind, self.try_value(a)?, self.try_value(b)?)?;
        self.record(out, &[a, b], BinaryBackward { kind })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Div, a, b)
    }

    pub fn reduce(&mut self, kind: ReduceKind, x: Var, axes: &[usize], keep_dims: bool) -> Result<Var> {
        let xv = self.try_value(x)?;
        let mask = normalize_axes(axes, xv.rank())?;
        let out = reduce(kind, xv, axes, keep_dims)?;
        self.record(out, &[x], ReduceBackward { kind, mask })
    }

    /// Sum of every element, as a rank-0 tensor.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let axes: Vec<usize> = (0..self.try_value(x)?.rank()).collect();
        self.reduce(ReduceKind::Sum, x, &axes, false)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let axes: Vec<usize> = (0..self.try_value(x)?.rank()).collect();
        self.reduce(ReduceKind::Mean, x, &axes, false)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.try_value(x)?.clone().reshape(shape)?;
        self.record(out, &[x], ReshapeBackward)
    }
}
