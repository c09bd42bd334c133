//! Stand-alone capsule primitives. Each one runs on a throwaway [`Graph`] so
//! the arithmetic is exactly the one used inside the networks.

use super::LossConfig;
use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Squash every vector along the last axis.
pub fn squash(s: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let x = g.constant(s.clone());
    let v = g.squash(x)?;
    Ok(g.value(v).clone())
}

/// `û_{j|i} = W_ij u_i` for `u: [I, d_in]`, `w: [I, J, d_out, d_in]`.
pub fn predict_vectors(u: &Tensor, w: &Tensor) -> Result<Tensor> {
    if u.rank() != 2 {
        return Err(Error::Shape(format!("predict_vectors: u must be [I, d_in], got {:?}", u.shape())));
    }
    let mut g = Graph::new();
    let uv = g.constant(u.clone());
    let wv = g.constant(w.clone());
    let out = g.caps_predict(uv, wv)?;
    Ok(g.value(out).clone())
}

/// State after one routing iteration. `b` holds the logits the couplings
/// were computed from.
#[derive(Debug, Clone, PartialEq)]
pub struct RoutingStep {
    pub b: Tensor,
    pub c: Tensor,
    pub s: Tensor,
    pub v: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoutingState {
    pub u_hat: Tensor,
    pub steps: Vec<RoutingStep>,
}

impl RoutingState {
    fn last(&self) -> &RoutingStep {
        self.steps.last().expect("at least one iteration")
    }

    pub fn b(&self) -> &Tensor {
        &self.last().b
    }

    pub fn c(&self) -> &Tensor {
        &self.last().c
    }

    pub fn s(&self) -> &Tensor {
        &self.last().s
    }

    pub fn v(&self) -> &Tensor {
        &self.last().v
    }
}

/// Vars of one routing iteration on a graph.
pub(crate) struct RoutingVars {
    pub b: Var,
    pub c: Var,
    pub s: Var,
    pub v: Var,
}

/// Dynamic routing over `uhat: [.., I, J, D]` (batched or not). The logits
/// start at zero and are updated on every iteration but the last.
pub(crate) fn route_on_graph(g: &mut Graph, uhat: Var, r: usize) -> Result<(Var, Vec<RoutingVars>)> {
    if r == 0 {
        return Err(Error::Config("routing needs at least one iteration".into()));
    }
    let shape = g.shape(uhat).to_vec();
    if shape.len() < 3 {
        return Err(Error::Shape(format!("route: û must be [.., I, J, D], got {shape:?}")));
    }
    let upper_axis = shape.len() - 2;
    let mut b = g.constant(Tensor::zeros(&shape[..shape.len() - 1]));
    let mut steps = Vec::with_capacity(r);
    for it in 0..r {
        let c = g.softmax(b, upper_axis)?;
        let s = g.weighted_sum(c, uhat)?;
        let v = g.squash(s)?;
        steps.push(RoutingVars { b, c, s, v });
        if it + 1 < r {
            let a = g.agreement(uhat, v)?;
            b = g.add(b, a)?;
        }
    }
    let v = steps.last().expect("r ≥ 1").v;
    Ok((v, steps))
}

/// Route `u_hat: [I, J, D]` for `r` iterations; returns `v: [J, D]` and the
/// full trajectory.
pub fn route(u_hat: &Tensor, r: usize) -> Result<(Tensor, RoutingState)> {
    if u_hat.rank() != 3 {
        return Err(Error::Shape(format!("route: û must be [I, J, D], got {:?}", u_hat.shape())));
    }
    let mut g = Graph::new();
    let u = g.constant(u_hat.clone());
    let (v, vars) = route_on_graph(&mut g, u, r)?;
    let steps = vars
        .iter()
        .map(|s| RoutingStep {
            b: g.value(s.b).clone(),
            c: g.value(s.c).clone(),
            s: g.value(s.s).clone(),
            v: g.value(s.v).clone(),
        })
        .collect();
    Ok((
        g.value(v).clone(),
        RoutingState {
            u_hat: u_hat.clone(),
            steps,
        },
    ))
}

/// Margin loss of one sample.
pub fn margin_loss(v_lengths: &[f64], target: usize, cfg: &LossConfig) -> Result<f64> {
    let mut g = Graph::new();
    let l = g.constant(Tensor::new(&[v_lengths.len()], v_lengths.to_vec())?);
    let loss = g.margin_loss(l, &[target], cfg.m_plus, cfg.m_minus, cfg.lambda)?;
    Ok(g.value(loss).item())
}

/// `margin + α·reconstruction`; the reconstruction term is absent when the
/// decoder is disabled.
pub fn total_loss(margin: f64, reconstruction_mse: Option<f64>, cfg: &LossConfig) -> f64 {
    match reconstruction_mse {
        Some(r) => margin + cfg.alpha * r,
        None => margin,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskSelect {
    Label(usize),
    Prediction,
}

/// Zero every capsule of `v: [K, D]` but the selected one, then flatten.
pub fn mask_digitcaps(v: &Tensor, select: MaskSelect) -> Result<Vec<f64>> {
    let [k, d] = v.shape() else {
        return Err(Error::Shape(format!("mask_digitcaps: v must be [K, D], got {:?}", v.shape())));
    };
    let (k, d) = (*k, *d);
    let keep = match select {
        MaskSelect::Label(l) if l < k => l,
        MaskSelect::Label(l) => {
            return Err(Error::Contract(format!("mask label {l} out of range for {k} classes")))
        }
        MaskSelect::Prediction => {
            let lengths: Vec<f64> = v
                .data()
                .chunks_exact(d)
                .map(|c| c.iter().map(|x| x * x).sum::<f64>().sqrt())
                .collect();
            super::argmax_lowest(&lengths)
        }
    };
    let mut out = vec![0.0; k * d];
    out[keep * d..(keep + 1) * d].copy_from_slice(&v.data()[keep * d..(keep + 1) * d]);
    Ok(out)
}
