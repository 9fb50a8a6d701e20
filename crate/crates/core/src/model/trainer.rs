//! Deterministic toy trainer.
//!
//! Gradients are synthetic: element `i` of parameter `p` at step `t` is
//! `unit_value(element_bits(stream_key(grad_seed, root(p), "grad/<t>"), i))`,
//! where `root(p)` is the first member of `p`'s tie group. Adam is applied
//! elementwise in f64 with this exact operation order:
//!
//! ```text
//! m' = beta1 * m + (1 - beta1) * g
//! v' = beta2 * v + ((1 - beta2) * g) * g
//! w' = w - (lr * (m' / bc1)) / (sqrt(v' / bc2) + eps)
//! ```
//!
//! with `bc_k = 1 - beta_k^(t+1)` computed by repeated multiplication. Each
//! result is rounded to f32 when stored. Because nothing couples elements,
//! stepping any shard of a parameter equals the matching shard of the stepped
//! parameter.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{ModelSpec, ModelState};
use crate::error::{Result, UcpError};
use crate::tensor::{element_bits, stream_key, unit_value};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainerConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub grad_seed: u64,
    pub steps: u64,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        TrainerConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            grad_seed: 0x5EED,
            steps: 100,
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = |b: f64| b > 0.0 && b < 1.0;
        if !ok(self.beta1) || !ok(self.beta2) {
            return Err(UcpError::InvalidSpec(format!(
                "betas ({}, {}) must lie in (0, 1)",
                self.beta1, self.beta2
            )));
        }
        Ok(())
    }
}

/// Adam constants for one step.
#[derive(Debug, Clone, Copy)]
pub struct AdamStep {
    pub step: u64,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    bc1: f64,
    bc2: f64,
}

impl AdamStep {
    pub fn new(cfg: &TrainerConfig, step: u64) -> Self {
        let (mut p1, mut p2) = (1.0f64, 1.0f64);
        for _ in 0..=step {
            p1 *= cfg.beta1;
            p2 *= cfg.beta2;
        }
        AdamStep {
            step,
            lr: cfg.lr,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            bc1: 1.0 - p1,
            bc2: 1.0 - p2,
        }
    }

    pub fn grad_key(cfg: &TrainerConfig, root_name: &str, step: u64) -> u64 {
        stream_key(cfg.grad_seed, root_name, &format!("grad/{step}"))
    }

    #[inline]
    pub fn apply(&self, g: f64, w: &mut f32, m: &mut f32, v: &mut f32) {
        let m1 = self.beta1 * (*m as f64) + (1.0 - self.beta1) * g;
        let v1 = self.beta2 * (*v as f64) + ((1.0 - self.beta2) * g) * g;
        let mhat = m1 / self.bc1;
        let vhat = v1 / self.bc2;
        let w1 = (*w as f64) - (self.lr * mhat) / (vhat.sqrt() + self.eps);
        *w = w1 as f32;
        *m = m1 as f32;
        *v = v1 as f32;
    }
}

/// Trains a fragment whose element `j` is global element `index(j)` of the
/// parameter with tie-root `root_name`.
pub fn train_fragment(
    cfg: &TrainerConfig,
    root_name: &str,
    from_step: u64,
    n: u64,
    index: impl Fn(usize) -> u64 + Sync,
    w: &mut [f32],
    m: &mut [f32],
    v: &mut [f32],
) {
    assert!(w.len() == m.len() && m.len() == v.len(), "fragment triple lengths differ");
    for t in from_step..from_step + n {
        let step = AdamStep::new(cfg, t);
        let key = AdamStep::grad_key(cfg, root_name, t);
        for (j, ((w, m), v)) in w.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).enumerate() {
            let g = unit_value(element_bits(key, index(j))) as f64;
            step.apply(g, w, m, v);
        }
    }
}

pub fn train_steps(spec: &ModelSpec, state: &ModelState, cfg: &TrainerConfig, from_step: u64, n: u64) -> Result<ModelState> {
    cfg.validate()?;
    if state.step != from_step {
        return Err(UcpError::InvalidSpec(format!(
            "state is at step {}, asked to resume from {from_step}",
            state.step
        )));
    }
    let mut out = state.clone();
    out.params.par_iter_mut().for_each(|(name, st)| {
        let root = spec.tied_root(name).to_string();
        let mut w = std::mem::replace(&mut st.weight, crate::tensor::Tensor::scalar(0.0));
        let mut m = std::mem::replace(&mut st.adam_m, crate::tensor::Tensor::scalar(0.0));
        let mut v = std::mem::replace(&mut st.adam_v, crate::tensor::Tensor::scalar(0.0));
        train_fragment(
            cfg,
            &root,
            from_step,
            n,
            |j| j as u64,
            w.as_f32_mut().expect("f32 weight"),
            m.as_f32_mut().expect("f32 m"),
            v.as_f32_mut().expect("f32 v"),
        );
        st.weight = w;
        st.adam_m = m;
        st.adam_v = v;
    });
    out.step = from_step + n;
    out.metadata.insert("iteration".into(), out.step as f64);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_state, make_model, ModelFamily, ModelScale, StateKind};
    use proptest::prelude::*;

    fn setup() -> (ModelSpec, ModelState) {
        let spec = make_model(ModelFamily::DenseGPT, &ModelScale::new(1, 16)).unwrap();
        let st = init_state(&spec, 9);
        (spec, st)
    }

    #[test]
    fn zero_steps_is_identity() {
        let (spec, st) = setup();
        let out = train_steps(&spec, &st, &TrainerConfig::default(), 0, 0).unwrap();
        assert_eq!(out.params, st.params);
        assert_eq!(out.step, 0);
    }

    #[test]
    fn two_equals_one_plus_one() {
        let (spec, st) = setup();
        let cfg = TrainerConfig::default();
        let two = train_steps(&spec, &st, &cfg, 0, 2).unwrap();
        let one = train_steps(&spec, &st, &cfg, 0, 1).unwrap();
        let one_one = train_steps(&spec, &one, &cfg, 1, 1).unwrap();
        assert_eq!(two, one_one);
        assert_ne!(two.params, st.params);
    }

    #[test]
    fn step_mismatch_rejected() {
        let (spec, st) = setup();
        assert!(train_steps(&spec, &st, &TrainerConfig::default(), 3, 1).is_err());
    }

    #[test]
    fn bad_betas_rejected() {
        let (spec, st) = setup();
        let cfg = TrainerConfig {
            beta1: 1.0,
            ..TrainerConfig::default()
        };
        assert!(train_steps(&spec, &st, &cfg, 0, 1).is_err());
    }

    #[test]
    fn tied_params_stay_identical() {
        let (spec, st) = setup();
        let out = train_steps(&spec, &st, &TrainerConfig::default(), 0, 5).unwrap();
        assert_eq!(out.params["embed.weight"], out.params["head.weight"]);
        out.validate(&spec).unwrap();
    }

    #[test]
    fn single_element_matches_scalar_adam() {
        // Oracle: textbook Adam written out for one element, two steps.
        let cfg = TrainerConfig::default();
        let (mut w, mut m, mut v) = (0.5f32, 0.1f32, 0.2f32);
        let (mut ow, mut om, mut ov) = (w, m, v);
        train_fragment(&cfg, "p", 0, 2, |_| 7, std::slice::from_mut(&mut w), std::slice::from_mut(&mut m), std::slice::from_mut(&mut v));
        for t in 0..2u64 {
            let g = unit_value(element_bits(stream_key(cfg.grad_seed, "p", &format!("grad/{t}")), 7)) as f64;
            let m1 = 0.9 * om as f64 + 0.1 * g;
            let v1 = 0.999 * ov as f64 + ((1.0 - 0.999) * g) * g;
            let bc1 = 1.0 - (0..=t).fold(1.0, |a, _| a * 0.9);
            let bc2 = 1.0 - (0..=t).fold(1.0, |a, _| a * 0.999);
            ow = (ow as f64 - (1e-3 * (m1 / bc1)) / ((v1 / bc2).sqrt() + 1e-8)) as f32;
            om = m1 as f32;
            ov = v1 as f32;
        }
        assert_eq!((w.to_bits(), m.to_bits(), v.to_bits()), (ow.to_bits(), om.to_bits(), ov.to_bits()));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn shard_training_commutes(start in 0usize..4096, len in 0usize..512, steps in 1u64..4) {
            let (spec, st) = setup();
            let name = "layers.0.mlp.fc1";
            let n = spec.param(name).unwrap().numel();
            let start = start % n;
            let end = (start + len).min(n);
            let cfg = TrainerConfig::default();
            let full = train_steps(&spec, &st, &cfg, 0, steps).unwrap();
            let p = &st.params[name];
            let mut w = p.weight.slice_flat(start, end).unwrap();
            let mut m = p.adam_m.slice_flat(start, end).unwrap();
            let mut v = p.adam_v.slice_flat(start, end).unwrap();
            train_fragment(&cfg, name, 0, steps, |j| (start + j) as u64,
                w.as_f32_mut().unwrap(), m.as_f32_mut().unwrap(), v.as_f32_mut().unwrap());
            let f = &full.params[name];
            prop_assert_eq!(f.get(StateKind::Weight).slice_flat(start, end).unwrap(), w);
            prop_assert_eq!(f.get(StateKind::AdamM).slice_flat(start, end).unwrap(), m);
            prop_assert_eq!(f.get(StateKind::AdamV).slice_flat(start, end).unwrap(), v);
        }
    }
}
