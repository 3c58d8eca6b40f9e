use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::model::{Net, ParamId, Params};
use crate::numerics::{Graph, Tensor};

/// Exponential-moving-average shadows of the unimodal encoders and the
/// coarse projections.
#[derive(Clone, Debug, PartialEq)]
pub struct MomentumState {
    pub alpha: f64,
    shadow: BTreeMap<ParamId, Tensor>,
}

impl MomentumState {
    /// Shadows start as copies of the live tensors.
    pub fn new(live: &Params, alpha: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&alpha) {
            return Err(Error::Config(format!("momentum coefficient {alpha} outside [0, 1)")));
        }
        let shadow = live
            .layout
            .momentum_ids(&live.store)
            .into_iter()
            .map(|id| (id, live.store.get(id).clone()))
            .collect();
        Ok(Self { alpha, shadow })
    }

    pub fn from_parts(alpha: f64, shadow: BTreeMap<ParamId, Tensor>) -> Self {
        Self { alpha, shadow }
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.shadow.get(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.shadow.iter().map(|(&id, t)| (id, t))
    }

    pub fn len(&self) -> usize {
        self.shadow.len()
    }

    pub fn is_empty(&self) -> bool {
        self.shadow.is_empty()
    }

    /// Binds live parameters with every mirrored tensor replaced by its shadow.
    pub fn bind(&self, live: &Params, g: &mut Graph) -> Net {
        live.bind_with(g, |id| self.shadow.get(&id))
    }
}

/// `shadow ← α·shadow + (1−α)·live` for every mirrored tensor.
pub fn momentum_update(live: &Params, state: &mut MomentumState) -> Result<()> {
    let alpha = state.alpha;
    for (&id, shadow) in state.shadow.iter_mut() {
        if id.0 >= live.store.len() {
            return Err(Error::Contract(format!("momentum tensor {} has no live counterpart", id.0)));
        }
        let current = live.store.get(id);
        if current.shape() != shadow.shape() {
            return Err(Error::Contract(format!(
                "momentum shadow of {} has shape {:?}, live has {:?}",
                live.store.name(id),
                shadow.shape(),
                current.shape()
            )));
        }
        for (s, &l) in shadow.data_mut().iter_mut().zip(current.data()) {
            *s = alpha * *s + (1.0 - alpha) * l;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::numerics::Rng;

    fn params() -> Params {
        let cfg = ModelConfig {
            d: 8,
            heads: 2,
            n_cross_layers: 2,
            bidiratt_layer: 1,
            proj_dim: 4,
            patch_grid: (2, 2),
            patch_pixels: 3,
            vocab_size: 10,
            ..ModelConfig::default()
        };
        Params::init(&cfg, &mut Rng::seed(0)).unwrap()
    }

    fn fill(p: &mut Params, value: f64) {
        let ids: Vec<_> = p.store.ids().collect();
        for id in ids {
            p.store.get_mut(id).data_mut().fill(value);
        }
    }

    #[test]
    fn alpha_zero_copies_live() {
        let mut p = params();
        let mut m = MomentumState::new(&p, 0.0).unwrap();
        fill(&mut p, 0.5);
        momentum_update(&p, &mut m).unwrap();
        for (id, t) in m.iter() {
            assert_eq!(t, p.store.get(id));
        }
    }

    #[test]
    fn one_step_by_hand() {
        let mut p = params();
        fill(&mut p, 0.0);
        let mut m = MomentumState::new(&p, 0.995).unwrap();
        fill(&mut p, 1.0);
        momentum_update(&p, &mut m).unwrap();
        for (_, t) in m.iter() {
            assert!(t.data().iter().all(|&v| (v - 0.005).abs() < 1e-15));
        }
    }

    #[test]
    fn converges_geometrically() {
        let mut p = params();
        fill(&mut p, 0.0);
        let mut m = MomentumState::new(&p, 0.9).unwrap();
        fill(&mut p, 1.0);
        for k in 1..=50 {
            momentum_update(&p, &mut m).unwrap();
            let expected = 1.0 - 0.9f64.powi(k);
            for (_, t) in m.iter() {
                assert!((t.data()[0] - expected).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn shape_drift_is_a_contract_error() {
        let p = params();
        let mut m = MomentumState::new(&p, 0.5).unwrap();
        let id = p.layout.proj_image.w;
        let mut shadow: BTreeMap<_, _> = m.iter().map(|(i, t)| (i, t.clone())).collect();
        shadow.insert(id, Tensor::zeros(&[1, 1]));
        m = MomentumState::from_parts(0.5, shadow);
        assert!(matches!(momentum_update(&p, &mut m), Err(Error::Contract(_))));
        assert!(MomentumState::new(&p, 1.0).is_err());
    }
}
