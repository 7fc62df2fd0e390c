//! Query-pool regularization.
//!
//! The similarity profile of a shallow query against a layer's keys is
//! pulled toward the profile of a deep reference query against the same
//! keys. The term is only built during training.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};
use crate::vit::{LayerSelect, ViTModel};

fn default_lambda() -> f64 {
    1e-4
}

fn yes() -> bool {
    true
}

fn last() -> LayerSelect {
    LayerSelect::Last
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QrConfig {
    /// Off: no reference queries are built and the loss is plain CE.
    #[serde(default)]
    pub enabled: bool,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(default = "yes")]
    pub use_cosine: bool,
    #[serde(default = "yes")]
    pub use_softmax: bool,
    #[serde(default = "last")]
    pub ref_layer: LayerSelect,
}

impl Default for QrConfig {
    fn default() -> Self {
        Self {
            enabled: false,
            lambda: default_lambda(),
            use_cosine: true,
            use_softmax: true,
            ref_layer: LayerSelect::Last,
        }
    }
}

impl QrConfig {
    pub fn validate(&self, depth: usize, max_prompted: usize) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("lambda {} must be a finite value >= 0", self.lambda)));
        }
        let l = self.ref_layer.resolve(depth);
        if l <= max_prompted || l > depth {
            return Err(Error::Config(format!(
                "ref_layer {} must lie in ({max_prompted}, {depth}]",
                self.ref_layer
            )));
        }
        Ok(())
    }
}

/// Prompt-free [CLS] embedding of the frozen reference network at `ref_layer`.
pub fn reference_query(image: &Tensor, reference: &ViTModel, ref_layer: LayerSelect) -> Result<Vec<f64>> {
    reference.forward_plain_cls(image, ref_layer)
}

/// Similarity profile of `q` (`1×D`) against `keys` (`M×D`), as an `M×1` column.
///
/// With `use_cosine` the scores are row-wise cosines, otherwise raw dot
/// products; with `use_softmax` they are softmax-normalized over the `M` keys.
pub fn profile_on_tape(tape: &mut Tape, q: Var, keys: Var, config: &QrConfig) -> Result<Var> {
    let scores = if config.use_cosine {
        let kn = tape.normalize_rows(keys)?;
        let qn = tape.normalize_rows(q)?;
        tape.matmul_nt(kn, qn)?
    } else {
        tape.matmul_nt(keys, q)?
    };
    if config.use_softmax {
        tape.softmax(scores, 0)
    } else {
        Ok(scores)
    }
}

/// Plain-value `(A_query, A_ref)` for one layer.
pub fn similarity_profiles(q: &[f64], r: &[f64], keys: &Tensor, config: &QrConfig) -> Result<(Vec<f64>, Vec<f64>)> {
    let d = keys.cols();
    if q.len() != d || r.len() != d {
        return Err(Error::dim(
            "similarity_profiles",
            format!("query {} / reference {} vs key width {d}", q.len(), r.len()),
        ));
    }
    let mut tape = Tape::new();
    let k = tape.constant(keys);
    let qv = tape.constant_from(vec![1, d], q.to_vec())?;
    let rv = tape.constant_from(vec![1, d], r.to_vec())?;
    let a_q = profile_on_tape(&mut tape, qv, k, config)?;
    let a_r = profile_on_tape(&mut tape, rv, k, config)?;
    Ok((tape.value(a_q).to_vec(), tape.value(a_r).to_vec()))
}

/// `Σ_l ‖A_query^l − A_ref^l‖²` over `(A_query, A_ref)` pairs.
pub fn qr_loss_on_tape(tape: &mut Tape, profiles: &[(Var, Var)]) -> Result<Var> {
    let mut total: Option<Var> = None;
    for &(a_q, a_r) in profiles {
        let diff = tape.sub(a_q, a_r)?;
        let sq = tape.mul(diff, diff)?;
        let s = tape.sum(sq);
        total = Some(match total {
            Some(t) => tape.add(t, s)?,
            None => s,
        });
    }
    match total {
        Some(t) => Ok(t),
        None => tape.constant_from(vec![1], vec![0.0]),
    }
}

/// Plain-value QR loss.
pub fn qr_loss(profiles: &[(Vec<f64>, Vec<f64>)]) -> Result<f64> {
    let mut tape = Tape::new();
    let mut vars = Vec::with_capacity(profiles.len());
    for (a, b) in profiles {
        let av = tape.constant(&Tensor::vector(a.clone()));
        let bv = tape.constant(&Tensor::vector(b.clone()));
        vars.push((av, bv));
    }
    let l = qr_loss_on_tape(&mut tape, &vars)?;
    Ok(tape.value(l)[0])
}

/// `ce + λ·qr`.
pub fn total_loss_on_tape(tape: &mut Tape, ce: Var, qr: Var, lambda: f64) -> Result<Var> {
    if !(lambda >= 0.0) {
        return Err(Error::contract(format!("lambda {lambda} must be >= 0")));
    }
    let weighted = tape.scale(qr, lambda);
    tape.add(ce, weighted)
}

pub fn total_loss(ce: f64, qr: f64, lambda: f64) -> Result<f64> {
    let mut tape = Tape::new();
    let c = tape.constant(&Tensor::scalar(ce));
    let q = tape.constant(&Tensor::scalar(qr));
    let t = total_loss_on_tape(&mut tape, c, q, lambda)?;
    Ok(tape.value(t)[0])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_queries_give_identical_profiles() {
        let keys = Tensor::from_rows(&[vec![1.0, 2.0], vec![-0.5, 0.3], vec![0.0, 1.0]]).unwrap();
        let (a, b) = similarity_profiles(&[0.3, 0.7], &[0.3, 0.7], &keys, &QrConfig::default()).unwrap();
        assert_eq!(a, b);
        let s: f64 = a.iter().sum();
        assert!((s - 1.0).abs() < 1e-12);
    }

    #[test]
    fn two_key_softmax_by_hand() {
        let keys = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let (a, _) = similarity_profiles(&[2.0, 0.0], &[1.0, 1.0], &keys, &QrConfig::default()).unwrap();
        assert!((a[0] - 0.73106).abs() < 1e-5);
        assert!((a[1] - 0.26894).abs() < 1e-5);
    }

    #[test]
    fn loss_by_hand_and_total() {
        assert_eq!(qr_loss(&[(vec![0.2, 0.8], vec![0.2, 0.8])]).unwrap(), 0.0);
        let l = qr_loss(&[(vec![0.73106, 0.26894], vec![0.5, 0.5])]).unwrap();
        assert!((l - 0.10678).abs() < 1e-4);
        assert_eq!(total_loss(0.69315, 0.10678, 0.0).unwrap(), 0.69315);
        let t = total_loss(0.69315, 0.10678, 1e-4).unwrap();
        assert!((t - 0.6931607).abs() < 1e-6);
        assert!(total_loss(1.0, 1.0, -1.0).is_err());
    }

    #[test]
    fn toggles_off_give_raw_dots() {
        let keys = Tensor::from_rows(&[vec![2.0, 0.0], vec![0.0, 3.0]]).unwrap();
        let cfg = QrConfig {
            use_cosine: false,
            use_softmax: false,
            ..QrConfig::default()
        };
        let (a, _) = similarity_profiles(&[1.0, 2.0], &[1.0, 1.0], &keys, &cfg).unwrap();
        assert_eq!(a, vec![2.0, 6.0]);
    }

    #[test]
    fn zero_norm_key_is_rejected() {
        let keys = Tensor::from_rows(&[vec![0.0, 0.0], vec![0.0, 3.0]]).unwrap();
        assert!(matches!(
            similarity_profiles(&[1.0, 2.0], &[1.0, 1.0], &keys, &QrConfig::default()),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn default_lambda_and_validation() {
        let cfg = QrConfig::default();
        assert_eq!(cfg.lambda, 1e-4);
        assert!(cfg.validate(6, 5).is_ok());
        let shallow = QrConfig {
            ref_layer: LayerSelect::Layer(5),
            ..cfg
        };
        assert!(shallow.validate(6, 5).is_err());
        let cfg: QrConfig = serde_json::from_str(r#"{"lambda": 5e-4, "ref_layer": 8}"#).unwrap();
        assert_eq!(cfg.ref_layer, LayerSelect::Layer(8));
        assert!(serde_json::from_str::<QrConfig>(r#"{"lamda": 1}"#).is_err());
    }
}
