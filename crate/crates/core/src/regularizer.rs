//! Quantization-aware weight penalties.
//!
//! Two static periodic penalties (`rho_sine`, `rho_cosine`) place evenly
//! spaced minima over a fixed weight range; two dynamic penalties
//! (`rho_minl2`, `rho_exp`) measure the distance to the nearest entry of a
//! learnable codebook and also produce gradients with respect to those
//! entries, so the representatives train alongside the weights.
//!
//! The aggregate penalty is the per-layer mean over weight entries, summed
//! over the selected layers; `reg_value_and_grads` scales gradients by
//! lambda and accumulates them into the existing gradient buffers.

use crate::error::{Error, Result};
use crate::nn::{LayerKind, Model};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RegKind {
    None,
    Sine,
    Cosine,
    MinL2,
    Exp,
}

impl RegKind {
    pub fn is_dynamic(self) -> bool {
        matches!(self, RegKind::MinL2 | RegKind::Exp)
    }

    pub fn is_static(self) -> bool {
        matches!(self, RegKind::Sine | RegKind::Cosine)
    }

    pub fn name(self) -> &'static str {
        match self {
            RegKind::None => "none",
            RegKind::Sine => "sine",
            RegKind::Cosine => "cos",
            RegKind::MinL2 => "minl2",
            RegKind::Exp => "exp",
        }
    }
}

/// Which layers a regularizer (and the quantizer) applies to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerGroup {
    ConvOnly,
    DenseOnly,
    All,
}

impl LayerGroup {
    pub fn selects(self, kind: &LayerKind) -> bool {
        match (self, kind) {
            (LayerGroup::ConvOnly, LayerKind::Conv2d { .. }) => true,
            (LayerGroup::DenseOnly, LayerKind::Dense { .. }) => true,
            (LayerGroup::All, k) => k.is_parameterized(),
            _ => false,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            LayerGroup::ConvOnly => "conv",
            LayerGroup::DenseOnly => "dense",
            LayerGroup::All => "all",
        }
    }
}

/// One codebook per selected layer, or a single codebook shared by all of
/// them.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CodebookMode {
    PerLayer,
    Shared,
}

impl CodebookMode {
    pub fn name(self) -> &'static str {
        match self {
            CodebookMode::PerLayer => "per-layer",
            CodebookMode::Shared => "shared",
        }
    }
}

/// Regularizer configuration. For the static kinds `k`, `w_min`, `w_max`
/// define the minima grid; for the dynamic kinds the range seeds the
/// codebook initialization only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegConfig {
    pub kind: RegKind,
    pub k: usize,
    pub w_min: f64,
    pub w_max: f64,
    pub lambda: f64,
    pub layer_group: LayerGroup,
    pub codebook_mode: CodebookMode,
}

impl RegConfig {
    pub fn new(kind: RegKind, k: usize) -> Self {
        RegConfig {
            kind,
            k,
            w_min: -1.0,
            w_max: 1.0,
            lambda: 0.1,
            layer_group: LayerGroup::All,
            codebook_mode: CodebookMode::PerLayer,
        }
    }

    pub fn none() -> Self {
        Self::new(RegKind::None, 2)
    }

    pub fn validate(&self) -> Result<()> {
        if self.k < 2 {
            return Err(Error::Config(format!("K must be at least 2, got {}", self.k)));
        }
        if !(self.w_min < self.w_max) {
            return Err(Error::Config(format!(
                "weight range [{}, {}] is empty",
                self.w_min, self.w_max
            )));
        }
        if self.kind != RegKind::None && !(self.lambda > 0.0) {
            return Err(Error::Config(format!("lambda must be positive, got {}", self.lambda)));
        }
        Ok(())
    }
}

/// K learnable representatives and their gradient buffer. Entries are not
/// required to be sorted or distinct.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    pub u: Vec<f64>,
    pub grad_u: Vec<f64>,
}

impl Codebook {
    pub fn new(u: Vec<f64>) -> Self {
        let n = u.len();
        Codebook { u, grad_u: vec![0.0; n] }
    }

    pub fn len(&self) -> usize {
        self.u.len()
    }

    pub fn is_empty(&self) -> bool {
        self.u.is_empty()
    }

    pub fn zero_grads(&mut self) {
        self.grad_u.iter_mut().for_each(|g| *g = 0.0);
    }
}

/// |sin(pi (K-1) (wbar - w) / (W - w))|: K minima evenly spaced over
/// [w, W], endpoints included, extended periodically outside the range.
pub fn rho_sine(wbar: f64, k: usize, w: f64, w_max: f64) -> f64 {
    debug_assert!(w < w_max);
    (PI * (k as f64 - 1.0) * (wbar - w) / (w_max - w)).sin().abs()
}

/// |cos(pi K (wbar - w) / (W - w))|: K minima inside (w, W), none on the
/// endpoints.
pub fn rho_cosine(wbar: f64, k: usize, w: f64, w_max: f64) -> f64 {
    debug_assert!(w < w_max);
    (PI * k as f64 * (wbar - w) / (w_max - w)).cos().abs()
}

/// d rho_S / d wbar, with the subgradient 0 at the |.| kinks.
fn rho_sine_grad(wbar: f64, k: usize, w: f64, w_max: f64) -> f64 {
    let a = PI * (k as f64 - 1.0) / (w_max - w);
    let inner = (a * (wbar - w)).sin();
    if inner == 0.0 {
        0.0
    } else {
        a * (a * (wbar - w)).cos() * inner.signum()
    }
}

fn rho_cosine_grad(wbar: f64, k: usize, w: f64, w_max: f64) -> f64 {
    let b = PI * k as f64 / (w_max - w);
    let inner = (b * (wbar - w)).cos();
    if inner == 0.0 {
        0.0
    } else {
        -b * (b * (wbar - w)).sin() * inner.signum()
    }
}

fn nearest_entry(wbar: f64, u: &[f64]) -> (usize, f64) {
    let mut best = 0;
    let mut best_d = (wbar - u[0]).abs();
    for (r, &ur) in u.iter().enumerate().skip(1) {
        let d = (wbar - ur).abs();
        if d < best_d {
            best_d = d;
            best = r;
        }
    }
    (best, best_d)
}

/// min_r (wbar - u_r)^2 and the argmin index (lowest index on ties).
pub fn rho_minl2(wbar: f64, codebook: &Codebook) -> Result<(f64, usize)> {
    if codebook.is_empty() {
        return Err(Error::Config("empty codebook".into()));
    }
    let (r, d) = nearest_entry(wbar, &codebook.u);
    Ok((d * d, r))
}

/// 1 - exp(-min_r |wbar - u_r|) in [0, 1), and the argmin index.
pub fn rho_exp(wbar: f64, codebook: &Codebook) -> Result<(f64, usize)> {
    if codebook.is_empty() {
        return Err(Error::Config("empty codebook".into()));
    }
    let (r, d) = nearest_entry(wbar, &codebook.u);
    Ok((1.0 - (-d).exp(), r))
}

/// Evenly spaced representatives over [w_min, w_max], endpoints included.
/// Matches the minima layout of the sine penalty.
pub fn init_codebook(config: &RegConfig) -> Codebook {
    let k = config.k;
    let step = (config.w_max - config.w_min) / (k as f64 - 1.0);
    Codebook::new((0..k).map(|i| config.w_min + i as f64 * step).collect())
}

/// The K minima of a static penalty over [w, W]. Sine minima include the
/// endpoints; cosine minima sit at the odd half-period points strictly
/// inside. Misuse with a dynamic kind is an error: their minima live in a
/// [`Codebook`].
pub fn static_minima(kind: RegKind, k: usize, w: f64, w_max: f64) -> Result<Vec<f64>> {
    match kind {
        RegKind::Sine => {
            let step = (w_max - w) / (k as f64 - 1.0);
            Ok((0..k).map(|i| w + i as f64 * step).collect())
        }
        RegKind::Cosine => {
            let span = w_max - w;
            Ok((0..k)
                .map(|i| w + span * (2.0 * i as f64 + 1.0) / (2.0 * k as f64))
                .collect())
        }
        other => Err(Error::Config(format!(
            "static_minima called with {:?}; dynamic minima live in the codebook",
            other
        ))),
    }
}

/// Indices of the model layers the config's layer group selects, in layer
/// order.
pub fn selected_layers(model: &Model, config: &RegConfig) -> Vec<usize> {
    model
        .layers
        .iter()
        .enumerate()
        .filter(|(_, l)| config.layer_group.selects(&l.kind))
        .map(|(i, _)| i)
        .collect()
}

fn check_codebooks(config: &RegConfig, codebooks: &[Codebook], selected: usize) -> Result<()> {
    if !config.kind.is_dynamic() {
        return Ok(());
    }
    let expected = match config.codebook_mode {
        CodebookMode::PerLayer => selected,
        CodebookMode::Shared => 1,
    };
    if codebooks.len() != expected {
        return Err(Error::Config(format!(
            "expected {expected} codebook(s) for {} mode over {selected} selected layer(s), got {}",
            config.codebook_mode.name(),
            codebooks.len()
        )));
    }
    if let Some(cb) = codebooks.iter().find(|cb| cb.is_empty()) {
        let _ = cb;
        return Err(Error::Config("empty codebook".into()));
    }
    Ok(())
}

/// R(W): the per-layer mean penalty summed over selected layers, without
/// touching any gradient buffer. This is the value the finite-difference
/// oracles probe.
pub fn reg_value(model: &Model, config: &RegConfig, codebooks: &[Codebook]) -> Result<f64> {
    if config.kind == RegKind::None {
        return Err(Error::Config("regularizer kind is none".into()));
    }
    config.validate()?;
    let selected = selected_layers(model, config);
    if selected.is_empty() {
        return Err(Error::Config(format!(
            "layer group {} selects no layers",
            config.layer_group.name()
        )));
    }
    check_codebooks(config, codebooks, selected.len())?;

    let mut total = 0.0;
    for (slot, &li) in selected.iter().enumerate() {
        let layer = &model.layers[li];
        let count = layer.weights.len() as f64;
        let mut acc = 0.0;
        match config.kind {
            RegKind::Sine => {
                for &w in layer.weights.data() {
                    acc += rho_sine(w, config.k, config.w_min, config.w_max);
                }
            }
            RegKind::Cosine => {
                for &w in layer.weights.data() {
                    acc += rho_cosine(w, config.k, config.w_min, config.w_max);
                }
            }
            RegKind::MinL2 | RegKind::Exp => {
                let cb = match config.codebook_mode {
                    CodebookMode::PerLayer => &codebooks[slot],
                    CodebookMode::Shared => &codebooks[0],
                };
                for &w in layer.weights.data() {
                    let (_, d) = nearest_entry(w, &cb.u);
                    acc += match config.kind {
                        RegKind::MinL2 => d * d,
                        _ => 1.0 - (-d).exp(),
                    };
                }
            }
            RegKind::None => unreachable!(),
        }
        total += acc / count;
    }
    Ok(total)
}

/// Evaluates R(W) and accumulates `lambda * dR/dw` into each selected
/// layer's `grad_weights` and (for the dynamic kinds) `lambda * dR/du`
/// into `grad_u`. Existing buffer contents are kept: call after the task
/// loss has filled the gradients, and zero `grad_u` beforehand.
///
/// Subgradient choices: 0 at the |.| kinks of the static penalties and at
/// `wbar == u_r`; argmin ties break to the lowest index.
pub fn reg_value_and_grads(
    model: &mut Model,
    config: &RegConfig,
    codebooks: &mut [Codebook],
) -> Result<f64> {
    if config.kind == RegKind::None {
        return Err(Error::Config("regularizer kind is none".into()));
    }
    config.validate()?;
    let selected = selected_layers(model, config);
    if selected.is_empty() {
        return Err(Error::Config(format!(
            "layer group {} selects no layers",
            config.layer_group.name()
        )));
    }
    check_codebooks(config, codebooks, selected.len())?;

    let lambda = config.lambda;
    let mut total = 0.0;
    for (slot, &li) in selected.iter().enumerate() {
        let layer = &mut model.layers[li];
        let count = layer.weights.len() as f64;
        let scale = lambda / count;
        let mut acc = 0.0;
        match config.kind {
            RegKind::Sine => {
                for (w, g) in layer.weights.data().iter().zip(layer.grad_weights.data_mut()) {
                    acc += rho_sine(*w, config.k, config.w_min, config.w_max);
                    *g += scale * rho_sine_grad(*w, config.k, config.w_min, config.w_max);
                }
            }
            RegKind::Cosine => {
                for (w, g) in layer.weights.data().iter().zip(layer.grad_weights.data_mut()) {
                    acc += rho_cosine(*w, config.k, config.w_min, config.w_max);
                    *g += scale * rho_cosine_grad(*w, config.k, config.w_min, config.w_max);
                }
            }
            RegKind::MinL2 => {
                let cb = match config.codebook_mode {
                    CodebookMode::PerLayer => &mut codebooks[slot],
                    CodebookMode::Shared => &mut codebooks[0],
                };
                for (w, g) in layer.weights.data().iter().zip(layer.grad_weights.data_mut()) {
                    let (r, d) = nearest_entry(*w, &cb.u);
                    let signed = *w - cb.u[r];
                    acc += d * d;
                    *g += scale * 2.0 * signed;
                    cb.grad_u[r] -= scale * 2.0 * signed;
                }
            }
            RegKind::Exp => {
                let cb = match config.codebook_mode {
                    CodebookMode::PerLayer => &mut codebooks[slot],
                    CodebookMode::Shared => &mut codebooks[0],
                };
                for (w, g) in layer.weights.data().iter().zip(layer.grad_weights.data_mut()) {
                    let (r, d) = nearest_entry(*w, &cb.u);
                    let signed = *w - cb.u[r];
                    acc += 1.0 - (-d).exp();
                    if signed != 0.0 {
                        let slope = (-d).exp() * signed.signum();
                        *g += scale * slope;
                        cb.grad_u[r] -= scale * slope;
                    }
                }
            }
            RegKind::None => unreachable!(),
        }
        total += acc / count;
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{LayerParams, Model};
    use crate::tensor::Tensor;
    use crate::fdcheck::{central_diff, grads_match};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn dense_model(weights: Vec<f64>, rows: usize, cols: usize) -> Model {
        let mut layer = LayerParams::dense(rows, cols);
        layer.weights = Tensor::new(vec![rows, cols], weights);
        Model::new(vec![layer, LayerParams::softmax_ce()])
    }

    #[test]
    fn rho_sine_reference_points() {
        assert!(rho_sine(-1.0, 8, -1.0, 1.0).abs() < 1e-15);
        assert!((rho_sine(-1.0 + 1.0 / 7.0, 8, -1.0, 1.0) - 1.0).abs() < 1e-12);
        assert!((rho_sine(0.0, 8, -1.0, 1.0) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rho_cosine_reference_points() {
        assert!((rho_cosine(-1.0, 8, -1.0, 1.0) - 1.0).abs() < 1e-15);
        assert!(rho_cosine(-0.875, 8, -1.0, 1.0).abs() < 1e-12);
        assert!((rho_cosine(0.0, 8, -1.0, 1.0) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rho_minl2_reference_points() {
        let cb = Codebook::new(vec![-0.5, 0.5]);
        let (v, r) = rho_minl2(0.3, &cb).unwrap();
        assert!((v - 0.04).abs() < 1e-15);
        assert_eq!(r, 1);

        let (v, r) = rho_minl2(-0.5, &cb).unwrap();
        assert_eq!(v, 0.0);
        assert_eq!(r, 0);

        // exact midpoint: tie broken to the lowest index
        let (v, r) = rho_minl2(0.0, &cb).unwrap();
        assert!((v - 0.25).abs() < 1e-15);
        assert_eq!(r, 0);
    }

    #[test]
    fn rho_exp_reference_points() {
        let cb = Codebook::new(vec![-0.5, 0.5]);
        let (v, _) = rho_exp(0.5, &cb).unwrap();
        assert_eq!(v, 0.0);

        let (v, r) = rho_exp(0.3, &cb).unwrap();
        assert!((v - (1.0 - (-0.2_f64).exp())).abs() < 1e-15);
        assert_eq!(r, 1);

        let (v, _) = rho_exp(1.5, &cb).unwrap();
        assert!((v - (1.0 - (-1.0_f64).exp())).abs() < 1e-15);
    }

    #[test]
    fn empty_codebook_is_config_error() {
        let cb = Codebook::new(vec![]);
        assert!(matches!(rho_minl2(0.0, &cb), Err(Error::Config(_))));
        assert!(matches!(rho_exp(0.0, &cb), Err(Error::Config(_))));
    }

    #[test]
    fn init_codebook_reference_layouts() {
        let mut cfg = RegConfig::new(RegKind::MinL2, 2);
        assert_eq!(init_codebook(&cfg).u, vec![-1.0, 1.0]);

        cfg.k = 8;
        let u = init_codebook(&cfg).u;
        let expected = [-1.0, -5.0 / 7.0, -3.0 / 7.0, -1.0 / 7.0, 1.0 / 7.0, 3.0 / 7.0, 5.0 / 7.0, 1.0];
        for (a, b) in u.iter().zip(expected.iter()) {
            assert!((a - b).abs() < 1e-15);
        }

        cfg.k = 3;
        cfg.w_min = 0.0;
        cfg.w_max = 1.0;
        assert_eq!(init_codebook(&cfg).u, vec![0.0, 0.5, 1.0]);
    }

    #[test]
    fn static_minima_layouts_and_self_consistency() {
        let sine = static_minima(RegKind::Sine, 8, -1.0, 1.0).unwrap();
        assert!((sine[0] + 1.0).abs() < 1e-15);
        assert!((sine[7] - 1.0).abs() < 1e-15);
        assert!((sine[1] + 5.0 / 7.0).abs() < 1e-15);

        let cosine = static_minima(RegKind::Cosine, 8, -1.0, 1.0).unwrap();
        assert!((cosine[0] + 0.875).abs() < 1e-15);
        assert!((cosine[7] - 0.875).abs() < 1e-15);

        for &m in &sine {
            assert!(rho_sine(m, 8, -1.0, 1.0) <= 1e-12);
        }
        for &m in &cosine {
            assert!(rho_cosine(m, 8, -1.0, 1.0) <= 1e-12);
        }

        assert!(matches!(
            static_minima(RegKind::MinL2, 8, -1.0, 1.0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn minl2_single_weight_analytic_gradients() {
        let mut model = dense_model(vec![0.3], 1, 1);
        let mut cfg = RegConfig::new(RegKind::MinL2, 2);
        cfg.lambda = 1.0;
        cfg.w_min = -0.5;
        cfg.w_max = 0.5;
        let mut cbs = vec![init_codebook(&cfg)];
        assert_eq!(cbs[0].u, vec![-0.5, 0.5]);

        let r = reg_value_and_grads(&mut model, &cfg, &mut cbs).unwrap();
        assert!((r - 0.04).abs() < 1e-15);
        assert!((model.layers[0].grad_weights.data()[0] - (-0.4)).abs() < 1e-15);
        assert!((cbs[0].grad_u[0] - 0.0).abs() < 1e-15);
        assert!((cbs[0].grad_u[1] - 0.4).abs() < 1e-15);
    }

    #[test]
    fn weights_on_codebook_entries_give_zero_penalty_and_gradients() {
        let mut model = dense_model(vec![-0.5, 0.5, 0.5, -0.5], 2, 2);
        let mut cfg = RegConfig::new(RegKind::MinL2, 2);
        cfg.w_min = -0.5;
        cfg.w_max = 0.5;
        let mut cbs = vec![init_codebook(&cfg)];
        let r = reg_value_and_grads(&mut model, &cfg, &mut cbs).unwrap();
        assert_eq!(r, 0.0);
        assert!(model.layers[0].grad_weights.data().iter().all(|&g| g == 0.0));
        assert!(cbs[0].grad_u.iter().all(|&g| g == 0.0));
    }

    /// Central finite differences on a random 3x4 layer, all four kinds,
    /// both weight and codebook gradients, away from the kinks.
    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let kinds = [RegKind::Sine, RegKind::Cosine, RegKind::MinL2, RegKind::Exp];
        for &kind in &kinds {
            let mut cfg = RegConfig::new(kind, 4);
            cfg.lambda = 0.7;
            let base_cb = init_codebook(&cfg);
            let minima: Vec<f64> = match kind {
                RegKind::Sine | RegKind::Cosine => {
                    static_minima(kind, cfg.k, cfg.w_min, cfg.w_max).unwrap()
                }
                _ => base_cb.u.clone(),
            };
            // sample weights at least 1e-3 from any kink. Static kinds kink
            // at every |.| zero, which extends periodically outside [w, W];
            // dynamic kinds kink on the entries and the Voronoi midpoints.
            let kink_distance = |x: f64| -> f64 {
                match kind {
                    RegKind::Sine => {
                        let a = PI * (cfg.k as f64 - 1.0) / (cfg.w_max - cfg.w_min);
                        let phase = a * (x - cfg.w_min) / PI;
                        (phase - phase.round()).abs() * PI / a
                    }
                    RegKind::Cosine => {
                        let b = PI * cfg.k as f64 / (cfg.w_max - cfg.w_min);
                        let phase = b * (x - cfg.w_min) / PI - 0.5;
                        (phase - phase.round()).abs() * PI / b
                    }
                    _ => {
                        let mut kinks = minima.clone();
                        for pair in base_cb.u.windows(2) {
                            kinks.push((pair[0] + pair[1]) / 2.0);
                        }
                        kinks
                            .iter()
                            .map(|&m| (x - m).abs())
                            .fold(f64::INFINITY, f64::min)
                    }
                }
            };
            let mut weights = Vec::with_capacity(12);
            while weights.len() < 12 {
                let w: f64 = rng.gen_range(-1.4..1.4);
                if kink_distance(w) > 1e-3 {
                    weights.push(w);
                }
            }
            let mut model = dense_model(weights.clone(), 3, 4);
            let mut cbs = vec![base_cb.clone()];
            let analytic_r = reg_value_and_grads(&mut model, &cfg, &mut cbs).unwrap();
            let value_only = reg_value(&model, &cfg, &cbs).unwrap();
            assert!((analytic_r - value_only).abs() < 1e-12);

            for i in 0..12 {
                let analytic = model.layers[0].grad_weights.data()[i] / cfg.lambda;
                let numeric = central_diff(
                    |x| {
                        let mut ws = weights.clone();
                        ws[i] = x;
                        let probe = dense_model(ws, 3, 4);
                        reg_value(&probe, &cfg, &[base_cb.clone()]).unwrap()
                    },
                    weights[i],
                    1e-6,
                );
                assert!(
                    grads_match(analytic, numeric, 1e-4),
                    "{kind:?} weight {i}: analytic {analytic} vs fd {numeric}"
                );
            }
            if kind.is_dynamic() {
                for r in 0..cfg.k {
                    let analytic = cbs[0].grad_u[r] / cfg.lambda;
                    let numeric = central_diff(
                        |x| {
                            let mut cb = base_cb.clone();
                            cb.u[r] = x;
                            let probe = dense_model(weights.clone(), 3, 4);
                            reg_value(&probe, &cfg, &[cb]).unwrap()
                        },
                        base_cb.u[r],
                        1e-6,
                    );
                    assert!(
                        grads_match(analytic, numeric, 1e-4),
                        "{kind:?} u[{r}]: analytic {analytic} vs fd {numeric}"
                    );
                }
            }
        }
    }

    #[test]
    fn gradient_scales_linearly_with_lambda() {
        let weights: Vec<f64> = vec![0.31, -0.64, 0.12, 0.99, -0.27, 0.55];
        let kinds = [RegKind::Sine, RegKind::Cosine, RegKind::MinL2, RegKind::Exp];
        for &kind in &kinds {
            let mut cfg = RegConfig::new(kind, 4);
            cfg.lambda = 0.35;
            let mut model_a = dense_model(weights.clone(), 2, 3);
            let mut cbs_a = vec![init_codebook(&cfg)];
            reg_value_and_grads(&mut model_a, &cfg, &mut cbs_a).unwrap();

            let mut cfg2 = cfg.clone();
            cfg2.lambda = 0.7;
            let mut model_b = dense_model(weights.clone(), 2, 3);
            let mut cbs_b = vec![init_codebook(&cfg2)];
            reg_value_and_grads(&mut model_b, &cfg2, &mut cbs_b).unwrap();

            for (a, b) in model_a.layers[0]
                .grad_weights
                .data()
                .iter()
                .zip(model_b.layers[0].grad_weights.data())
            {
                if *a == 0.0 {
                    assert_eq!(*b, 0.0);
                } else {
                    assert!((b / a - 2.0).abs() < 1e-12, "{a} vs {b}");
                }
            }
            for (a, b) in cbs_a[0].grad_u.iter().zip(cbs_b[0].grad_u.iter()) {
                if *a == 0.0 {
                    assert_eq!(*b, 0.0);
                } else {
                    assert!((b / a - 2.0).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn layer_group_selecting_nothing_is_config_error() {
        let mut model = dense_model(vec![0.1, 0.2], 1, 2);
        let mut cfg = RegConfig::new(RegKind::Sine, 4);
        cfg.layer_group = LayerGroup::ConvOnly;
        let err = reg_value_and_grads(&mut model, &cfg, &mut []).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn shared_codebook_accumulates_across_layers() {
        let mut l1 = LayerParams::dense(1, 2);
        l1.weights = Tensor::new(vec![1, 2], vec![0.3, 0.3]);
        let mut l2 = LayerParams::dense(2, 1);
        l2.weights = Tensor::new(vec![2, 1], vec![0.3, 0.3]);
        let mut model = Model::new(vec![l1, l2, LayerParams::softmax_ce()]);
        let mut cfg = RegConfig::new(RegKind::MinL2, 2);
        cfg.codebook_mode = CodebookMode::Shared;
        cfg.lambda = 1.0;
        cfg.w_min = -0.5;
        cfg.w_max = 0.5;
        let mut cbs = vec![init_codebook(&cfg)];
        let r = reg_value_and_grads(&mut model, &cfg, &mut cbs).unwrap();
        // each layer contributes mean((0.3-0.5)^2) = 0.04
        assert!((r - 0.08).abs() < 1e-15);
        // u_1 pulled toward 0.3 by 0.4 per layer, from both layers
        assert!((cbs[0].grad_u[1] - 0.8).abs() < 1e-12);
    }

    proptest::proptest! {
        #[test]
        fn penalty_ranges_hold(w in -5.0f64..5.0, k in 2usize..16) {
            let s = rho_sine(w, k, -1.0, 1.0);
            let c = rho_cosine(w, k, -1.0, 1.0);
            proptest::prop_assert!((0.0..=1.0).contains(&s));
            proptest::prop_assert!((0.0..=1.0).contains(&c));
            let cb = Codebook::new(vec![-0.7, -0.1, 0.4, 0.9]);
            let (m, _) = rho_minl2(w, &cb).unwrap();
            let (e, _) = rho_exp(w, &cb).unwrap();
            proptest::prop_assert!(m >= 0.0);
            proptest::prop_assert!((0.0..1.0).contains(&e));
        }

        #[test]
        fn sine_mirror_symmetry(t in 0.0f64..2.0, k in 2usize..12) {
            let (w, w_max) = (-1.0, 1.0);
            let a = rho_sine(w + t, k, w, w_max);
            let b = rho_sine(w_max - t, k, w, w_max);
            proptest::prop_assert!((a - b).abs() < 1e-9, "{} vs {}", a, b);
        }

        #[test]
        fn dynamic_penalties_zero_iff_on_entry(idx in 0usize..4, offset in 1e-6f64..0.5) {
            let cb = Codebook::new(vec![-0.7, -0.1, 0.4, 0.9]);
            let (m0, _) = rho_minl2(cb.u[idx], &cb).unwrap();
            let (e0, _) = rho_exp(cb.u[idx], &cb).unwrap();
            proptest::prop_assert_eq!(m0, 0.0);
            proptest::prop_assert_eq!(e0, 0.0);
            // strictly positive off the entries (offset below half the
            // smallest gap keeps the probe off every entry)
            let probe = cb.u[idx] + offset.min(0.14);
            let (m1, _) = rho_minl2(probe, &cb).unwrap();
            let (e1, _) = rho_exp(probe, &cb).unwrap();
            proptest::prop_assert!(m1 > 0.0);
            proptest::prop_assert!(e1 > 0.0);
        }
    }

    /// The weight gradient points toward the nearest minimum between a
    /// minimum and the adjacent penalty peak, for all four kinds.
    #[test]
    fn gradient_pulls_toward_nearest_minimum() {
        let cfg_range = (-1.0, 1.0);
        let k = 8;
        for kind in [RegKind::Sine, RegKind::Cosine, RegKind::MinL2, RegKind::Exp] {
            let minima: Vec<f64> = match kind {
                RegKind::Sine | RegKind::Cosine => {
                    static_minima(kind, k, cfg_range.0, cfg_range.1).unwrap()
                }
                _ => {
                    let cfg = RegConfig::new(kind, k);
                    init_codebook(&cfg).u
                }
            };
            let cb = Codebook::new(minima.clone());
            for pair in minima.windows(2) {
                let (m, next) = (pair[0], pair[1]);
                let peak = (m + next) / 2.0;
                for frac in [0.1, 0.35, 0.6, 0.9] {
                    let wbar = m + frac * (peak - m) * 0.999;
                    if (wbar - m).abs() < 1e-3 {
                        continue;
                    }
                    let grad = match kind {
                        RegKind::Sine => rho_sine_grad(wbar, k, cfg_range.0, cfg_range.1),
                        RegKind::Cosine => rho_cosine_grad(wbar, k, cfg_range.0, cfg_range.1),
                        RegKind::MinL2 => {
                            let (r, _) = nearest_entry(wbar, &cb.u);
                            2.0 * (wbar - cb.u[r])
                        }
                        RegKind::Exp => {
                            let (r, _) = nearest_entry(wbar, &cb.u);
                            let signed = wbar - cb.u[r];
                            (-signed.abs()).exp() * signed.signum()
                        }
                        RegKind::None => unreachable!(),
                    };
                    // descending the penalty moves wbar toward m (below wbar)
                    assert!(
                        grad > 0.0,
                        "{kind:?}: wbar {wbar} between minimum {m} and peak {peak}, grad {grad}"
                    );
                }
            }
        }
    }
}
