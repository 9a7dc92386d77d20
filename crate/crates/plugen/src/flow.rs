//! The invertible map between the factorized space (label coordinates first,
//! style coordinates after) and the latent space of the frozen backbone.
//!
//! The map is a stack of additive coupling layers followed by a diagonal
//! scaling layer. Couplings have unit Jacobian determinant, so the scaling
//! layer carries the entire log-determinant: the inverse direction
//! contributes exactly `-sum(log_scale)`.

use rand::Rng;

use crate::error::{contract, Error, Result};
use crate::numerics::{all_finite, ForwardCache, Mlp, MlpGrads};

/// Largest allowed magnitude of a scaling-layer entry; keeps `exp(log_scale)`
/// comfortably away from overflow/underflow so the map stays invertible.
pub const LOG_SCALE_LIMIT: f64 = 10.0;

/// A point in the backbone latent space.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentCode {
    values: Vec<f64>,
}

impl LatentCode {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if !all_finite(&values) {
            return Err(Error::Numeric("latent code has non-finite entries".into()));
        }
        Ok(Self { values })
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn dims(&self) -> usize {
        self.values.len()
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.values
    }
}

/// A point in the factorized space: the first `k` coordinates are label
/// variables, the rest are style variables.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorizedCode {
    values: Vec<f64>,
    k: usize,
}

impl FactorizedCode {
    pub fn new(labels: Vec<f64>, style: Vec<f64>) -> Result<Self> {
        let k = labels.len();
        let mut values = labels;
        values.extend_from_slice(&style);
        Self::from_vec(values, k)
    }

    pub fn from_vec(values: Vec<f64>, k: usize) -> Result<Self> {
        if k == 0 || k >= values.len() {
            return Err(contract(format!(
                "label count {k} must satisfy 1 <= k < dims ({})",
                values.len()
            )));
        }
        if !all_finite(&values) {
            return Err(Error::Numeric(
                "factorized code has non-finite entries".into(),
            ));
        }
        Ok(Self { values, k })
    }

    fn from_vec_unchecked(values: Vec<f64>, k: usize) -> Self {
        Self { values, k }
    }

    /// The label variables `c`.
    pub fn label_vars(&self) -> &[f64] {
        &self.values[..self.k]
    }

    /// The style variables `s`.
    pub fn style_vars(&self) -> &[f64] {
        &self.values[self.k..]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn k_labels(&self) -> usize {
        self.k
    }

    pub fn dims(&self) -> usize {
        self.values.len()
    }
}

/// Additive coupling layer: coordinates marked by `mask` pass through
/// unchanged and drive a conditioner that shifts the complementary
/// coordinates.
#[derive(Debug, Clone)]
pub struct CouplingLayer {
    mask: Vec<bool>,
    conditioner: Mlp,
}

impl CouplingLayer {
    pub fn new(mask: Vec<bool>, conditioner: Mlp) -> Result<Self> {
        let pass = mask.iter().filter(|&&m| m).count();
        let shifted = mask.len() - pass;
        if pass == 0 || shifted == 0 {
            return Err(contract(
                "coupling mask must pass through and transform at least one coordinate",
            ));
        }
        if conditioner.in_dim() != pass || conditioner.out_dim() != shifted {
            return Err(contract(format!(
                "conditioner maps {} -> {}, mask needs {} -> {}",
                conditioner.in_dim(),
                conditioner.out_dim(),
                pass,
                shifted
            )));
        }
        Ok(Self { mask, conditioner })
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn conditioner(&self) -> &Mlp {
        &self.conditioner
    }

    fn gather_pass(&self, x: &[f64]) -> Vec<f64> {
        self.mask
            .iter()
            .zip(x)
            .filter_map(|(&m, &v)| m.then_some(v))
            .collect()
    }

    /// Applies the shift in place: `sign` is +1 in the forward direction and
    /// -1 in the inverse. Returns the conditioner cache.
    fn apply(&self, x: &mut [f64], sign: f64) -> Result<ForwardCache> {
        let pass = self.gather_pass(x);
        let (shift, cache) = self.conditioner.forward(&pass)?;
        let mut slot = 0;
        for (i, &m) in self.mask.iter().enumerate() {
            if !m {
                x[i] += sign * shift[slot];
                slot += 1;
            }
        }
        Ok(cache)
    }
}

/// Diagonal scaling layer: elementwise multiplication by `exp(log_scale)`.
#[derive(Debug, Clone)]
pub struct ScalingLayer {
    log_scale: Vec<f64>,
}

impl ScalingLayer {
    pub fn zeros(dims: usize) -> Self {
        Self {
            log_scale: vec![0.0; dims],
        }
    }

    pub fn log_scale(&self) -> &[f64] {
        &self.log_scale
    }
}

/// Record of one inverse pass, retained for the backward pass.
pub struct InverseTrace {
    /// `z * exp(-log_scale)`, the state right after undoing the scaling.
    scaled: Vec<f64>,
    /// Conditioner caches in inverse execution order (last coupling first).
    coupling_caches: Vec<(usize, ForwardCache)>,
    output: Vec<f64>,
    log_det: f64,
}

impl InverseTrace {
    pub fn output(&self) -> &[f64] {
        &self.output
    }

    pub fn log_det(&self) -> f64 {
        self.log_det
    }
}

/// The full invertible map: couplings applied in order, then the scaling.
#[derive(Debug, Clone)]
pub struct NiceFlow {
    dims: usize,
    k_labels: usize,
    couplings: Vec<CouplingLayer>,
    scaling: ScalingLayer,
}

impl NiceFlow {
    /// Builds a flow with alternating parity masks (even coordinates pass
    /// through in the first coupling) and conditioners whose output layers
    /// start at zero, so the freshly built flow is the identity map.
    pub fn new<R: Rng + ?Sized>(
        dims: usize,
        k_labels: usize,
        n_couplings: usize,
        conditioner_depth: usize,
        conditioner_width: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if dims < 2 || k_labels == 0 || k_labels >= dims {
            return Err(contract(format!(
                "need 1 <= k_labels < dims, got k_labels={k_labels}, dims={dims}"
            )));
        }
        if n_couplings == 0 {
            return Err(contract("at least one coupling layer is required"));
        }
        let mut couplings = Vec::with_capacity(n_couplings);
        for layer in 0..n_couplings {
            // Complement the mask every layer so each coordinate is
            // transformed by every second coupling.
            let even_passes = layer % 2 == 0;
            let mask: Vec<bool> = (0..dims).map(|i| (i % 2 == 0) == even_passes).collect();
            let pass = mask.iter().filter(|&&m| m).count();
            let conditioner = Mlp::with_shape(
                pass,
                dims - pass,
                conditioner_width,
                conditioner_depth,
                true,
                rng,
            )?;
            couplings.push(CouplingLayer::new(mask, conditioner)?);
        }
        Ok(Self {
            dims,
            k_labels,
            couplings,
            scaling: ScalingLayer::zeros(dims),
        })
    }

    pub fn from_parts(
        dims: usize,
        k_labels: usize,
        couplings: Vec<CouplingLayer>,
        scaling: ScalingLayer,
    ) -> Result<Self> {
        if dims < 2 || k_labels == 0 || k_labels >= dims {
            return Err(contract("need 1 <= k_labels < dims"));
        }
        if couplings.is_empty() {
            return Err(contract("at least one coupling layer is required"));
        }
        if couplings.iter().any(|c| c.mask.len() != dims) || scaling.log_scale.len() != dims {
            return Err(Error::Dimension(
                "coupling masks and scaling must match the flow dimension".into(),
            ));
        }
        Ok(Self {
            dims,
            k_labels,
            couplings,
            scaling,
        })
    }

    pub fn dims(&self) -> usize {
        self.dims
    }

    pub fn k_labels(&self) -> usize {
        self.k_labels
    }

    pub fn couplings(&self) -> &[CouplingLayer] {
        &self.couplings
    }

    pub fn scaling(&self) -> &ScalingLayer {
        &self.scaling
    }

    /// Maps a factorized code to a latent code: couplings in listed order,
    /// then the elementwise scaling.
    pub fn forward(&self, v: &FactorizedCode) -> Result<LatentCode> {
        if v.dims() != self.dims || v.k_labels() != self.k_labels {
            return Err(Error::Dimension(format!(
                "code has dims {} / k {}, flow expects {} / {}",
                v.dims(),
                v.k_labels(),
                self.dims,
                self.k_labels
            )));
        }
        let z = self.forward_slice(v.as_slice())?;
        Ok(LatentCode { values: z })
    }

    pub(crate) fn forward_slice(&self, v: &[f64]) -> Result<Vec<f64>> {
        let mut x = v.to_vec();
        for (idx, coupling) in self.couplings.iter().enumerate() {
            coupling.apply(&mut x, 1.0)?;
            if !all_finite(&x) {
                return Err(Error::Numeric(format!(
                    "coupling layer {idx} produced a non-finite value"
                )));
            }
        }
        for (xi, &s) in x.iter_mut().zip(&self.scaling.log_scale) {
            *xi *= s.exp();
        }
        if !all_finite(&x) {
            return Err(Error::Numeric(
                "scaling layer produced a non-finite value".into(),
            ));
        }
        Ok(x)
    }

    /// Maps a latent code back to the factorized space and returns
    /// `log |det dF^-1/dz| = -sum(log_scale)`.
    pub fn inverse(&self, z: &LatentCode) -> Result<(FactorizedCode, f64)> {
        if z.dims() != self.dims {
            return Err(Error::Dimension(format!(
                "latent code has dims {}, flow expects {}",
                z.dims(),
                self.dims
            )));
        }
        let trace = self.inverse_traced_slice(z.as_slice())?;
        Ok((
            FactorizedCode::from_vec_unchecked(trace.output, self.k_labels),
            trace.log_det,
        ))
    }

    /// Inverse pass that retains the activation records needed by
    /// [`NiceFlow::backprop`].
    pub(crate) fn inverse_traced_slice(&self, z: &[f64]) -> Result<InverseTrace> {
        if !all_finite(z) {
            return Err(Error::Numeric("latent code has non-finite entries".into()));
        }
        let mut x: Vec<f64> = z
            .iter()
            .zip(&self.scaling.log_scale)
            .map(|(&zi, &s)| zi * (-s).exp())
            .collect();
        let scaled = x.clone();
        let mut coupling_caches = Vec::with_capacity(self.couplings.len());
        for idx in (0..self.couplings.len()).rev() {
            let cache = self.couplings[idx].apply(&mut x, -1.0)?;
            if !all_finite(&x) {
                return Err(Error::Numeric(format!(
                    "coupling layer {idx} produced a non-finite value"
                )));
            }
            coupling_caches.push((idx, cache));
        }
        Ok(InverseTrace {
            scaled,
            coupling_caches,
            output: x,
            log_det: self.inverse_log_det(),
        })
    }

    /// `log |det dF^-1/dz|`, independent of the evaluation point.
    pub fn inverse_log_det(&self) -> f64 {
        -self.scaling.log_scale.iter().sum::<f64>()
    }

    /// `log |det dF/dv|`, the forward-direction volume change.
    pub fn forward_log_det(&self) -> f64 {
        self.scaling.log_scale.iter().sum::<f64>()
    }

    /// Reverse-mode gradients of the inverse pass with respect to every flow
    /// parameter, given cotangents on the factorized output and on the
    /// log-determinant. Returned flat, in [`NiceFlow::params`] order.
    pub fn backprop(
        &self,
        z: &[f64],
        trace: &InverseTrace,
        d_output: &[f64],
        d_log_det: f64,
    ) -> Result<Vec<f64>> {
        if d_output.len() != self.dims || z.len() != self.dims {
            return Err(contract("cotangent shape does not match flow dimension"));
        }
        let mut coupling_grads: Vec<MlpGrads> = self
            .couplings
            .iter()
            .map(|c| MlpGrads::zeros_like(&c.conditioner))
            .collect();

        // Walk the inverse pass backwards: the couplings ran in reverse
        // layer order, so reverse-mode visits them in forward layer order.
        let mut d_state = d_output.to_vec();
        for (idx, cache) in trace.coupling_caches.iter().rev() {
            let coupling = &self.couplings[*idx];
            let mut d_shift = Vec::with_capacity(self.dims);
            for (i, &m) in coupling.mask.iter().enumerate() {
                if !m {
                    // The inverse subtracts the shift.
                    d_shift.push(-d_state[i]);
                }
            }
            let (d_pass, grads) = coupling.conditioner.backward(cache, &d_shift)?;
            coupling_grads[*idx].accumulate(&grads);
            let mut slot = 0;
            for (i, &m) in coupling.mask.iter().enumerate() {
                if m {
                    d_state[i] += d_pass[slot];
                    slot += 1;
                }
            }
        }

        // Scaling: state = z * exp(-log_scale), and log_det = -sum(log_scale).
        let d_log_scale: Vec<f64> = d_state
            .iter()
            .zip(&trace.scaled)
            .map(|(&d, &u)| -d * u - d_log_det)
            .collect();

        let mut flat = Vec::with_capacity(self.param_count());
        for grads in &coupling_grads {
            Mlp::write_grads(grads, &mut flat);
        }
        flat.extend_from_slice(&d_log_scale);
        Ok(flat)
    }

    /// Convenience wrapper: inverse pass plus backprop in one call.
    pub fn grad(&self, z: &LatentCode, d_output: &[f64], d_log_det: f64) -> Result<Vec<f64>> {
        let trace = self.inverse_traced_slice(z.as_slice())?;
        self.backprop(z.as_slice(), &trace, d_output, d_log_det)
    }

    pub fn param_count(&self) -> usize {
        self.couplings
            .iter()
            .map(|c| c.conditioner.param_count())
            .sum::<usize>()
            + self.dims
    }

    /// Flat parameter vector in deterministic order: couplings in order, per
    /// conditioner layer row-major weights then bias, then the log scale.
    pub fn params(&self) -> Vec<f64> {
        let mut flat = Vec::with_capacity(self.param_count());
        for coupling in &self.couplings {
            coupling.conditioner.write_params(&mut flat);
        }
        flat.extend_from_slice(&self.scaling.log_scale);
        flat
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.param_count() {
            return Err(contract(format!(
                "parameter vector has length {}, flow expects {}",
                params.len(),
                self.param_count()
            )));
        }
        let mut offset = 0;
        for coupling in &mut self.couplings {
            offset += coupling.conditioner.read_params(&params[offset..])?;
        }
        self.scaling.log_scale.copy_from_slice(&params[offset..]);
        Ok(())
    }

    /// Clamps the scaling parameters into `[-limit, limit]`; applied after
    /// every optimizer step.
    pub fn clamp_log_scale(&mut self, limit: f64) {
        for s in &mut self.scaling.log_scale {
            *s = s.clamp(-limit, limit);
        }
    }
}

/// Returns a copy of `v` with the listed label coordinates replaced. Edits
/// apply in order, so a repeated index keeps the last value. Style
/// coordinates cannot be addressed here.
pub fn edit_code(v: &FactorizedCode, edits: &[(usize, f64)]) -> Result<FactorizedCode> {
    for &(idx, value) in edits {
        if idx >= v.k_labels() {
            return Err(contract(format!(
                "edit index {idx} is not a label coordinate (k = {})",
                v.k_labels()
            )));
        }
        if !value.is_finite() {
            return Err(contract(format!(
                "edit value for index {idx} is not finite"
            )));
        }
    }
    let mut values = v.as_slice().to_vec();
    for &(idx, value) in edits {
        values[idx] = value;
    }
    Ok(FactorizedCode::from_vec_unchecked(values, v.k_labels()))
}
